"""Run configuration: file schema, the shipped ``recipe`` preset, and the
resolution pipeline that turns a config into a concrete two-phase plan.

Config files are YAML with the following top-level keys::

    seed: 1234                  # manifest shuffling seed
    total_tokens: 300000000000  # continued-training horizon
    switch_fraction: 0.2        # LR fraction at which GB switches to QB
    lr_curve_points: 256        # samples in the plan's LR curve output
    inventory_dir: path         # directory of <source>.inventory.tsv files
    schedule:
      kind: cosine              # or wsd
      eta_start: 4.5e-5
      eta_end: 4.5e-7
      warmup: {start_lr: 0.0, target_lr: 4.5e-5, tokens: 16000000000}  # optional
      wsd_stable_fraction: 0.8  # wsd only
      wsd_decay_shape: linear   # wsd only
    sources:
      - {name: web_crawl, domain: english_web, token_count: 5106000000000}
      - {name: qa_stem, domain: qa_category, qa_category: stem, token_count: 310000000}
    blends:
      gb:
        label: GB
        weights: {web_crawl: 5106, books: 80}     # raw; normalized on load
        transforms:
          - {op: reweight_domains, factors: {books: 2.0}}
          - {op: high_quality_web, manifest: quality_manifest.json}
      qb:
        label: QB
        weights: {web_crawl: 5106, books: 80}
        qa_weight: 0.10           # QA sources injected at this total weight
        qa_categories: {world_knowledge: 0.26, reasoning: 0.21, stem: 0.33,
                        chat: 0.13, code: 0.07}   # optional; default by size
    epoch_caps: {qa_stem: 4.0}    # per-source epoch ceilings, per phase
    quality: {order: 5, quartile: 0.25, reference_corpus: ref.txt, per_line: false}
    mining: {k: 50, metric: cosine}

Numbers may be written in scientific notation; values are coerced, so YAML's
habit of reading ``300e9`` as a string is harmless.  The config digest is the
SHA-256 of the normalized config, and every command output embeds it.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from . import blend as blend_mod
from .blend import (
    BlendPhase,
    BlendPlan,
    DataSource,
    SourceRegistry,
    Transform,
    add_qa,
    apply_epoch_caps,
    apply_transform,
    build_two_phase_plan,
    epochs,
    normalize,
)
from .errors import ConfigError
from .schedule import (
    LrSchedule,
    WarmupSpec,
    build_cosine,
    build_wsd,
    lr_at,
    sample_curve,
    solve_switch_token,
)

RECIPE_SWITCH_FRACTION = 0.2
RECIPE_QA_WEIGHT = 0.10
RECIPE_EPOCH_CAP = 4.0
RECIPE_ETA_START = 4.5e-5  # the pretrained model's minimum LR
RECIPE_ETA_END = RECIPE_ETA_START / 100

# Pretraining source sizes in billions of tokens; these seed the preset's
# proportional weights and are fully editable.
RECIPE_SOURCES_B = {
    "web_crawl": ("english_web", 5106.0),
    "misc": ("english_highquality_category", 179.0),
    "news": ("english_highquality_category", 93.0),
    "scientific_papers": ("english_highquality_category", 82.0),
    "books": ("english_highquality_category", 80.0),
    "legal": ("english_highquality_category", 50.0),
    "encyclopedia": ("english_highquality_category", 31.0),
    "finance": ("english_highquality_category", 20.0),
    "multilingual_web": ("multilingual", 2229.0),
    "parallel_corpora": ("multilingual", 55.0),
    "github": ("code", 583.0),
}
RECIPE_QA_SOURCES_B = {
    "qa_world_knowledge": ("world_knowledge", 1.13),
    "qa_reasoning": ("reasoning", 0.92),
    "qa_stem": ("stem", 0.31),
    "qa_chat": ("chat", 0.26),
    "qa_code": ("code", 0.19),
}

# Named QA category sub-blends.  "proportional" sizes shares by corpus size;
# the other two shift mass toward STEM while holding world-knowledge or chat.
QA_CATEGORY_BLENDS: dict[str, dict[str, float] | None] = {
    "proportional": None,
    "stem_world_knowledge": {
        "world_knowledge": 0.41,
        "reasoning": 0.18,
        "stem": 0.28,
        "chat": 0.07,
        "code": 0.06,
    },
    "stem_chat": {
        "world_knowledge": 0.26,
        "reasoning": 0.21,
        "stem": 0.33,
        "chat": 0.13,
        "code": 0.07,
    },
}


def _num(value, kind=float, key="?"):
    try:
        out = kind(float(value)) if kind is int else kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return out


@dataclass
class RunConfig:
    seed: int
    total_tokens: int
    switch_fraction: float
    schedule: LrSchedule
    sources: list[DataSource]
    gb_spec: dict
    qb_spec: dict
    epoch_caps: dict[str, float] = field(default_factory=dict)
    epoch_cap_redistribute_to: list[str] | None = None
    inventory_dir: str | None = None
    lr_curve_points: int = 256
    quality: dict = field(default_factory=dict)
    mining: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict, repr=False)

    def digest(self) -> str:
        blob = json.dumps(self.normalized, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def registry(self) -> SourceRegistry:
        return SourceRegistry(self.sources)


def recipe_config(
    total_tokens: float = 300e9,
    seed: int = 1234,
    sources_b: dict[str, tuple[str, float]] | None = None,
    qa_sources_b: dict[str, tuple[str, float]] | None = None,
    inventory_dir: str | None = None,
) -> dict:
    """Config dict for the default continued-pretraining recipe.

    Defaults: decay from the pretrained minimum LR to 1/100 of it with cosine
    annealing and no warmup, switch blends at 1/5 of the maximum LR, inject
    QA data at 10% with the stem+chat category blend, and cap every QA source
    at 4 epochs.
    """
    sources_b = sources_b if sources_b is not None else RECIPE_SOURCES_B
    qa_sources_b = qa_sources_b if qa_sources_b is not None else RECIPE_QA_SOURCES_B
    sources = [
        {"name": name, "domain": domain, "token_count": int(size_b * 1e9)}
        for name, (domain, size_b) in sources_b.items()
    ]
    sources += [
        {
            "name": name,
            "domain": "qa_category",
            "qa_category": category,
            "token_count": int(size_b * 1e9),
        }
        for name, (category, size_b) in qa_sources_b.items()
    ]
    base_weights = {name: size_b for name, (_, size_b) in sources_b.items()}
    hq_factors = {
        name: 2.0
        for name, (domain, _) in sources_b.items()
        if domain == "english_highquality_category"
    }
    return {
        "seed": seed,
        "total_tokens": int(total_tokens),
        "switch_fraction": RECIPE_SWITCH_FRACTION,
        "inventory_dir": inventory_dir,
        "schedule": {
            "kind": "cosine",
            "eta_start": RECIPE_ETA_START,
            "eta_end": RECIPE_ETA_END,
        },
        "sources": sources,
        "blends": {
            "gb": {
                "label": "GB",
                "weights": dict(base_weights),
                "transforms": (
                    [{"op": "upweight_non_web_with_hq_web", "factors": hq_factors}]
                    if hq_factors
                    else []
                ),
            },
            "qb": {
                "label": "QB",
                "weights": dict(base_weights),
                "qa_weight": RECIPE_QA_WEIGHT,
                "qa_categories": dict(QA_CATEGORY_BLENDS["stem_chat"]),
            },
        },
        "epoch_caps": {name: RECIPE_EPOCH_CAP for name in qa_sources_b},
        "quality": {"order": 5, "quartile": 0.25},
        "mining": {"k": 50, "metric": "cosine"},
    }


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path!r} does not contain a mapping")
    return parse_config(raw)


def write_config(config_dict: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_dict, fh, sort_keys=True)


def parse_config(raw: dict) -> RunConfig:
    for key in ("total_tokens", "schedule", "sources", "blends"):
        if key not in raw:
            raise ConfigError(f"missing config key {key!r}")
    seed = _num(raw.get("seed", 0), int, "seed")
    total_tokens = _num(raw["total_tokens"], int, "total_tokens")
    switch_fraction = _num(raw.get("switch_fraction", RECIPE_SWITCH_FRACTION), float, "switch_fraction")

    sched_raw = raw["schedule"]
    kind = sched_raw.get("kind", "cosine")
    eta_start = _num(sched_raw.get("eta_start"), float, "schedule.eta_start")
    eta_end = _num(sched_raw.get("eta_end", 0.0), float, "schedule.eta_end")
    warmup = None
    if sched_raw.get("warmup"):
        w = sched_raw["warmup"]
        warmup = WarmupSpec(
            start_lr=_num(w.get("start_lr", 0.0), float, "warmup.start_lr"),
            target_lr=_num(w.get("target_lr"), float, "warmup.target_lr"),
            tokens=_num(w.get("tokens"), int, "warmup.tokens"),
        )
    if kind == "cosine":
        schedule = build_cosine(eta_start, eta_end, total_tokens, warmup)
    elif kind == "wsd":
        schedule = build_wsd(
            eta_start,
            eta_end,
            total_tokens,
            stable_fraction=_num(sched_raw.get("wsd_stable_fraction", 0.8), float, "wsd_stable_fraction"),
            decay_shape=sched_raw.get("wsd_decay_shape", "linear"),
        )
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")

    sources = []
    for item in raw["sources"]:
        sources.append(
            DataSource(
                name=str(item["name"]),
                domain=str(item["domain"]),
                token_count=_num(item.get("token_count", 0), int, "source.token_count"),
                qa_category=item.get("qa_category"),
                inventory=item.get("inventory"),
            )
        )

    blends = raw["blends"]
    if "gb" not in blends or "qb" not in blends:
        raise ConfigError("blends must define both 'gb' and 'qb'")
    epoch_caps = {
        str(name): _num(cap, float, f"epoch_caps.{name}")
        for name, cap in (raw.get("epoch_caps") or {}).items()
    }
    redistribute = raw.get("epoch_cap_redistribute_to")
    if redistribute is not None:
        redistribute = [str(n) for n in redistribute]

    config = RunConfig(
        seed=seed,
        total_tokens=total_tokens,
        switch_fraction=switch_fraction,
        schedule=schedule,
        sources=sources,
        gb_spec=dict(blends["gb"]),
        qb_spec=dict(blends["qb"]),
        epoch_caps=epoch_caps,
        epoch_cap_redistribute_to=redistribute,
        inventory_dir=raw.get("inventory_dir"),
        lr_curve_points=_num(raw.get("lr_curve_points", 256), int, "lr_curve_points"),
        quality=dict(raw.get("quality") or {}),
        mining=dict(raw.get("mining") or {}),
    )
    config.normalized = _normalize_dict(raw)
    return config


def _normalize_dict(value):
    if isinstance(value, dict):
        return {str(k): _normalize_dict(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple)):
        return [_normalize_dict(v) for v in value]
    if isinstance(value, str):
        try:
            return float(value) if any(c in value for c in ".eE") else int(value)
        except ValueError:
            return value
    return value


# ---------------------------------------------------------------------------
# Resolution: config -> blends -> plan
# ---------------------------------------------------------------------------


@dataclass
class ResolvedPlan:
    config: RunConfig
    registry: SourceRegistry
    plan: BlendPlan
    notes: list[str]


def resolve_plan(config: RunConfig, quality_selected: frozenset[str] | None = None) -> ResolvedPlan:
    """Build both phases, apply transforms and epoch caps, resolve the switch.

    ``quality_selected`` supplies the high-quality web document set for
    transforms whose manifest is not given inline; if neither is available
    the weight part of the transform still applies and a note records that
    the document filter is pending.
    """
    registry = config.registry()
    notes: list[str] = []

    gb = _build_phase(config.gb_spec, "GB", registry, notes, quality_selected)
    qb = _build_phase(config.qb_spec, "QB", registry, notes, quality_selected)

    if config.qb_spec.get("qa_weight"):
        qa_weight = _num(config.qb_spec["qa_weight"], float, "qa_weight")
        categories = config.qb_spec.get("qa_categories")
        if isinstance(categories, str):
            if categories not in QA_CATEGORY_BLENDS:
                raise ConfigError(f"unknown qa category blend {categories!r}")
            categories = QA_CATEGORY_BLENDS[categories]
        qb = add_qa(qb, registry.qa_sources(), qa_weight, categories)

    solution = solve_switch_token(config.schedule, config.switch_fraction)
    gb_budget = solution.token_index
    qb_budget = config.total_tokens - solution.token_index
    if config.epoch_caps:
        receivers = config.epoch_cap_redistribute_to
        capped_gb = apply_epoch_caps(gb, config.epoch_caps, gb_budget, registry, receivers)
        capped_qb = apply_epoch_caps(qb, config.epoch_caps, qb_budget, registry, receivers)
        for phase_name, before, after in (("GB", gb, capped_gb), ("QB", qb, capped_qb)):
            for source in sorted(config.epoch_caps):
                if source in before.weights and after.weights[source] < before.weights[source]:
                    notes.append(
                        f"{phase_name}: capped {source} at {config.epoch_caps[source]:g} epochs "
                        f"(weight {before.weights[source]:.5f} -> {after.weights[source]:.5f})"
                    )
        gb, qb = capped_gb, capped_qb
    plan = build_two_phase_plan(gb, qb, config.schedule, config.switch_fraction, config.total_tokens)
    return ResolvedPlan(config=config, registry=registry, plan=plan, notes=notes)


def _build_phase(
    spec: dict,
    default_label: str,
    registry: SourceRegistry,
    notes: list[str],
    quality_selected: frozenset[str] | None,
) -> BlendPhase:
    weights = {str(k): _num(v, float, f"weight.{k}") for k, v in (spec.get("weights") or {}).items()}
    for name in weights:
        registry.require(name)
    label = spec.get("label", default_label)
    raw_sum = sum(weights.values())
    phase = normalize(weights, label=label)
    if abs(raw_sum - 1.0) > blend_mod.WEIGHT_SUM_TOL:
        notes.append(f"{label}: raw weights summed to {raw_sum:.6g}; normalization applied")
    for step in spec.get("transforms") or []:
        op = step.get("op")
        selected = None
        if step.get("manifest"):
            selected = _load_selected(step["manifest"])
        elif quality_selected is not None:
            selected = quality_selected
        if op in ("high_quality_web", "upweight_non_web_with_hq_web") and selected is None:
            if op == "upweight_non_web_with_hq_web":
                phase = apply_transform(
                    phase, Transform(op="reweight_domains", factors=_factors(step)), registry
                )
            notes.append(f"{label}: high-quality web filter pending (no quality manifest)")
            continue
        phase = apply_transform(
            phase, Transform(op=op, factors=_factors(step), selected_docs=selected), registry
        )
    return phase


def _factors(step: dict) -> dict[str, float] | None:
    factors = step.get("factors")
    if factors is None:
        return None
    return {str(k): _num(v, float, f"factor.{k}") for k, v in factors.items()}


def _load_selected(path: str) -> frozenset[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"quality manifest {path!r} not found") from None
    if isinstance(data, dict) and "selected" in data:
        return frozenset(str(i) for i in data["selected"])
    raise ConfigError(f"quality manifest {path!r} has no 'selected' list")


# ---------------------------------------------------------------------------
# Plan report
# ---------------------------------------------------------------------------


@dataclass
class PlanReport:
    config_digest: str
    plan_digest: str
    switch_token: int
    switch_fraction: float
    target_lr: float
    achieved_lr: float
    gb_tokens: int
    qb_tokens: int
    gb_epochs: blend_mod.EpochReport
    qb_epochs: blend_mod.EpochReport
    lr_curve: list[tuple[int, float]]
    notes: list[str]

    def to_json(self) -> str:
        payload = {
            "config_digest": self.config_digest,
            "plan_digest": self.plan_digest,
            "switch_token": self.switch_token,
            "switch_fraction": self.switch_fraction,
            "target_lr": self.target_lr,
            "achieved_lr": self.achieved_lr,
            "gb_tokens": self.gb_tokens,
            "qb_tokens": self.qb_tokens,
            "epochs": [
                {
                    "phase": report.phase_label,
                    "source": row.source,
                    "weight": row.weight,
                    "tokens": row.tokens_assigned,
                    "epochs": row.epochs,
                }
                for report in (self.gb_epochs, self.qb_epochs)
                for row in report.rows
            ],
            "notes": self.notes,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def build_plan_report(resolved: ResolvedPlan) -> PlanReport:
    config, plan = resolved.config, resolved.plan
    solution = solve_switch_token(config.schedule, config.switch_fraction)
    stride = max(1, config.total_tokens // max(1, config.lr_curve_points))
    gb_report = epochs(plan.gb, resolved.registry, plan.gb_tokens)
    qb_report = epochs(plan.qb, resolved.registry, plan.qb_tokens)
    return PlanReport(
        config_digest=config.digest(),
        plan_digest=plan.digest(),
        switch_token=plan.switch_token,
        switch_fraction=plan.switch_fraction,
        target_lr=solution.target_lr,
        achieved_lr=solution.achieved_lr,
        gb_tokens=plan.gb_tokens,
        qb_tokens=plan.qb_tokens,
        gb_epochs=gb_report,
        qb_epochs=qb_report,
        lr_curve=sample_curve(config.schedule, stride),
        notes=list(resolved.notes),
    )


def format_plan_table(report: PlanReport) -> str:
    lines = [
        f"config digest   {report.config_digest[:16]}",
        f"plan digest     {report.plan_digest[:16]}",
        f"switch fraction {report.switch_fraction:g} (target LR {report.target_lr:.4g}, "
        f"achieved {report.achieved_lr:.4g})",
        f"switch token    {report.switch_token:,}",
        f"GB tokens       {report.gb_tokens:,}",
        f"QB tokens       {report.qb_tokens:,}",
        "",
        f"{'phase':<6} {'source':<24} {'weight':>9} {'tokens':>16} {'epochs':>9}",
    ]
    for rep in (report.gb_epochs, report.qb_epochs):
        for row in rep.rows:
            lines.append(
                f"{rep.phase_label:<6} {row.source:<24} {row.weight:>9.5f} "
                f"{row.tokens_assigned:>16,} {row.epochs:>9.3f}"
            )
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


def validate_config(config: RunConfig) -> list[str]:
    """Run all structural checks; returns resolution notes on success."""
    resolved = resolve_plan(config)
    # exercising lr_at at the endpoints catches degenerate schedules early
    lr_at(config.schedule, 0)
    lr_at(config.schedule, config.total_tokens)
    if config.inventory_dir is not None and not os.path.isdir(config.inventory_dir):
        resolved.notes.append(f"inventory_dir {config.inventory_dir!r} does not exist yet")
    return resolved.notes
