"""Data-distribution algebra for two-phase continued pretraining.

A blend phase is a normalized weight map over named sources.  Phases are
immutable; every transform returns a new phase.  The two-phase plan pairs a
general blend (GB) with a QA blend (QB) and resolves the GB->QB switch point
against a learning-rate schedule: the switch happens where the LR crosses a
configured fraction of its maximum.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import (
    DegeneratePhaseError,
    EmptyBlendError,
    InvalidParameterError,
    ManifestEmptyError,
    NoOtherSourcesError,
    SourceOverlapError,
    UnknownSourceError,
    ZeroSizeSourceError,
)
from .schedule import LrSchedule, solve_switch_token

DOMAINS = (
    "english_web",
    "english_highquality_category",
    "multilingual",
    "code",
    "qa_category",
)
QA_CATEGORIES = ("world_knowledge", "reasoning", "stem", "chat", "code")

WEIGHT_SUM_TOL = 1e-9

TRANSFORM_OPS = (
    "reweight_domains",
    "high_quality_web",
    "no_web",
    "upweight_non_web_with_hq_web",
)


@dataclass(frozen=True)
class DataSource:
    name: str
    domain: str
    token_count: int
    qa_category: str | None = None
    inventory: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise InvalidParameterError(f"unknown domain {self.domain!r}")
        if self.token_count < 0:
            raise InvalidParameterError("token_count must be >= 0")
        if self.domain == "qa_category":
            if self.qa_category not in QA_CATEGORIES:
                raise InvalidParameterError(
                    f"qa source {self.name!r} needs a qa_category from {QA_CATEGORIES}"
                )
        elif self.qa_category is not None:
            raise InvalidParameterError(
                f"source {self.name!r} is not qa_category but sets qa_category"
            )


class SourceRegistry:
    """Named, unique data sources."""

    def __init__(self, sources: Iterable[DataSource]):
        self._by_name: dict[str, DataSource] = {}
        for src in sources:
            if src.name in self._by_name:
                raise InvalidParameterError(f"duplicate source name {src.name!r}")
            self._by_name[src.name] = src

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __iter__(self):
        return iter(self._by_name.values())

    def __len__(self) -> int:
        return len(self._by_name)

    def names(self) -> list[str]:
        return sorted(self._by_name)

    def require(self, name: str) -> DataSource:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownSourceError(f"unknown source {name!r}") from None

    def qa_sources(self) -> list[DataSource]:
        return [s for s in self._by_name.values() if s.domain == "qa_category"]

    def web_names(self) -> list[str]:
        return sorted(s.name for s in self._by_name.values() if s.domain == "english_web")


@dataclass(frozen=True)
class BlendPhase:
    """Normalized source weights, plus optional per-source document filters.

    ``doc_filters`` restricts a source to a subset of its documents (the
    high-quality-web transform) without touching its weight.
    """

    weights: dict[str, float]
    label: str = "custom"
    doc_filters: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.weights:
            raise EmptyBlendError("phase has no weighted sources")
        total = 0.0
        for name, w in self.weights.items():
            if w < 0:
                raise InvalidParameterError(f"negative weight for {name!r}")
            total += w
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidParameterError(f"weights sum to {total!r}, expected 1")

    def weight(self, name: str) -> float:
        return self.weights.get(name, 0.0)

    def sources(self) -> list[str]:
        return sorted(self.weights)


def normalize(
    raw_weights: Mapping[str, float],
    label: str = "custom",
    doc_filters: Mapping[str, frozenset[str]] | None = None,
) -> BlendPhase:
    """Scale non-negative raw weights so they sum to 1, dropping zeros."""
    for name, w in raw_weights.items():
        if w < 0:
            raise InvalidParameterError(f"negative weight for {name!r}")
    total = sum(raw_weights.values())
    if total <= 0:
        raise EmptyBlendError("all weights are zero")
    weights = {name: w / total for name, w in raw_weights.items() if w > 0}
    return BlendPhase(weights=weights, label=label, doc_filters=dict(doc_filters or {}))


def add_qa(
    phase: BlendPhase,
    qa_sources: list[DataSource],
    qa_weight: float,
    category_weights: Mapping[str, float] | None = None,
) -> BlendPhase:
    """Inject QA sources at a total weight of ``qa_weight``.

    Existing weights are scaled by ``1 - qa_weight`` (so their ratios are
    preserved) and the QA mass is split across the QA sources, by default in
    proportion to their corpus sizes.  ``category_weights`` overrides the
    split with raw per-category shares; each category's share is divided
    among its sources by size.
    """
    if not 0 < qa_weight < 1:
        raise InvalidParameterError("qa_weight must lie strictly inside (0, 1)")
    if not qa_sources:
        raise InvalidParameterError("no QA sources supplied")
    for src in qa_sources:
        if src.name in phase.weights:
            raise SourceOverlapError(f"QA source {src.name!r} already in phase")

    if category_weights is None:
        size_total = sum(s.token_count for s in qa_sources)
        if size_total <= 0:
            raise ZeroSizeSourceError("QA sources have no tokens to size the sub-blend")
        shares = {s.name: s.token_count / size_total for s in qa_sources}
    else:
        by_cat: dict[str, list[DataSource]] = {}
        for src in qa_sources:
            by_cat.setdefault(src.qa_category or "", []).append(src)
        missing = [c for c in category_weights if c not in by_cat]
        if missing:
            raise UnknownSourceError(f"no QA sources for categories {missing}")
        uncovered = [c for c in by_cat if c not in category_weights]
        if uncovered:
            raise InvalidParameterError(f"category_weights missing entries for {uncovered}")
        cat_total = sum(category_weights.values())
        if cat_total <= 0:
            raise InvalidParameterError("category weights sum to zero")
        shares = {}
        for cat, members in by_cat.items():
            cat_share = category_weights[cat] / cat_total
            size_total = sum(s.token_count for s in members)
            if size_total <= 0:
                raise ZeroSizeSourceError(f"QA category {cat!r} has no tokens")
            for src in members:
                shares[src.name] = cat_share * src.token_count / size_total

    weights = {name: w * (1.0 - qa_weight) for name, w in phase.weights.items()}
    for name, share in shares.items():
        if share > 0:
            weights[name] = qa_weight * share
    return BlendPhase(weights=weights, label=phase.label, doc_filters=dict(phase.doc_filters))


@dataclass(frozen=True)
class Transform:
    """One step of a blend pipeline; payload fields depend on ``op``."""

    op: str
    factors: dict[str, float] | None = None
    selected_docs: frozenset[str] | None = None

    def __post_init__(self):
        if self.op not in TRANSFORM_OPS:
            raise InvalidParameterError(f"unknown transform {self.op!r}")


def apply_transform(phase: BlendPhase, transform: Transform, registry: SourceRegistry) -> BlendPhase:
    for name in phase.weights:
        registry.require(name)
    if transform.op == "no_web":
        return _drop_web(phase, registry)
    if transform.op == "reweight_domains":
        return _reweight(phase, transform.factors or {})
    if transform.op == "high_quality_web":
        return _filter_web_docs(phase, registry, transform.selected_docs)
    # upweight_non_web_with_hq_web: reweight then restrict web to the manifest
    reweighted = _reweight(phase, transform.factors or {})
    return _filter_web_docs(reweighted, registry, transform.selected_docs)


def _drop_web(phase: BlendPhase, registry: SourceRegistry) -> BlendPhase:
    web = {n for n in phase.weights if registry.require(n).domain == "english_web"}
    kept = {n: w for n, w in phase.weights.items() if n not in web}
    if not kept:
        raise EmptyBlendError("removing web sources leaves an empty blend")
    filters = {n: f for n, f in phase.doc_filters.items() if n not in web}
    return normalize(kept, label=phase.label, doc_filters=filters)


def _reweight(phase: BlendPhase, factors: Mapping[str, float]) -> BlendPhase:
    unknown = [n for n in factors if n not in phase.weights]
    if unknown:
        raise UnknownSourceError(f"reweight names absent from phase: {unknown}")
    for name, f in factors.items():
        if f < 0:
            raise InvalidParameterError(f"negative reweight factor for {name!r}")
    raw = {n: w * factors.get(n, 1.0) for n, w in phase.weights.items()}
    return normalize(raw, label=phase.label, doc_filters=phase.doc_filters)


def _filter_web_docs(
    phase: BlendPhase, registry: SourceRegistry, selected: frozenset[str] | None
) -> BlendPhase:
    if not selected:
        raise ManifestEmptyError("high-quality web transform needs a non-empty manifest")
    filters = dict(phase.doc_filters)
    touched = False
    for name in phase.weights:
        if registry.require(name).domain == "english_web":
            filters[name] = frozenset(selected)
            touched = True
    if not touched:
        raise UnknownSourceError("phase has no web source to filter")
    return BlendPhase(weights=dict(phase.weights), label=phase.label, doc_filters=filters)


@dataclass(frozen=True)
class EpochRow:
    source: str
    weight: float
    tokens_assigned: int
    epochs: float


@dataclass(frozen=True)
class EpochReport:
    phase_label: str
    phase_tokens: int
    rows: tuple[EpochRow, ...]

    def epochs_for(self, source: str) -> float:
        for row in self.rows:
            if row.source == source:
                return row.epochs
        return 0.0


def epochs(phase: BlendPhase, registry: SourceRegistry, phase_tokens: int | float) -> EpochReport:
    """Per-source pass counts implied by the phase weights over a token budget."""
    if phase_tokens < 0:
        raise InvalidParameterError("phase_tokens must be >= 0")
    rows = []
    for name in sorted(phase.weights, key=lambda n: (-phase.weights[n], n)):
        w = phase.weights[name]
        src = registry.require(name)
        if src.token_count <= 0:
            raise ZeroSizeSourceError(f"source {name!r} has zero tokens but weight {w:.4g}")
        assigned = w * phase_tokens
        rows.append(
            EpochRow(
                source=name,
                weight=w,
                tokens_assigned=int(round(assigned)),
                epochs=assigned / src.token_count,
            )
        )
    return EpochReport(phase_label=phase.label, phase_tokens=int(phase_tokens), rows=tuple(rows))


def cap_epochs(
    phase: BlendPhase,
    source: str,
    max_epochs: float,
    phase_tokens: int | float,
    registry: SourceRegistry,
    redistribute_to: Iterable[str] | None = None,
) -> BlendPhase:
    """Cap one source's epochs; its surplus weight is spread over the rest.

    Redistribution is proportional to the surviving weights, or restricted to
    ``redistribute_to`` (e.g. web only) when given.  A source at or under the
    cap leaves the phase untouched, which makes the operation idempotent.
    """
    if max_epochs <= 0:
        raise InvalidParameterError("max_epochs must be positive")
    if phase_tokens <= 0:
        raise InvalidParameterError("phase_tokens must be positive")
    if source not in phase.weights:
        raise UnknownSourceError(f"source {source!r} not in phase")
    tc = registry.require(source).token_count
    if tc <= 0:
        raise ZeroSizeSourceError(f"source {source!r} has zero tokens")
    current = phase.weights[source]
    capped = max_epochs * tc / phase_tokens
    if current <= capped:
        return phase
    if redistribute_to is None:
        receivers = set(phase.weights) - {source}
    else:
        receivers = set(redistribute_to) & set(phase.weights) - {source}
    if not receivers:
        raise NoOtherSourcesError(
            f"cannot redistribute weight from {source!r}: no receiving sources"
        )
    pool = sum(phase.weights[n] for n in receivers)
    surplus = current - capped
    weights = {}
    for name, w in phase.weights.items():
        if name == source:
            weights[name] = capped
        elif name in receivers:
            weights[name] = w + surplus * w / pool
        else:
            weights[name] = w
    return BlendPhase(weights=weights, label=phase.label, doc_filters=dict(phase.doc_filters))


def apply_epoch_caps(
    phase: BlendPhase,
    caps: Mapping[str, float],
    phase_tokens: int | float,
    registry: SourceRegistry,
    redistribute_to: Iterable[str] | None = None,
    max_rounds: int = 100,
) -> BlendPhase:
    """Apply several per-source epoch caps together.

    Capping one source redistributes weight onto every other source,
    including ones already at their own ceiling, so the caps are re-applied
    to the worst offender until no capped source sits above its limit.
    """
    if phase_tokens <= 0:
        return phase
    for _ in range(max_rounds):
        offender = None
        worst = 1.0 + 1e-9
        for name in sorted(caps):
            if name not in phase.weights:
                continue
            tc = registry.require(name).token_count
            if tc <= 0:
                raise ZeroSizeSourceError(f"source {name!r} has zero tokens")
            ratio = phase.weights[name] * phase_tokens / tc / caps[name]
            if ratio > worst:
                offender, worst = name, ratio
        if offender is None:
            return phase
        phase = cap_epochs(
            phase, offender, caps[offender], phase_tokens, registry, redistribute_to
        )
    raise InvalidParameterError("epoch caps did not converge; check cap feasibility")


@dataclass(frozen=True)
class BlendPlan:
    gb: BlendPhase
    qb: BlendPhase
    schedule: LrSchedule
    switch_fraction: float
    switch_token: int
    total_tokens: int

    @property
    def gb_tokens(self) -> int:
        return self.switch_token

    @property
    def qb_tokens(self) -> int:
        return self.total_tokens - self.switch_token

    def digest(self) -> str:
        payload = {
            "schedule": {
                "kind": self.schedule.kind,
                "eta_start": self.schedule.eta_start,
                "eta_end": self.schedule.eta_end,
                "total_tokens": self.schedule.total_tokens,
                "warmup": (
                    [
                        self.schedule.warmup.start_lr,
                        self.schedule.warmup.target_lr,
                        self.schedule.warmup.tokens,
                    ]
                    if self.schedule.warmup
                    else None
                ),
                "wsd_stable_fraction": self.schedule.wsd_stable_fraction,
                "wsd_decay_shape": self.schedule.wsd_decay_shape,
            },
            "gb": _phase_payload(self.gb),
            "qb": _phase_payload(self.qb),
            "switch_fraction": self.switch_fraction,
            "switch_token": self.switch_token,
            "total_tokens": self.total_tokens,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _phase_payload(phase: BlendPhase) -> dict:
    return {
        "label": phase.label,
        "weights": {n: phase.weights[n] for n in sorted(phase.weights)},
        "doc_filters": {
            n: hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()
            for n, ids in sorted(phase.doc_filters.items())
        },
    }


def build_two_phase_plan(
    gb: BlendPhase,
    qb: BlendPhase,
    schedule: LrSchedule,
    switch_fraction: float,
    total_tokens: int | float,
) -> BlendPlan:
    """Resolve the GB->QB switch token and assemble the plan.

    A switch at token 0 is allowed (the run is QB throughout, the
    "from step 0" configuration); a switch landing on the horizon would leave
    the QB phase empty and is rejected.
    """
    total = int(total_tokens)
    if total != schedule.total_tokens:
        raise InvalidParameterError(
            f"plan horizon {total} != schedule horizon {schedule.total_tokens}"
        )
    solution = solve_switch_token(schedule, switch_fraction)
    if solution.token_index >= total:
        raise DegeneratePhaseError(
            f"switch at token {solution.token_index} leaves no tokens for the QA blend"
        )
    return BlendPlan(
        gb=gb,
        qb=qb,
        schedule=schedule,
        switch_fraction=switch_fraction,
        switch_token=solution.token_index,
        total_tokens=total,
    )
