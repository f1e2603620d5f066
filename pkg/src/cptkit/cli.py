"""Command-line interface: plan, sample, score, mine, validate.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 unreachable switch
target.  Failures print a single machine-parsable line to stderr::

    cptkit-error code=<code> message="..."

Every output embeds the config digest, and validation always runs before any
file is written.  Output files are written atomically (write then rename).
The ``CPTKIT_OUT`` environment variable overrides the output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import yaml

from .config import (
    RunConfig,
    build_plan_report,
    format_plan_table,
    load_config,
    parse_config,
    recipe_config,
    resolve_plan,
    validate_config,
)
from .errors import (
    ConfigError,
    DigestMismatchError,
    EmptyCorpusError,
    ToolkitError,
)
from .mining import emit_mined_blend, load_embedding_set, mine
from .quality import (
    corpus_perplexity,
    load_model,
    perplexity,
    quartile_filter,
    quartile_filter_by_group,
    save_model,
    train_ngram,
)
from .sampler import DocumentRegistry, generate_manifest, verify_proportions, write_manifest

IO_EXIT = 3


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as err:
        _fail(err.code, str(err))
        return err.exit_code
    except OSError as err:
        _fail("io-error", str(err))
        return IO_EXIT


def _fail(code: str, message: str) -> None:
    message = message.replace('"', "'")
    print(f'cptkit-error code={code} message="{message}"', file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cptkit",
        description="Plan and orchestrate two-phase continued-pretraining data runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--preset", choices=["recipe"], help="use a built-in configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--total-tokens", type=float, help="override the token horizon")
        p.add_argument("--switch-fraction", type=float, help="override the LR switch fraction")
        p.add_argument("--out", help="output directory (or file for sample)")

    p = sub.add_parser("validate", help="check a configuration without writing anything")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="resolve the switch point and emit plan reports")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sample", help="generate a deterministic token-assignment manifest")
    common(p)
    p.add_argument("--granularity", type=int, default=1, help="min tokens per scheduling turn")
    p.add_argument("--no-shuffle", action="store_true", help="stream documents in inventory order")
    p.add_argument("--verify-tolerance", type=float, help="check manifest proportions at this tolerance")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("score", help="train/apply the n-gram filter and select documents")
    common(p)
    p.add_argument("--corpus", required=True, help="JSONL documents: {id, text}")
    p.add_argument("--model", help="path of a cached model to reuse (or create)")
    p.add_argument("--quartile", type=float, help="fraction of lowest-perplexity docs to keep")
    p.add_argument("--per-line", action="store_true", help="score each line as its own sentence")
    p.add_argument(
        "--per-group",
        action="store_true",
        help="take the quartile inside each document group rather than globally",
    )
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("mine", help="nearest-neighbor document mining over embeddings")
    common(p)
    p.add_argument("--qa-embeddings", required=True, help="query embedding file (ids in <path>.ids)")
    p.add_argument("--corpus-embeddings", required=True, help="corpus embedding file (ids in <path>.ids)")
    p.add_argument("--k", type=int, help="neighbors per query (default from config)")
    p.set_defaults(func=cmd_mine)

    return parser


def _load_run_config(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")
    if args.config:
        with_overrides = load_config(args.config)
        raw = dict(with_overrides.normalized)
    elif args.preset:
        raw = recipe_config()
    else:
        raise ConfigError("a configuration is required (--config or --preset)")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.total_tokens is not None:
        raw["total_tokens"] = int(args.total_tokens)
        raw.setdefault("schedule", {})
    if args.switch_fraction is not None:
        raw["switch_fraction"] = args.switch_fraction
    return parse_config(raw)


def _out_dir(args, default: str = ".") -> str:
    env = os.environ.get("CPTKIT_OUT")
    if env:
        return env
    return args.out or default


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    config = _load_run_config(args)
    notes = validate_config(config)
    print(f"ok config_digest={config.digest()}")
    for note in notes:
        print(f"note: {note}")
    return 0


def cmd_plan(args) -> int:
    config = _load_run_config(args)
    resolved = resolve_plan(config)
    report = build_plan_report(resolved)
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    _write_text(os.path.join(out_dir, "plan.json"), report.to_json() + "\n")
    curve_lines = [
        json.dumps({"token": token, "lr": lr}, sort_keys=True)
        for token, lr in report.lr_curve
    ]
    _write_text(os.path.join(out_dir, "lr_curve.jsonl"), "\n".join(curve_lines) + "\n")
    epoch_lines = [
        json.dumps(
            {
                "phase": rep.phase_label,
                "source": row.source,
                "weight": row.weight,
                "tokens": row.tokens_assigned,
                "epochs": row.epochs,
            },
            sort_keys=True,
        )
        for rep in (report.gb_epochs, report.qb_epochs)
        for row in rep.rows
    ]
    _write_text(os.path.join(out_dir, "epochs.jsonl"), "\n".join(epoch_lines) + "\n")
    print(format_plan_table(report))
    return 0


def cmd_sample(args) -> int:
    config = _load_run_config(args)
    resolved = resolve_plan(config)
    if config.inventory_dir is None:
        raise ConfigError("sampling requires inventory_dir in the configuration")
    registry = DocumentRegistry.load(config.inventory_dir)
    manifest = generate_manifest(
        resolved.plan,
        registry,
        seed=config.seed,
        granularity=args.granularity,
        shuffle=not args.no_shuffle,
    )
    out = _out_dir(args)
    if os.path.isdir(out) or not os.path.splitext(out)[1]:
        os.makedirs(out, exist_ok=True)
        out_path = os.path.join(out, "manifest.tsv")
    else:
        out_path = out
        parent = os.path.dirname(out_path)
        if parent:
            os.makedirs(parent, exist_ok=True)
    write_manifest(manifest, out_path)
    print(
        f"manifest {out_path} records={len(manifest.records)} "
        f"total_tokens={manifest.total_tokens} config_digest={config.digest()}"
    )
    if args.verify_tolerance is not None:
        report = verify_proportions(manifest, resolved.plan, args.verify_tolerance)
        for entry in report.entries:
            status = "ok" if entry.ok else "FAIL"
            print(
                f"{status} phase={entry.phase} source={entry.source} "
                f"weight={entry.weight:.5f} deviation={entry.deviation:.6f} "
                f"limit={entry.limit:.6f}"
            )
        if not report.passed:
            _fail("proportions", "manifest proportions outside tolerance")
            return 2
    return 0


def _read_corpus_jsonl(path: str) -> list[tuple[str, str, str]]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            docs.append((str(obj["id"]), str(obj["text"]), str(obj.get("group", ""))))
    if not docs:
        raise EmptyCorpusError(f"no documents in {path!r}")
    return docs


def cmd_score(args) -> int:
    config = _load_run_config(args)
    resolve_plan(config)  # full config validation before anything is written
    qcfg = config.quality
    order = int(qcfg.get("order", 5))
    quartile = args.quartile if args.quartile is not None else float(qcfg.get("quartile", 0.25))
    out_dir = _out_dir(args)

    model = None
    if args.model and os.path.exists(args.model):
        model = load_model(args.model)
        if qcfg.get("model_digest") and model.digest() != qcfg["model_digest"]:
            raise DigestMismatchError(
                f"cached model digest {model.digest()[:12]} does not match the "
                f"configured digest {str(qcfg['model_digest'])[:12]}"
            )
    if model is None:
        ref_path = qcfg.get("reference_corpus")
        if not ref_path:
            raise ConfigError("quality.reference_corpus is required to train a model")
        with open(ref_path, encoding="utf-8") as fh:
            reference = [line.split() for line in fh if line.strip()]
        model = train_ngram(reference, order=order)

    docs = _read_corpus_jsonl(args.corpus)
    per_line = args.per_line or bool(qcfg.get("per_line"))
    scores = []
    for doc_id, text, group in docs:
        if per_line:
            ppl = corpus_perplexity(model, [ln.split() for ln in text.splitlines() if ln.split()])
        else:
            ppl = perplexity(model, text.split())
        scores.append((doc_id, ppl, group))

    if args.per_group or bool(qcfg.get("per_group")):
        manifest = quartile_filter_by_group(scores, quartile=quartile, model_digest=model.digest())
    else:
        manifest = quartile_filter(
            [(i, p) for i, p, _ in scores], quartile=quartile, model_digest=model.digest()
        )

    os.makedirs(out_dir, exist_ok=True)
    if args.model and not os.path.exists(args.model):
        save_model(model, args.model)
    score_lines = [
        json.dumps({"id": doc_id, "perplexity": ppl}, sort_keys=True)
        for doc_id, ppl in manifest.scores
    ]
    _write_text(os.path.join(out_dir, "scores.jsonl"), "\n".join(score_lines) + "\n")
    manifest_json = json.dumps(
        {
            "config_digest": config.digest(),
            "model_digest": manifest.model_digest,
            "quartile": manifest.quartile,
            "threshold": manifest.threshold,
            "selected": list(manifest.selected),
        },
        indent=2,
        sort_keys=True,
    )
    _write_text(os.path.join(out_dir, "quality_manifest.json"), manifest_json + "\n")
    print(
        f"scored {len(manifest.scores)} docs, selected {len(manifest.selected)} "
        f"(quartile {manifest.quartile:g}, model {manifest.model_digest[:12]})"
    )
    return 0


def cmd_mine(args) -> int:
    config = _load_run_config(args)
    resolved = resolve_plan(config)  # validate before any write
    k = args.k if args.k is not None else int(config.mining.get("k", 50))
    metric = str(config.mining.get("metric", "cosine"))
    qa = load_embedding_set(args.qa_embeddings, args.qa_embeddings + ".ids")
    corpus = load_embedding_set(args.corpus_embeddings, args.corpus_embeddings + ".ids")
    registry = None
    if config.inventory_dir:
        registry = DocumentRegistry.load(config.inventory_dir)
    result = mine(qa, corpus, k=k, registry=registry, metric=metric)

    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for query_id in sorted(result.neighbors):
        for rank, (neighbor_id, score) in enumerate(result.neighbors[query_id]):
            lines.append(
                json.dumps(
                    {"query_id": query_id, "rank": rank, "neighbor_id": neighbor_id, "score": score},
                    sort_keys=True,
                )
            )
    _write_text(os.path.join(out_dir, "neighbors.jsonl"), "\n".join(lines) + "\n")

    if registry is not None:
        inv_lines = []
        for doc_id in result.mined_ids:
            _, entry = registry.lookup(doc_id)
            inv_lines.append(f"{entry.doc_id}\t{entry.token_count}\t{entry.locator}")
        _write_text(
            os.path.join(out_dir, "mined_docs.inventory.tsv"), "\n".join(inv_lines) + "\n"
        )
        mined_qb = emit_mined_blend(result, resolved.plan.qb, resolved.registry)
        blend_yaml = {
            "label": mined_qb.label,
            "weights": {k_: float(v) for k_, v in sorted(mined_qb.weights.items())},
        }
        _write_text(os.path.join(out_dir, "mined_qb.yaml"), yaml.safe_dump(blend_yaml, sort_keys=True))
    summary = json.dumps(
        {
            "config_digest": config.digest(),
            "k": result.k,
            "metric": result.metric,
            "queries": len(result.neighbors),
            "mined_docs": len(result.mined_ids),
            "mined_tokens": result.mined_tokens,
        },
        indent=2,
        sort_keys=True,
    )
    _write_text(os.path.join(out_dir, "mining_summary.json"), summary + "\n")
    print(
        f"mined {len(result.mined_ids)} docs ({result.mined_tokens} tokens) "
        f"from {len(result.neighbors)} queries at k={result.k}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
