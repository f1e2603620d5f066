"""Deterministic token-assignment manifests realizing a two-phase blend plan.

Source interleaving uses deficit round-robin: before each turn the scheduler
picks the source maximizing ``w_i * emitted_total - emitted_i`` (ties broken
by source name), then emits that source's next document.  The rule is exact
and reproducible, so per-source token proportions can be verified against the
plan weights instead of trusted.  Per-phase accounting starts fresh at the
GB->QB switch; documents are never split across the switch (the new
distribution applies from the next document start), and only the final
document of the run is clipped so the manifest covers exactly the planned
token budget.

Within a source, each epoch visits every document exactly once.  The per-epoch
order is a PCG64 permutation seeded from (run seed, source, filter, epoch);
the algorithm identifier recorded in the manifest header ("drr1-pcg64", or
"drr1-sequential" when shuffling is disabled) pins this choice, so manifests
are portable only between implementations that match both seed and algorithm.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .blend import BlendPhase, BlendPlan
from .errors import (
    DigestMismatchError,
    InvalidParameterError,
    MissingDocumentError,
    MissingInventoryError,
)

ALGORITHM_SHUFFLED = "drr1-pcg64"
ALGORITHM_SEQUENTIAL = "drr1-sequential"

SYNTHETIC_LOCATOR = "synthetic"
SYNTHETIC_VOCAB = 1 << 16

MANIFEST_MAGIC = "#cptkit-manifest v1"


# ---------------------------------------------------------------------------
# Document inventories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DocumentEntry:
    doc_id: str
    token_count: int
    locator: str = SYNTHETIC_LOCATOR

    def __post_init__(self):
        if self.token_count < 1:
            raise InvalidParameterError(
                f"document {self.doc_id!r} has non-positive token count"
            )


@dataclass(frozen=True)
class Inventory:
    source: str
    docs: tuple[DocumentEntry, ...]

    @property
    def total_tokens(self) -> int:
        return sum(d.token_count for d in self.docs)

    def entry(self, doc_id: str) -> DocumentEntry:
        idx = self._index().get(doc_id)
        if idx is None:
            raise MissingDocumentError(f"document {doc_id!r} not in source {self.source!r}")
        return self.docs[idx]

    def _index(self) -> dict[str, int]:
        cached = getattr(self, "_idx", None)
        if cached is None:
            cached = {d.doc_id: i for i, d in enumerate(self.docs)}
            object.__setattr__(self, "_idx", cached)
        return cached


class DocumentRegistry:
    """Per-source document inventories plus a global id lookup."""

    def __init__(self, inventories: Iterable[Inventory], base_dir: str | None = None):
        self._by_source: dict[str, Inventory] = {}
        self.base_dir = base_dir
        for inv in inventories:
            if inv.source in self._by_source:
                raise InvalidParameterError(f"duplicate inventory for {inv.source!r}")
            self._by_source[inv.source] = inv
        self._global: dict[str, tuple[str, DocumentEntry]] = {}
        for inv in self._by_source.values():
            for entry in inv.docs:
                if entry.doc_id in self._global:
                    other = self._global[entry.doc_id][0]
                    raise InvalidParameterError(
                        f"document id {entry.doc_id!r} appears in both "
                        f"{other!r} and {inv.source!r}"
                    )
                self._global[entry.doc_id] = (inv.source, entry)

    def sources(self) -> list[str]:
        return sorted(self._by_source)

    def inventory(self, source: str) -> Inventory:
        inv = self._by_source.get(source)
        if inv is None:
            raise MissingInventoryError(f"no inventory for source {source!r}")
        return inv

    def lookup(self, doc_id: str) -> tuple[str, DocumentEntry]:
        hit = self._global.get(doc_id)
        if hit is None:
            raise MissingDocumentError(f"document {doc_id!r} not in registry")
        return hit

    def digest(self) -> str:
        h = hashlib.sha256()
        for source in self.sources():
            for entry in self._by_source[source].docs:
                h.update(
                    f"{source}\t{entry.doc_id}\t{entry.token_count}\t{entry.locator}\n".encode()
                )
        return h.hexdigest()

    # --- on-disk format: one "<source>.inventory.tsv" per source, rows of
    # --- doc_id <TAB> token_count <TAB> locator

    @classmethod
    def load(cls, directory: str) -> "DocumentRegistry":
        inventories = []
        try:
            names = sorted(os.listdir(directory))
        except FileNotFoundError:
            raise MissingInventoryError(f"inventory directory {directory!r} not found") from None
        for fname in names:
            if not fname.endswith(".inventory.tsv"):
                continue
            source = fname[: -len(".inventory.tsv")]
            docs = []
            with open(os.path.join(directory, fname), encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    doc_id, count, locator = line.split("\t")
                    docs.append(DocumentEntry(doc_id, int(count), locator))
            inventories.append(Inventory(source=source, docs=tuple(docs)))
        return cls(inventories, base_dir=directory)

    def write(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        for source in self.sources():
            path = os.path.join(directory, f"{source}.inventory.tsv")
            lines = [
                f"{e.doc_id}\t{e.token_count}\t{e.locator}"
                for e in self._by_source[source].docs
            ]
            _atomic_write_text(path, "\n".join(lines) + "\n")


def synthetic_inventory(
    source: str,
    n_docs: int,
    doc_tokens: int | tuple[int, int],
    seed: int = 0,
) -> Inventory:
    """Inventory of synthetic documents with deterministic token payloads."""
    if n_docs <= 0:
        raise InvalidParameterError("n_docs must be positive")
    if isinstance(doc_tokens, tuple):
        lo, hi = doc_tokens
        rng = np.random.Generator(np.random.PCG64(_derive_seed(f"sizes:{seed}:{source}")))
        sizes = rng.integers(lo, hi + 1, size=n_docs)
    else:
        sizes = np.full(n_docs, int(doc_tokens))
    docs = tuple(
        DocumentEntry(f"{source}-{i:06d}", int(sizes[i]), SYNTHETIC_LOCATOR)
        for i in range(n_docs)
    )
    return Inventory(source=source, docs=docs)


def synthetic_tokens(doc_id: str, token_count: int) -> np.ndarray:
    """Deterministic pseudo-token payload for a synthetic document."""
    base = _derive_seed(f"tokens:{doc_id}")
    idx = np.arange(token_count, dtype=np.uint64)
    return ((np.uint64(base) + idx * np.uint64(0x9E3779B97F4A7C15)) % SYNTHETIC_VOCAB).astype(
        np.uint32
    )


def _derive_seed(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


# ---------------------------------------------------------------------------
# Manifest generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    offset: int
    source: str
    document_id: str
    doc_token_count: int
    epoch_index: int
    phase: str


@dataclass(frozen=True)
class SampleManifest:
    plan_digest: str
    registry_digest: str
    seed: int
    total_tokens: int
    algorithm: str
    records: tuple[ManifestRecord, ...] = field(repr=False)


class _Cursor:
    """Walks one source's (possibly filtered) documents, epoch after epoch."""

    def __init__(self, docs: tuple[DocumentEntry, ...], seed_tag: str, shuffle: bool):
        self.docs = docs
        self.seed_tag = seed_tag
        self.shuffle = shuffle
        self.epoch = 0
        self.pos = 0
        self.order = self._epoch_order(0)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.docs))
        rng = np.random.Generator(np.random.PCG64(_derive_seed(f"{self.seed_tag}:{epoch}")))
        return rng.permutation(len(self.docs))

    def next(self) -> tuple[DocumentEntry, int]:
        if self.pos >= len(self.docs):
            self.epoch += 1
            self.pos = 0
            self.order = self._epoch_order(self.epoch)
        entry = self.docs[int(self.order[self.pos])]
        epoch = self.epoch
        self.pos += 1
        return entry, epoch


def generate_manifest(
    plan: BlendPlan,
    registry: DocumentRegistry,
    seed: int,
    granularity: int = 1,
    shuffle: bool = True,
) -> SampleManifest:
    """Assign every token of the plan to a (source, document, epoch) record.

    ``granularity`` is the minimum number of tokens emitted per scheduling
    turn; at 1 (the default) the deficit rule is re-evaluated after every
    document.
    """
    if granularity < 1:
        raise InvalidParameterError("granularity must be >= 1")
    for phase in (plan.gb, plan.qb):
        for name in phase.weights:
            inv = registry.inventory(name)
            if not inv.docs:
                raise MissingInventoryError(f"source {name!r} has an empty inventory")

    cursors: dict[tuple[str, str], _Cursor] = {}

    def cursor_for(name: str, phase: BlendPhase) -> _Cursor:
        selected = phase.doc_filters.get(name)
        if selected is None:
            key = (name, "")
            docs = registry.inventory(name).docs
        else:
            fdigest = hashlib.sha256("\n".join(sorted(selected)).encode()).hexdigest()
            key = (name, fdigest)
            docs = tuple(d for d in registry.inventory(name).docs if d.doc_id in selected)
            if not docs:
                raise MissingInventoryError(
                    f"document filter leaves source {name!r} empty"
                )
        cur = cursors.get(key)
        if cur is None:
            cur = _Cursor(docs, f"perm:{seed}:{name}:{key[1]}", shuffle)
            cursors[key] = cur
        return cur

    records: list[ManifestRecord] = []
    offset = 0
    boundaries = (("GB", plan.gb, plan.switch_token), ("QB", plan.qb, plan.total_tokens))
    for phase_label, phase, phase_end in boundaries:
        emitted = {name: 0 for name in phase.weights}
        emitted_total = 0
        names = sorted(phase.weights)
        while offset < phase_end:
            best = None
            best_deficit = -np.inf
            for name in names:
                deficit = phase.weights[name] * emitted_total - emitted[name]
                if deficit > best_deficit:
                    best = name
                    best_deficit = deficit
            turn = 0
            while True:
                entry, epoch = cursor_for(best, phase).next()
                span = min(entry.token_count, plan.total_tokens - offset)
                records.append(
                    ManifestRecord(
                        offset=offset,
                        source=best,
                        document_id=entry.doc_id,
                        doc_token_count=span,
                        epoch_index=epoch,
                        phase=phase_label,
                    )
                )
                emitted[best] += span
                emitted_total += span
                offset += span
                turn += span
                if offset >= phase_end or turn >= granularity:
                    break

    return SampleManifest(
        plan_digest=plan.digest(),
        registry_digest=registry.digest(),
        seed=int(seed),
        total_tokens=plan.total_tokens,
        algorithm=ALGORITHM_SHUFFLED if shuffle else ALGORITHM_SEQUENTIAL,
        records=tuple(records),
    )


# ---------------------------------------------------------------------------
# Verification and replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceDeviation:
    phase: str
    source: str
    weight: float
    emitted_tokens: int
    deviation: float
    limit: float
    ok: bool


@dataclass(frozen=True)
class ProportionReport:
    entries: tuple[SourceDeviation, ...]
    passed: bool

    def failures(self) -> list[SourceDeviation]:
        return [e for e in self.entries if not e.ok]


def verify_proportions(
    manifest: SampleManifest, plan: BlendPlan, tolerance: float
) -> ProportionReport:
    """Check per-phase source token shares against the plan weights.

    The allowed deviation is ``tolerance + max_doc_len / phase_tokens``: the
    scheduler cannot honor weights below document granularity.
    """
    entries: list[SourceDeviation] = []
    for phase_label, phase in (("GB", plan.gb), ("QB", plan.qb)):
        recs = [r for r in manifest.records if r.phase == phase_label]
        if not recs:
            continue
        phase_tokens = sum(r.doc_token_count for r in recs)
        max_doc = max(r.doc_token_count for r in recs)
        limit = tolerance + max_doc / phase_tokens
        emitted: dict[str, int] = {}
        for r in recs:
            emitted[r.source] = emitted.get(r.source, 0) + r.doc_token_count
        for name in sorted(set(emitted) | set(phase.weights)):
            w = phase.weights.get(name, 0.0)
            got = emitted.get(name, 0)
            deviation = abs(got / phase_tokens - w)
            entries.append(
                SourceDeviation(
                    phase=phase_label,
                    source=name,
                    weight=w,
                    emitted_tokens=got,
                    deviation=deviation,
                    limit=limit,
                    ok=deviation <= limit,
                )
            )
    return ProportionReport(entries=tuple(entries), passed=all(e.ok for e in entries))


def replay(manifest: SampleManifest, registry: DocumentRegistry) -> Iterator[np.ndarray]:
    """Yield each record's token span, in manifest order.

    Deterministic: the same manifest and registry always produce byte-identical
    streams.  Payloads come from the entry locator -- ``synthetic`` documents
    are regenerated arithmetically, ``bin:<offset>`` documents are read from
    the per-source ``<source>.tokens.bin`` sidecar.
    """
    actual = registry.digest()
    if actual != manifest.registry_digest:
        raise DigestMismatchError(
            f"registry digest {actual[:12]} does not match manifest "
            f"{manifest.registry_digest[:12]}"
        )
    for record in manifest.records:
        inv = registry.inventory(record.source)
        entry = inv.entry(record.document_id)
        tokens = _load_tokens(registry, record.source, entry)
        yield tokens[: record.doc_token_count]


def _load_tokens(registry: DocumentRegistry, source: str, entry: DocumentEntry) -> np.ndarray:
    if entry.locator == SYNTHETIC_LOCATOR:
        return synthetic_tokens(entry.doc_id, entry.token_count)
    if entry.locator.startswith("bin:"):
        if registry.base_dir is None:
            raise MissingDocumentError(
                f"document {entry.doc_id!r} needs a registry directory for its payload"
            )
        start = int(entry.locator[4:])
        path = os.path.join(registry.base_dir, f"{source}.tokens.bin")
        with open(path, "rb") as fh:
            fh.seek(start * 4)
            raw = fh.read(entry.token_count * 4)
        if len(raw) != entry.token_count * 4:
            raise MissingDocumentError(f"payload for {entry.doc_id!r} is truncated")
        return np.frombuffer(raw, dtype="<u4")
    raise MissingDocumentError(f"unknown locator {entry.locator!r} for {entry.doc_id!r}")


# ---------------------------------------------------------------------------
# Manifest file format: one header line, then one TSV row per record
# ---------------------------------------------------------------------------


def write_manifest(manifest: SampleManifest, path: str) -> None:
    header = (
        f"{MANIFEST_MAGIC} plan={manifest.plan_digest} registry={manifest.registry_digest} "
        f"seed={manifest.seed} total_tokens={manifest.total_tokens} "
        f"algorithm={manifest.algorithm}"
    )
    lines = [header]
    lines.extend(
        f"{r.offset}\t{r.source}\t{r.document_id}\t{r.doc_token_count}\t{r.epoch_index}\t{r.phase}"
        for r in manifest.records
    )
    _atomic_write_text(path, "\n".join(lines) + "\n")


def read_manifest(path: str) -> SampleManifest:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(MANIFEST_MAGIC):
            raise InvalidParameterError(f"{path!r} is not a manifest file")
        fields = dict(part.split("=", 1) for part in header.split(" ")[2:])
        records = []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            offset, source, doc_id, span, epoch, phase = line.split("\t")
            records.append(
                ManifestRecord(int(offset), source, doc_id, int(span), int(epoch), phase)
            )
    return SampleManifest(
        plan_digest=fields["plan"],
        registry_digest=fields["registry"],
        seed=int(fields["seed"]),
        total_tokens=int(fields["total_tokens"]),
        algorithm=fields["algorithm"],
        records=tuple(records),
    )


def _atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
