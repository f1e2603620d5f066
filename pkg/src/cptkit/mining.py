"""Exact nearest-neighbor document mining over precomputed embeddings.

Search is an exact blocked scan: vectors are stored as contiguous row blocks,
each block contributes its top candidates (including any ties at the
boundary), and the merged pool is ordered by descending score with ties
broken by ascending document id.  Scores are accumulated in double precision
so results are independent of the block layout.

The embedding interchange format is a small binary header followed by
row-major little-endian float32 data, with document ids in a line-delimited
sidecar file.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .blend import BlendPhase, SourceRegistry
from .errors import (
    DimensionMismatchError,
    EmbeddingFormatError,
    EmptyMiningResultError,
    InvalidParameterError,
    OutOfRangeError,
)
from .sampler import DocumentRegistry

log = logging.getLogger(__name__)

COSINE = "cosine"
INNER_PRODUCT = "inner_product"
METRICS = (COSINE, INNER_PRODUCT)

DEFAULT_K = 50
DEFAULT_BLOCK_ROWS = 4096

_EMB_MAGIC = b"CPTEMB1\n"
_DTYPE_F32 = 1


@dataclass(frozen=True)
class EmbeddingSet:
    ids: tuple[str, ...]
    vectors: np.ndarray  # (n, d)
    norms: np.ndarray  # (n,)

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)


def make_embedding_set(ids: list[str], vectors: np.ndarray) -> EmbeddingSet:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise InvalidParameterError("vectors must be a 2-D array")
    if len(ids) != vectors.shape[0]:
        raise InvalidParameterError(
            f"{len(ids)} ids for {vectors.shape[0]} vectors"
        )
    if len(set(ids)) != len(ids):
        raise InvalidParameterError("duplicate document ids in embedding set")
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    return EmbeddingSet(ids=tuple(ids), vectors=vectors, norms=norms)


class SimilarityIndex:
    """Exact-search structure over an embedding set."""

    def __init__(self, ids: tuple[str, ...], blocks: list[np.ndarray], metric: str, dimension: int):
        self.ids = ids
        self.blocks = blocks
        self.metric = metric
        self.dimension = dimension
        self.size = len(ids)


def build_index(
    embeddings: EmbeddingSet,
    metric: str = COSINE,
    block_rows: int = DEFAULT_BLOCK_ROWS,
) -> SimilarityIndex:
    """Copy the vectors into id-sorted, contiguous scan blocks.

    Cosine indexes store normalized copies, so a query's score against a
    stored vector is the plain dot product either way.
    """
    if metric not in METRICS:
        raise InvalidParameterError(f"unknown metric {metric!r}")
    if len(embeddings) < 1:
        raise InvalidParameterError("cannot index an empty embedding set")
    vectors = embeddings.vectors.astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        bad = int(np.argwhere(~np.isfinite(vectors).all(axis=1))[0][0])
        raise InvalidParameterError(
            f"vector for {embeddings.ids[bad]!r} contains a non-finite entry"
        )
    order = np.argsort(np.array(embeddings.ids))
    ids = tuple(embeddings.ids[i] for i in order)
    vectors = vectors[order]
    if metric == COSINE:
        norms = embeddings.norms[order]
        if np.any(norms == 0):
            bad = ids[int(np.argwhere(norms == 0)[0][0])]
            raise InvalidParameterError(f"zero-norm vector {bad!r} under cosine metric")
        vectors = vectors / norms[:, None]
    blocks = [
        np.ascontiguousarray(vectors[start : start + block_rows])
        for start in range(0, len(ids), block_rows)
    ]
    return SimilarityIndex(ids=ids, blocks=blocks, metric=metric, dimension=int(vectors.shape[1]))


def _prepare_queries(index: SimilarityIndex, queries: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != index.dimension:
        raise DimensionMismatchError(
            f"query dimension {q.shape[1]} != index dimension {index.dimension}"
        )
    if index.metric == COSINE:
        norms = np.linalg.norm(q, axis=1)
        if np.any(norms == 0):
            raise InvalidParameterError("zero-norm query under cosine metric")
        q = q / norms[:, None]
    return q


def knn(index: SimilarityIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k neighbors of one query: (id, score), best first."""
    return knn_batch(index, query, k)[0]


def knn_batch(index: SimilarityIndex, queries: np.ndarray, k: int) -> list[list[tuple[str, float]]]:
    if not 1 <= k <= index.size:
        raise OutOfRangeError(f"k={k} outside [1, {index.size}]")
    q = _prepare_queries(index, queries)
    n_queries = q.shape[0]
    cand_scores: list[list[np.ndarray]] = [[] for _ in range(n_queries)]
    cand_rows: list[list[np.ndarray]] = [[] for _ in range(n_queries)]
    row_base = 0
    for block in index.blocks:
        sims = block @ q.T  # (block_rows, n_queries)
        for j in range(n_queries):
            col = sims[:, j]
            if len(col) > k:
                thr = np.partition(col, len(col) - k)[len(col) - k]
                keep = np.nonzero(col >= thr)[0]
            else:
                keep = np.arange(len(col))
            cand_scores[j].append(col[keep])
            cand_rows[j].append(keep + row_base)
        row_base += len(block)
    results = []
    for j in range(n_queries):
        scores = np.concatenate(cand_scores[j])
        rows = np.concatenate(cand_rows[j])
        # descending score; rows are id-sorted, so row order == id order
        order = np.lexsort((rows, -scores))[:k]
        results.append([(index.ids[int(rows[i])], float(scores[i])) for i in order])
    return results


@dataclass(frozen=True)
class MiningResult:
    neighbors: dict[str, list[tuple[str, float]]]
    mined_ids: tuple[str, ...]
    mined_tokens: int
    k: int
    metric: str


def mine(
    qa: EmbeddingSet,
    corpus: EmbeddingSet,
    k: int = DEFAULT_K,
    registry: DocumentRegistry | None = None,
    metric: str = COSINE,
) -> MiningResult:
    """Top-k corpus neighbors for every QA query, deduplicated into one set.

    ``registry`` supplies token counts for the mined documents; every
    neighbor id must resolve.  Queries are processed in ascending query-id
    order so the result is reproducible regardless of any internal
    parallelism.
    """
    if qa.dimension != corpus.dimension:
        raise DimensionMismatchError(
            f"query dimension {qa.dimension} != corpus dimension {corpus.dimension}"
        )
    shared = set(qa.ids) & set(corpus.ids)
    if shared:
        raise InvalidParameterError(
            f"corpus must exclude QA documents; {len(shared)} ids overlap"
        )
    index = build_index(corpus, metric=metric)
    query_order = sorted(range(len(qa.ids)), key=lambda i: qa.ids[i])
    per_query = knn_batch(index, qa.vectors[query_order], k)
    neighbors = {qa.ids[qi]: hits for qi, hits in zip(query_order, per_query)}
    mined_ids = tuple(sorted({nid for hits in neighbors.values() for nid, _ in hits}))
    mined_tokens = 0
    if registry is not None:
        for doc_id in mined_ids:
            _, entry = registry.lookup(doc_id)
            mined_tokens += entry.token_count
    return MiningResult(
        neighbors=neighbors,
        mined_ids=mined_ids,
        mined_tokens=mined_tokens,
        k=k,
        metric=metric,
    )


def emit_mined_blend(
    result: MiningResult,
    qb: BlendPhase,
    registry: SourceRegistry,
    mined_source: str = "mined_docs",
) -> BlendPhase:
    """Replace every non-QA source in the QA blend with the mined subset.

    QA weights are untouched; the mined source absorbs the combined non-QA
    weight.  A blend that is already QA-only is returned unchanged.
    """
    if not result.mined_ids:
        raise EmptyMiningResultError("mining result contains no documents")
    qa_weight = {}
    replaced = 0.0
    for name, w in qb.weights.items():
        if registry.require(name).domain == "qa_category":
            qa_weight[name] = w
        else:
            replaced += w
    if replaced == 0.0:
        log.warning("QA blend has no non-QA sources; nothing to replace")
        return qb
    weights = dict(qa_weight)
    weights[mined_source] = replaced
    return BlendPhase(weights=weights, label=qb.label)


# ---------------------------------------------------------------------------
# Interchange format
# ---------------------------------------------------------------------------


def write_embedding_set(embeddings: EmbeddingSet, vectors_path: str, ids_path: str) -> None:
    data = embeddings.vectors.astype("<f4")
    header = _EMB_MAGIC + struct.pack("<QII", len(embeddings), embeddings.dimension, _DTYPE_F32)
    with open(vectors_path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))
    with open(ids_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(embeddings.ids) + "\n")


def load_embedding_set(vectors_path: str, ids_path: str) -> EmbeddingSet:
    with open(vectors_path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_EMB_MAGIC):
        raise EmbeddingFormatError(f"{vectors_path!r}: bad magic", byte_offset=0)
    header_size = len(_EMB_MAGIC) + struct.calcsize("<QII")
    if len(blob) < header_size:
        raise EmbeddingFormatError(f"{vectors_path!r}: truncated header", byte_offset=len(blob))
    n, d, dtype_code = struct.unpack_from("<QII", blob, len(_EMB_MAGIC))
    if dtype_code != _DTYPE_F32:
        raise EmbeddingFormatError(
            f"{vectors_path!r}: unsupported dtype code {dtype_code}",
            byte_offset=len(_EMB_MAGIC) + 12,
        )
    if d == 0 or n == 0:
        raise EmbeddingFormatError(f"{vectors_path!r}: empty shape {n}x{d}", byte_offset=len(_EMB_MAGIC))
    expected = header_size + n * d * 4
    if len(blob) != expected:
        raise EmbeddingFormatError(
            f"{vectors_path!r}: expected {expected} bytes, found {len(blob)}",
            byte_offset=min(len(blob), expected),
        )
    vectors = np.frombuffer(blob, dtype="<f4", offset=header_size).reshape(n, d)
    with open(ids_path, encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh if line.strip()]
    if len(ids) != n:
        raise EmbeddingFormatError(
            f"{ids_path!r}: {len(ids)} ids for {n} vectors", byte_offset=0
        )
    return make_embedding_set(ids, vectors)
