"""Coarse, fine and coarse-to-fine retrieval with timing and pass counting.

Targets are encoded once: their CLS vectors go into a :class:`CoarseIndex`
and their full token sets into a :class:`TargetStore`. A query is then scored
with a matrix-vector product (coarse), with the cross-modal encoder against
every target (fine), or with the cross-modal encoder against only the
``k_c`` best coarse candidates (ctf).
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import InvalidInputError, ShapeError
from .io import read_index, write_index
from .layers import topk
from .model import AudioEncoding, CrossModalRetriever, ImageEncoding
from .tensor import Tensor

MODALITIES = ("image", "audio")
MODES = ("coarse", "fine", "ctf")
DEFAULT_K_C = 100
FINE_CHUNK = 256


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _split_encodings(encodings) -> tuple[str, list[np.ndarray], list[np.ndarray]]:
    """Modality plus per-item CLS vectors and token matrices, from one batched
    encoding or a list of (possibly batched) encodings."""
    if isinstance(encodings, (AudioEncoding, ImageEncoding)):
        encodings = [encodings]
    cls_rows, tokens, kinds = [], [], set()
    for enc in encodings:
        if isinstance(enc, AudioEncoding):
            kinds.add("audio")
            c, t = _data(enc.cls_a), _data(enc.cls_and_lo_res)
        elif isinstance(enc, ImageEncoding):
            kinds.add("image")
            c, t = _data(enc.cls_i), _data(enc.tokens)
        else:
            raise InvalidInputError(f"not an encoding: {type(enc).__name__}")
        if c.ndim == 1:
            c, t = c[None], t[None]
        cls_rows.extend(c)
        tokens.extend(t)
    if len(kinds) != 1:
        raise InvalidInputError("encodings must all come from one modality")
    return kinds.pop(), cls_rows, tokens


@dataclass(frozen=True)
class CoarseIndex:
    target_ids: tuple[str, ...]
    cls_matrix: np.ndarray  # [N, d], read-only
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidInputError(f"unknown modality {self.modality!r}")
        if self.cls_matrix.ndim != 2 or self.cls_matrix.shape[0] != len(self.target_ids):
            raise ShapeError("cls_matrix rows must align with target_ids")
        self.cls_matrix.flags.writeable = False

    def __len__(self) -> int:
        return len(self.target_ids)

    def save(self, path) -> None:
        write_index(path, self.target_ids, self.cls_matrix, self.modality)

    @classmethod
    def load(cls, path) -> "CoarseIndex":
        ids, matrix, modality = read_index(path)
        return cls(tuple(ids), matrix, modality)


def build_index(encodings, ids: Sequence[str]) -> CoarseIndex:
    modality, cls_rows, _ = _split_encodings(encodings)
    ids = tuple(str(i) for i in ids)
    if not ids:
        raise InvalidInputError("cannot index zero targets")
    if len(set(ids)) != len(ids):
        raise InvalidInputError("duplicate target ids")
    if len(ids) != len(cls_rows):
        raise ShapeError(f"{len(ids)} ids for {len(cls_rows)} encodings")
    widths = {row.shape for row in cls_rows}
    if len(widths) != 1:
        raise ShapeError("inconsistent CLS widths")
    return CoarseIndex(ids, np.array(cls_rows, dtype=np.float64), modality)


class TargetStore:
    """Full token sets of the targets, grouped by token count for batched scoring."""

    def __init__(self, target_ids: Sequence[str], tokens: Sequence[np.ndarray], modality: str):
        if modality not in MODALITIES:
            raise InvalidInputError(f"unknown modality {modality!r}")
        if len(target_ids) != len(tokens) or not tokens:
            raise ShapeError("need one token matrix per target id")
        if len(set(target_ids)) != len(target_ids):
            raise InvalidInputError("duplicate target ids")
        self.target_ids = tuple(str(t) for t in target_ids)
        self.modality = modality
        self.tokens = [np.asarray(t, dtype=np.float64) for t in tokens]
        lengths = np.array([t.shape[0] for t in self.tokens])
        self._group_of = lengths
        self._stacked = {int(n): np.stack([t for t in self.tokens if t.shape[0] == n])
                         for n in np.unique(lengths)}
        self._row_in_group = np.zeros(len(lengths), dtype=np.int64)
        for n in np.unique(lengths):
            members = np.flatnonzero(lengths == n)
            self._row_in_group[members] = np.arange(len(members))

    @classmethod
    def from_encodings(cls, encodings, ids: Sequence[str]) -> "TargetStore":
        modality, _, tokens = _split_encodings(encodings)
        return cls(ids, tokens, modality)

    def __len__(self) -> int:
        return len(self.target_ids)

    def gather(self, positions: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(positions, stacked tokens)`` per token-count group, positions ascending."""
        positions = np.asarray(positions, dtype=np.int64)
        out = []
        for n, stacked in self._stacked.items():
            sel = positions[self._group_of[positions] == n]
            if sel.size:
                out.append((sel, stacked[self._row_in_group[sel]]))
        return out


@dataclass
class RetrievalResult:
    ranked: list[tuple[str, float]]
    mode: str
    coarse_ms: float = 0.0
    fine_ms: float = 0.0
    xmodal_passes: int = 0
    candidates: list[str] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [t for t, _ in self.ranked]

    @property
    def total_ms(self) -> float:
        return self.coarse_ms + self.fine_ms


def _query_parts(query) -> tuple[str, np.ndarray, np.ndarray]:
    modality, cls_rows, tokens = _split_encodings(query)
    if len(cls_rows) != 1:
        raise InvalidInputError("a query must be a single encoding")
    return modality, cls_rows[0], tokens[0]


def coarse_scores(query_cls, index: CoarseIndex) -> np.ndarray:
    q = np.asarray(_data(query_cls), dtype=np.float64).reshape(-1)
    if len(index) == 0:
        raise InvalidInputError("empty index")
    if q.shape[0] != index.cls_matrix.shape[1]:
        raise ShapeError(f"query width {q.shape[0]} differs from index width {index.cls_matrix.shape[1]}")
    return index.cls_matrix @ q


def coarse_retrieve(query, index: CoarseIndex, k: int) -> RetrievalResult:
    """Top-``k`` targets by CLS dot product. ``query`` is a CLS vector or an encoding."""
    if isinstance(query, (AudioEncoding, ImageEncoding)):
        modality, query, _ = _query_parts(query)
        if modality == index.modality:
            raise InvalidInputError("query and index have the same modality")
    t0 = time.perf_counter_ns()
    scores = coarse_scores(query, index)
    best = topk(scores, k)
    elapsed = time.perf_counter_ns() - t0
    return RetrievalResult(
        ranked=[(index.target_ids[i], s) for i, s in best],
        mode="coarse",
        coarse_ms=elapsed / 1e6,
        xmodal_passes=0,
    )


def score_targets(model: CrossModalRetriever, query_modality: str, query_tokens: np.ndarray,
                  store: TargetStore, positions: np.ndarray, chunk: int = FINE_CHUNK) -> np.ndarray:
    """Fine scores of one query against ``store`` rows ``positions`` (in the given order)."""
    positions = np.asarray(positions, dtype=np.int64)
    out = np.empty(len(positions))
    where = {int(p): i for i, p in enumerate(positions)}
    q = np.asarray(query_tokens)
    with T.no_grad():
        for sel, toks in store.gather(positions):
            for s in range(0, len(sel), chunk):
                part = toks[s:s + chunk]
                qb = Tensor(np.broadcast_to(q, (len(part), *q.shape)))
                tb = Tensor(part)
                if query_modality == "audio":
                    scores = model.fine_scores(qb, tb)
                else:
                    scores = model.fine_scores(tb, qb)
                for p, v in zip(sel[s:s + chunk], scores.data):
                    out[where[int(p)]] = v
    return out


def _check_pair(query_modality: str, store: TargetStore) -> None:
    if query_modality == store.modality:
        raise InvalidInputError(
            f"query modality {query_modality!r} must differ from target modality {store.modality!r}"
        )


def fine_retrieve(model: CrossModalRetriever, query, store: TargetStore, k: int) -> RetrievalResult:
    modality, _, tokens = _query_parts(query)
    _check_pair(modality, store)
    t0 = time.perf_counter_ns()
    positions = np.arange(len(store))
    scores = score_targets(model, modality, tokens, store, positions)
    best = topk(scores, k)
    elapsed = time.perf_counter_ns() - t0
    return RetrievalResult(
        ranked=[(store.target_ids[i], s) for i, s in best],
        mode="fine",
        fine_ms=elapsed / 1e6,
        xmodal_passes=len(positions),
    )


def ctf_retrieve(model: CrossModalRetriever, query, index: CoarseIndex, store: TargetStore,
                 k_c: int, k: int) -> RetrievalResult:
    """Coarse top-``k_c`` candidates, reranked by fine score; returns the fine top-``k``."""
    if k > k_c:
        raise InvalidInputError(f"k ({k}) must not exceed k_c ({k_c})")
    if index.target_ids != store.target_ids:
        raise InvalidInputError("index and store must hold the same targets in the same order")
    modality, cls, tokens = _query_parts(query)
    _check_pair(modality, store)

    t0 = time.perf_counter_ns()
    coarse = topk(coarse_scores(cls, index), k_c)
    t1 = time.perf_counter_ns()
    # ascending store order so k_c >= N reproduces fine_retrieve exactly, ties included
    positions = np.sort(np.array([i for i, _ in coarse], dtype=np.int64))
    scores = score_targets(model, modality, tokens, store, positions)
    best = topk(scores, k)
    t2 = time.perf_counter_ns()
    return RetrievalResult(
        ranked=[(store.target_ids[positions[i]], s) for i, s in best],
        mode="ctf",
        coarse_ms=(t1 - t0) / 1e6,
        fine_ms=(t2 - t1) / 1e6,
        xmodal_passes=len(positions),
        candidates=[index.target_ids[i] for i, _ in coarse],
    )


def retrieve(model: CrossModalRetriever, query, index: CoarseIndex, store: TargetStore,
             mode: str, k: int, k_c: int = DEFAULT_K_C) -> RetrievalResult:
    if mode == "coarse":
        return coarse_retrieve(query, index, k)
    if mode == "fine":
        return fine_retrieve(model, query, store, k)
    if mode == "ctf":
        return ctf_retrieve(model, query, index, store, k_c, k)
    raise InvalidInputError(f"unknown retrieval mode {mode!r}")


def bench(model: CrossModalRetriever, queries: Sequence, index: CoarseIndex, store: TargetStore,
          k_c: int = DEFAULT_K_C, k: int = 10, repeats: int = 1,
          modes: Sequence[str] = MODES) -> dict:
    """Per-mode query latency (scoring only, encodings excluded) and pass counts."""
    if repeats < 1:
        raise InvalidInputError("repeats must be >= 1")
    if not queries:
        raise InvalidInputError("bench needs at least one query")
    report = {"num_targets": len(store), "num_queries": len(queries), "k": k, "k_c": k_c,
              "repeats": repeats, "modes": {}}
    for mode in modes:
        times, passes = [], []
        retrieve(model, queries[0], index, store, mode, k, k_c)  # untimed warm-up
        for _ in range(repeats):
            for q in queries:
                res = retrieve(model, q, index, store, mode, k, k_c)
                times.append(res.total_ms)
                passes.append(res.xmodal_passes)
        if len(set(passes)) != 1:
            raise RuntimeError(f"pass count varied across {mode} queries: {sorted(set(passes))}")
        report["modes"][mode] = {
            "mean_ms": statistics.fmean(times),
            "median_ms": statistics.median(times),
            "xmodal_passes": passes[0],
        }
    return report
