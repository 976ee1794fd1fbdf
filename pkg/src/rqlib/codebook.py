"""Shared codebook: nearest-code lookup, EMA training, restarts, serialization.

The codebook holds K embeddings in R^dim plus exponential-moving-average
statistics used to refresh them from assigned vectors. Distances are squared
L2 (argmin-invariant); nearest-code ties break toward the lowest index.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .errors import DimensionError, FormatError, InsufficientDataError

LAPLACE_EPS = 1e-5
MAGIC = b"RQCB"
VERSION = 1


class Codebook:
    """K code embeddings with EMA cluster statistics.

    Invariant maintained by every update: where ema_size[k] > 0,
    embeddings[k] == ema_sum[k] / (ema_size[k] + LAPLACE_EPS).
    """

    def __init__(self, embeddings: np.ndarray, ema_size: np.ndarray | None = None,
                 ema_sum: np.ndarray | None = None):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise DimensionError(f"embeddings must be (K, dim) with K,dim >= 1, got {emb.shape}")
        if not np.isfinite(emb).all():
            raise ValueError("embeddings must be finite")
        self.embeddings = emb
        self.ema_size = (np.zeros(emb.shape[0]) if ema_size is None
                         else np.asarray(ema_size, dtype=np.float64).copy())
        self.ema_sum = (np.zeros_like(emb) if ema_sum is None
                        else np.asarray(ema_sum, dtype=np.float64).copy())
        if self.ema_size.shape != (emb.shape[0],) or self.ema_sum.shape != emb.shape:
            raise DimensionError("EMA statistic shapes do not match embeddings")
        # optional (depth, K) histogram filled by training loops
        self.usage_count: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "Codebook":
        cb = Codebook(self.embeddings.copy(), self.ema_size, self.ema_sum)
        if self.usage_count is not None:
            cb.usage_count = self.usage_count.copy()
        return cb

    def content_hash(self) -> bytes:
        """SHA-256 of the serialized codebook; identifies artifact pairings."""
        return hashlib.sha256(dump_codebook(self)).digest()

    def _refresh_embeddings(self) -> None:
        live = self.ema_size > 0
        self.embeddings[live] = self.ema_sum[live] / (self.ema_size[live, None] + LAPLACE_EPS)


def squared_distances(Z: np.ndarray, cb: Codebook) -> np.ndarray:
    """(B, K) squared L2 distances via the expansion |z|^2 - 2 z.e + |e|^2."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != cb.dim:
        raise DimensionError(f"queries must be (B, {cb.dim}), got {Z.shape}")
    zz = (Z * Z).sum(axis=1, keepdims=True)
    ee = (cb.embeddings * cb.embeddings).sum(axis=1)
    return zz - 2.0 * (Z @ cb.embeddings.T) + ee


def nearest_code(z: np.ndarray, cb: Codebook) -> int:
    """Index of the embedding with smallest squared distance to ``z``.

    Ties break to the lowest index.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cb.dim,):
        raise DimensionError(f"query has shape {z.shape}, codebook dim is {cb.dim}")
    if not np.isfinite(z).all():
        raise ValueError("query must be finite")
    return int(np.argmin(squared_distances(z[None, :], cb)[0]))


def nearest_code_batch(Z: np.ndarray, cb: Codebook) -> np.ndarray:
    """Row-wise nearest_code; results are independent of batch partitioning."""
    d = squared_distances(Z, cb)
    return np.argmin(d, axis=1)


def ema_update(cb: Codebook, Z: np.ndarray, assignments: np.ndarray, decay: float) -> None:
    """Fold one batch of assigned vectors into the EMA statistics.

    ema_size[k] <- decay*old + (1-decay)*count_k
    ema_sum[k]  <- decay*old + (1-decay)*sum of vectors assigned to k
    then embeddings are refreshed per the class invariant. Codes unseen in
    this batch decay toward zero evidence.
    """
    Z = np.asarray(Z, dtype=np.float64)
    a = np.asarray(assignments)
    if not (0.0 <= decay < 1.0):
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    if Z.ndim != 2 or Z.shape[1] != cb.dim or a.shape != (Z.shape[0],):
        raise DimensionError("batch/assignment shapes do not match the codebook")
    if a.min(initial=0) < 0 or a.max(initial=0) >= cb.size:
        raise IndexError("assignment index out of range")
    counts = np.bincount(a, minlength=cb.size).astype(np.float64)
    sums = np.zeros_like(cb.ema_sum)
    np.add.at(sums, a, Z)
    cb.ema_size = decay * cb.ema_size + (1.0 - decay) * counts
    cb.ema_sum = decay * cb.ema_sum + (1.0 - decay) * sums
    cb._refresh_embeddings()


def restart_unused(cb: Codebook, Z: np.ndarray, threshold: float,
                   rng: np.random.Generator) -> int:
    """Re-seed codes whose EMA count fell below ``threshold`` from rows of Z.

    Each stale code (in ascending index order) takes a row drawn by
    ``rng.integers(len(Z))``; its stats reset to (1, row). Returns the number
    of restarted codes.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] != cb.dim:
        raise DimensionError("restart pool must be a non-empty (B, dim) array")
    stale = np.flatnonzero(cb.ema_size < threshold)
    for k in stale:
        row = Z[int(rng.integers(Z.shape[0]))]
        cb.embeddings[k] = row
        cb.ema_size[k] = 1.0
        cb.ema_sum[k] = row
    return int(stale.size)


def init_codebook(Z: np.ndarray, K: int, rng: np.random.Generator) -> Codebook:
    """Seed K embeddings from K distinct rows of Z; stats start at (1, row)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise DimensionError(f"init pool must be 2-d, got shape {Z.shape}")
    if Z.shape[0] < K:
        raise InsufficientDataError(f"need at least K={K} vectors, got {Z.shape[0]}")
    chosen = rng.choice(Z.shape[0], size=K, replace=False)
    rows = Z[chosen]
    return Codebook(rows.copy(), ema_size=np.ones(K), ema_sum=rows.copy())


def usage_histogram(code_maps, K: int) -> np.ndarray:
    """(depth, K) histogram of code usage across one or more (.., depth) maps."""
    maps = [np.asarray(m) for m in (code_maps if isinstance(code_maps, (list, tuple)) else [code_maps])]
    depth = maps[0].shape[-1]
    hist = np.zeros((depth, K), dtype=np.int64)
    for m in maps:
        flat = m.reshape(-1, depth)
        for d in range(depth):
            hist[d] += np.bincount(flat[:, d], minlength=K)
    return hist


def usage_entropy(hist: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each depth's usage distribution."""
    h = np.asarray(hist, dtype=np.float64)
    totals = h.sum(axis=-1, keepdims=True)
    p = np.divide(h, totals, out=np.zeros_like(h), where=totals > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p), 0.0)
    return -(p * logs).sum(axis=-1)


# ---------------------------------------------------------------------------
# RQCB serialization
# ---------------------------------------------------------------------------


def dump_codebook(cb: Codebook) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, cb.size, cb.dim))
    buf.write(cb.embeddings.astype("<f4").tobytes())
    buf.write(cb.ema_size.astype("<f8").tobytes())
    buf.write(cb.ema_sum.astype("<f4").tobytes())
    return buf.getvalue()


def parse_codebook(data: bytes) -> Codebook:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, K, dim = struct.unpack_from("<III", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported codebook version {version}")
    off = 16
    emb = np.frombuffer(data, dtype="<f4", count=K * dim, offset=off).reshape(K, dim)
    off += 4 * K * dim
    size = np.frombuffer(data, dtype="<f8", count=K, offset=off)
    off += 8 * K
    sums = np.frombuffer(data, dtype="<f4", count=K * dim, offset=off).reshape(K, dim)
    return Codebook(emb.astype(np.float64), size.astype(np.float64), sums.astype(np.float64))


def save_codebook(cb: Codebook, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_codebook(cb))


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        return parse_codebook(fh.read())
