"""Residual quantization of vectors and feature maps.

A vector is represented by an ordered stack of codes: at each depth the
current residual is quantized against the (shared) codebook and subtracted.
Partial sums of the chosen embeddings give coarse-to-fine approximations.
Includes the stochastic code-sampling variant, softened code targets, the
commitment loss, the straight-through gradient rule, and the stacked code
map container with its binary format.

Residual recursion runs in f64 with explicit sequential accumulation so the
telescoping identity (partial_sum[depth] + residual[depth] == input) holds to
the last few ulps and partial sums are bit-reproducible across call sites.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .codebook import Codebook, squared_distances
from .errors import DimensionError, FormatError, ValidationError

RQCM_MAGIC = b"RQCM"
RQCM_VERSION = 1
_ENUMERATION_LIMIT = 2_000_000


@dataclass
class RQResult:
    """Codes, residual trajectory, and partial sums for one vector.

    residuals[0] is the input; residuals[d] = residuals[d-1] - e(codes[d-1]).
    partial_sums[d-1] is the depth-d approximation (sum of the first d
    embeddings), so partial_sums[-1] + residuals[-1] telescopes back to the
    input.
    """

    codes: np.ndarray        # (depth,) int
    residuals: np.ndarray    # (depth+1, dim)
    partial_sums: np.ndarray  # (depth, dim)


@dataclass
class SoftLabel:
    """Temperature-softened categorical distribution over codes."""

    probabilities: np.ndarray
    temperature: float


class CodeStackMap:
    """H x W x depth integer code tensor tied to a specific codebook."""

    def __init__(self, codes: np.ndarray, K: int, codebook_id: bytes = b"\x00" * 32):
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 3:
            raise DimensionError(f"codes must be (H, W, depth), got shape {codes.shape}")
        if codes.min(initial=0) < 0 or codes.max(initial=0) >= K:
            raise ValueError(f"codes out of range [0, {K})")
        if len(codebook_id) != 32:
            raise ValueError("codebook_id must be 32 bytes")
        self.codes = codes
        self.K = int(K)
        self.codebook_id = bytes(codebook_id)

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    @property
    def depth(self) -> int:
        return self.codes.shape[2]

    @property
    def positions(self) -> int:
        return self.height * self.width

    def flat(self) -> np.ndarray:
        """(T, depth) raster-scan view: position t = row*width + column."""
        return self.codes.reshape(self.positions, self.depth)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CodeStackMap) and self.K == other.K
                and self.codebook_id == other.codebook_id
                and self.codes.shape == other.codes.shape
                and bool(np.array_equal(self.codes, other.codes)))


@dataclass
class QuantizedMap:
    """quantize_feature_map output: code map plus per-depth sum/residual maps."""

    map: CodeStackMap
    partials: np.ndarray    # (depth, H, W, dim)
    residuals: np.ndarray   # (depth+1, H, W, dim)


# ---------------------------------------------------------------------------
# encoding / decoding
# ---------------------------------------------------------------------------


def _book_at(cb, d: int) -> Codebook:
    return cb[d] if isinstance(cb, (list, tuple)) else cb


def _encode_batch(Z: np.ndarray, cb, depth: int, tau: float | None,
                  rngs: Sequence[np.random.Generator] | None):
    """Vectorized residual-quantization recursion over a (B, dim) batch.

    ``tau=None`` selects greedy nearest codes; otherwise codes are sampled
    from the softened distance distribution (tau=0 degenerates to greedy).
    ``cb`` may be a single shared codebook or a per-depth sequence.
    """
    Z = np.asarray(Z, dtype=np.float64)
    B = Z.shape[0]
    dim = _book_at(cb, 0).dim
    if Z.shape[1] != dim:
        raise DimensionError(f"vectors have dim {Z.shape[1]}, codebook dim {dim}")
    codes = np.zeros((B, depth), dtype=np.int64)
    residuals = np.zeros((depth + 1, B, dim))
    partials = np.zeros((depth, B, dim))
    residuals[0] = Z
    r = Z.copy()
    acc = np.zeros_like(Z)
    for d in range(depth):
        book = _book_at(cb, d)
        dist = squared_distances(r, book)
        if tau is None or tau == 0.0:
            k = np.argmin(dist, axis=1)
        else:
            logits = -(dist - dist.min(axis=1, keepdims=True)) / tau
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            cdf = np.cumsum(p, axis=1)
            k = np.empty(B, dtype=np.int64)
            for i in range(B):
                u = rngs[i].random()
                k[i] = min(int(np.searchsorted(cdf[i], u, side="right")), book.size - 1)
        codes[:, d] = k
        e = book.embeddings[k]
        r = r - e
        acc = acc + e
        residuals[d + 1] = r
        partials[d] = acc
    return codes, residuals, partials


def rq_encode(z: np.ndarray, cb: Codebook, depth: int) -> RQResult:
    """Greedy residual quantization of one vector to ``depth`` codes."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {z.shape}")
    codes, residuals, partials = _encode_batch(z[None, :], cb, depth, None, None)
    return RQResult(codes[0], residuals[:, 0, :], partials[:, 0, :])


def rq_encode_stochastic(z: np.ndarray, cb: Codebook, depth: int, tau: float,
                         rng: np.random.Generator) -> RQResult:
    """Residual quantization sampling each code from the softened distance
    distribution exp(-|r - e(k)|^2 / tau); tau=0 reduces to rq_encode."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if tau < 0:
        raise ValidationError(f"temperature must be >= 0, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    codes, residuals, partials = _encode_batch(
        z[None, :], cb, depth, tau if tau > 0 else None, [rng])
    return RQResult(codes[0], residuals[:, 0, :], partials[:, 0, :])


def rq_decode(codes: Sequence[int], cb, d: int | None = None) -> np.ndarray:
    """Partial sum of the first ``d`` code embeddings; d=0 gives the zero vector.

    Accumulates sequentially in code order, matching the encode recursion
    bit for bit.
    """
    codes = np.asarray(codes, dtype=np.int64)
    depth = codes.shape[0]
    if d is None:
        d = depth
    if d < 0 or d > depth:
        raise ValueError(f"partial depth {d} outside [0, {depth}]")
    acc = np.zeros(_book_at(cb, 0).dim)
    for i in range(d):
        acc = acc + _book_at(cb, i).embeddings[codes[i]]
    return acc


def soft_label(r: np.ndarray, cb: Codebook, tau: float) -> SoftLabel:
    """Softmax over codes of -|r - e(k)|^2 / tau, max-subtracted."""
    if tau <= 0:
        raise ValidationError(f"temperature must be > 0, got {tau}; use one_hot_label for tau=0")
    dist = squared_distances(np.asarray(r, dtype=np.float64)[None, :], cb)[0]
    logits = -(dist - dist.min()) / tau
    p = np.exp(logits)
    p /= p.sum()
    return SoftLabel(p, tau)


def one_hot_label(r: np.ndarray, cb: Codebook) -> SoftLabel:
    """Zero-temperature limit: all mass on the nearest code."""
    from .codebook import nearest_code

    p = np.zeros(cb.size)
    p[nearest_code(np.asarray(r, dtype=np.float64), cb)] = 1.0
    return SoftLabel(p, 0.0)


def soft_label_batch(R: np.ndarray, cb: Codebook, tau: float) -> np.ndarray:
    """(B, K) softened code distributions for a batch of residuals."""
    if tau <= 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    dist = squared_distances(R, cb)
    logits = -(dist - dist.min(axis=1, keepdims=True)) / tau
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p


def quantize_feature_map(Z: np.ndarray, cb, depth: int, mode: str = "deterministic",
                         tau: float = 0.0, seed: int = 0) -> QuantizedMap:
    """Position-wise residual quantization of an (H, W, dim) feature map.

    Stochastic mode draws each position's codes from its own RNG stream keyed
    by (seed, raster position), so results do not depend on evaluation order
    or batching.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 3:
        raise DimensionError(f"feature map must be (H, W, dim), got {Z.shape}")
    H, W, dim = Z.shape
    if isinstance(cb, (list, tuple)):
        if len(cb) != depth:
            raise DimensionError(f"got {len(cb)} per-depth codebooks for depth {depth}")
        K = max(b.size for b in cb)
        cid = b"\x00" * 32
    else:
        K = cb.size
        cid = cb.content_hash()
    flat = Z.reshape(H * W, dim)
    if mode == "deterministic":
        codes, residuals, partials = _encode_batch(flat, cb, depth, None, None)
    elif mode == "stochastic":
        rngs = [np.random.default_rng([seed, t]) for t in range(H * W)]
        codes, residuals, partials = _encode_batch(
            flat, cb, depth, tau if tau > 0 else None, rngs)
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    cmap = CodeStackMap(codes.reshape(H, W, depth), K, cid)
    return QuantizedMap(
        cmap,
        partials.reshape(depth, H, W, dim),
        residuals.reshape(depth + 1, H, W, dim),
    )


def decode_map(cmap: CodeStackMap, cb, d: int | None = None) -> np.ndarray:
    """(H, W, dim) partial-sum feature map at depth ``d`` from stored codes."""
    if d is None:
        d = cmap.depth
    if d < 0 or d > cmap.depth:
        raise ValueError(f"partial depth {d} outside [0, {cmap.depth}]")
    dim = _book_at(cb, 0).dim
    out = np.zeros((cmap.height, cmap.width, dim))
    for i in range(d):
        out += _book_at(cb, i).embeddings[cmap.codes[:, :, i]]
    return out


# ---------------------------------------------------------------------------
# losses and gradient plumbing
# ---------------------------------------------------------------------------


def commitment_loss(Z: ad.Tensor, partials: np.ndarray) -> ad.Tensor:
    """Sum over depths of the squared error to each (stop-gradient) partial
    sum, averaged over positions. Gradient flows only into ``Z``."""
    partials = np.asarray(partials, dtype=np.float64)
    if partials.ndim != Z.ndim + 1 or partials.shape[1:] != Z.shape:
        raise DimensionError(
            f"partials shape {partials.shape} does not extend Z shape {Z.shape}")
    positions = Z.size // Z.shape[-1]
    total = None
    for d in range(partials.shape[0]):
        diff = ad.sub(Z, ad.constant(partials[d]))
        term = ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / positions)
        total = term if total is None else ad.add(total, term)
    return total


def straight_through(Z: ad.Tensor, Zhat) -> ad.Tensor:
    """Forward takes the quantized value; backward passes gradients to Z
    unchanged. The quantized side receives no gradient."""
    data = Zhat.data if isinstance(Zhat, ad.Tensor) else np.asarray(Zhat, dtype=np.float64)
    if data.shape != Z.shape:
        raise DimensionError(f"shape mismatch {Z.shape} vs {data.shape}")
    out = ad.Tensor(data.copy(), requires_grad=Z.requires_grad)

    def backward(g):
        Z.accumulate_grad(g)

    ad._record(out, backward)
    return out


def capacity_check(cb: Codebook, depth: int, sample_count: int = 0,
                   rng: np.random.Generator | None = None) -> int:
    """Count distinct depth-``depth`` reconstructions the codebook can produce.

    Enumerates all code multisets when K^depth is small enough (sums are
    permutation-invariant), otherwise counts distinct sums over
    ``sample_count`` random tuples. The result never exceeds K^depth.
    """
    K = cb.size
    total = K ** depth
    seen: set[bytes] = set()
    if total <= _ENUMERATION_LIMIT:
        for combo in combinations_with_replacement(range(K), depth):
            acc = np.zeros(cb.dim)
            for k in combo:
                acc = acc + cb.embeddings[k]
            seen.add(acc.tobytes())
    else:
        if rng is None or sample_count < 1:
            raise ValidationError("sampled capacity check needs sample_count and rng")
        for _ in range(sample_count):
            combo = np.sort(rng.integers(0, K, size=depth))
            acc = np.zeros(cb.dim)
            for k in combo:
                acc = acc + cb.embeddings[int(k)]
            seen.add(acc.tobytes())
    return len(seen)


# ---------------------------------------------------------------------------
# RQCM serialization
# ---------------------------------------------------------------------------


def dump_code_map(cmap: CodeStackMap) -> bytes:
    buf = io.BytesIO()
    buf.write(RQCM_MAGIC)
    buf.write(struct.pack("<IIIII", RQCM_VERSION, cmap.height, cmap.width,
                          cmap.depth, cmap.K))
    buf.write(cmap.codebook_id)
    buf.write(cmap.codes.astype("<u4").tobytes())
    return buf.getvalue()


def parse_code_map(data: bytes) -> CodeStackMap:
    if data[:4] != RQCM_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {RQCM_MAGIC!r}")
    version, H, W, depth, K = struct.unpack_from("<IIIII", data, 4)
    if version != RQCM_VERSION:
        raise FormatError(f"unsupported code map version {version}")
    off = 24
    cid = data[off:off + 32]
    off += 32
    codes = np.frombuffer(data, dtype="<u4", count=H * W * depth, offset=off)
    return CodeStackMap(codes.reshape(H, W, depth).astype(np.int64), K, cid)


def save_code_map(cmap: CodeStackMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_code_map(cmap))


def load_code_map(path) -> CodeStackMap:
    with open(path, "rb") as fh:
        return parse_code_map(fh.read())
