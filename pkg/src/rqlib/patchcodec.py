"""Patch-transform codecs standing in for a learned image encoder/decoder.

Images are (H, W, 3) float64 arrays with values in [0, 1]. The codec maps
non-overlapping f x f patches to feature vectors and back, either through a
fixed orthonormal separable-cosine basis (low frequencies first, zigzag
ordered) or through a trainable linear pair. The stage-1 trainer couples the
codec with residual quantization: straight-through reconstruction loss plus
a commitment term, EMA codebook updates, and periodic restart of dead codes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codebook as cbm
from . import rqcore as rq
from .errors import DimensionError, DivergenceError, FormatError, ValidationError

RQPC_MAGIC = b"RQPC"
RQPC_VERSION = 1
MODE_ORTHONORMAL = "orthonormal"
MODE_TRAINABLE = "trainable"
_MODE_BYTE = {MODE_ORTHONORMAL: 0, MODE_TRAINABLE: 1}
_BYTE_MODE = {v: k for k, v in _MODE_BYTE.items()}


# ---------------------------------------------------------------------------
# orthonormal basis
# ---------------------------------------------------------------------------


def cosine_matrix(f: int) -> np.ndarray:
    """Orthonormal f x f type-II cosine transform matrix (rows are basis vectors)."""
    x = np.arange(f)
    u = np.arange(f)[:, None]
    C = np.cos(np.pi * (2 * x + 1) * u / (2 * f)) * np.sqrt(2.0 / f)
    C[0] /= np.sqrt(2.0)
    return C


def zigzag_order(f: int) -> list[tuple[int, int]]:
    """(u, v) frequency pairs ordered by antidiagonal, JPEG-style alternation."""
    order = []
    for s in range(2 * f - 1):
        us = [u for u in range(f) if 0 <= s - u < f]
        if s % 2 == 0:
            us = us[::-1]
        order.extend((u, s - u) for u in us)
    return order


def patch_basis(f: int) -> np.ndarray:
    """(3f^2, 3f^2) orthonormal basis over flattened f x f x 3 patches.

    Patch layout is channel-major: index = c*f^2 + x*f + y. Row 3*z + c holds
    the z-th zigzag-ranked 2-d cosine function in channel c, so the three DC
    rows come first.
    """
    C = cosine_matrix(f)
    zz = zigzag_order(f)
    n = 3 * f * f
    B = np.zeros((n, n))
    for z, (u, v) in enumerate(zz):
        plane = np.outer(C[u], C[v]).reshape(-1)
        for c in range(3):
            B[3 * z + c, c * f * f:(c + 1) * f * f] = plane
    return B


def patchify(X: np.ndarray, f: int) -> np.ndarray:
    """(H, W, 3f^2) channel-major flattened patches of an image."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {X.shape}")
    if X.shape[0] % f or X.shape[1] % f:
        raise DimensionError(f"image size {X.shape[:2]} not divisible by f={f}")
    H, W = X.shape[0] // f, X.shape[1] // f
    blocks = X.reshape(H, f, W, f, 3).transpose(0, 2, 4, 1, 3)
    return blocks.reshape(H, W, 3 * f * f)


def unpatchify(P: np.ndarray, f: int) -> np.ndarray:
    """Inverse of patchify."""
    H, W = P.shape[0], P.shape[1]
    blocks = P.reshape(H, W, 3, f, f).transpose(0, 3, 1, 4, 2)
    return blocks.reshape(H * f, W * f, 3)


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------


@dataclass
class CodecConfig:
    f: int
    n_z: int
    mode: str

    def __post_init__(self):
        if self.mode not in (MODE_ORTHONORMAL, MODE_TRAINABLE):
            raise ValidationError(f"unknown codec mode {self.mode!r}")
        if self.mode == MODE_ORTHONORMAL and self.n_z > 3 * self.f * self.f:
            raise ValidationError(
                f"orthonormal mode needs n_z <= 3f^2 = {3 * self.f * self.f}, got {self.n_z}")


class PatchCodec:
    """Linear patch encoder/decoder pair.

    ``enc`` maps flattened patches (3f^2) to features (n_z); ``dec`` maps
    back. Decoded pixels are clamped to [0, 1].
    """

    def __init__(self, cfg: CodecConfig, enc: np.ndarray, dec: np.ndarray):
        n = 3 * cfg.f * cfg.f
        enc = np.asarray(enc, dtype=np.float64)
        dec = np.asarray(dec, dtype=np.float64)
        if enc.shape != (n, cfg.n_z) or dec.shape != (cfg.n_z, n):
            raise DimensionError(
                f"codec matrices must be ({n},{cfg.n_z}) and ({cfg.n_z},{n})")
        self.cfg = cfg
        self.enc = enc
        self.dec = dec

    @classmethod
    def orthonormal(cls, f: int, n_z: int) -> "PatchCodec":
        cfg = CodecConfig(f, n_z, MODE_ORTHONORMAL)
        B = patch_basis(f)[:n_z]
        return cls(cfg, B.T.copy(), B.copy())

    @classmethod
    def trainable(cls, f: int, n_z: int, rng: np.random.Generator) -> "PatchCodec":
        cfg = CodecConfig(f, n_z, MODE_TRAINABLE)
        n = 3 * f * f
        enc = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, n_z))
        dec = rng.normal(0.0, 1.0 / np.sqrt(n_z), size=(n_z, n))
        return cls(cfg, enc, dec)

    def encode(self, X: np.ndarray) -> np.ndarray:
        """(H, W, n_z) feature map of an image."""
        return patchify(X, self.cfg.f) @ self.enc

    def decode(self, Zhat: np.ndarray) -> np.ndarray:
        """Image reconstruction from a feature map, clamped to [0, 1]."""
        Zhat = np.asarray(Zhat, dtype=np.float64)
        if Zhat.ndim != 3 or Zhat.shape[2] != self.cfg.n_z:
            raise DimensionError(f"feature map must be (H, W, {self.cfg.n_z}), got {Zhat.shape}")
        return np.clip(unpatchify(Zhat @ self.dec, self.cfg.f), 0.0, 1.0)


def recon_loss(X: np.ndarray, Xhat: np.ndarray) -> float:
    """Mean squared error over all pixels and channels."""
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.shape != Xhat.shape:
        raise DimensionError(f"shape mismatch {X.shape} vs {Xhat.shape}")
    return float(np.mean((X - Xhat) ** 2))


def per_depth_mse(X: np.ndarray, codec: PatchCodec, cb, depth: int) -> np.ndarray:
    """MSE of reconstructions from each partial-sum depth 1..depth."""
    Z = codec.encode(X)
    q = rq.quantize_feature_map(Z, cb, depth)
    return np.array([recon_loss(X, codec.decode(q.partials[d])) for d in range(depth)])


# ---------------------------------------------------------------------------
# stage-1 training
# ---------------------------------------------------------------------------


@dataclass
class Stage1Config:
    f: int = 4
    n_z: int = 16
    mode: str = MODE_ORTHONORMAL
    codebook_size: int = 256
    depth: int = 4
    beta: float = 0.25
    decay: float = 0.99
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    restart_threshold: float = 1.0
    restart_every: int = 1
    quantize: bool = True        # False bypasses quantization (plain autoencoder)
    per_depth_codebooks: bool = False
    seed: int = 0


@dataclass
class Stage1Result:
    codec: PatchCodec
    codebook: object            # Codebook, or list of per-depth Codebooks
    metrics: list = field(default_factory=list)


def _gather_features(images, codec_enc: np.ndarray, f: int) -> np.ndarray:
    return np.concatenate([patchify(X, f) @ codec_enc for X in images]).reshape(-1, codec_enc.shape[1])


def train_stage1(images, cfg: Stage1Config) -> Stage1Result:
    """Train codec matrices (trainable mode) and the codebook on a dataset.

    Orthonormal mode freezes the codec, reducing each step to an EMA
    clustering update of the codebook on fixed features. Emits one metrics
    dict per epoch. Raises DivergenceError on non-finite losses.
    """
    if not images:
        raise ValidationError("no input images")
    rng = np.random.default_rng([cfg.seed, 1])
    n = 3 * cfg.f * cfg.f
    if cfg.mode == MODE_TRAINABLE:
        codec = PatchCodec.trainable(cfg.f, cfg.n_z, np.random.default_rng([cfg.seed, 0]))
        enc_w = ad.parameter(codec.enc)
        dec_w = ad.parameter(codec.dec)
        opt = ad.AdamW({"enc": enc_w, "dec": dec_w}, lr=cfg.lr, beta1=cfg.beta1,
                       beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    else:
        codec = PatchCodec.orthonormal(cfg.f, cfg.n_z)
        enc_w = dec_w = opt = None

    books = None
    if cfg.quantize:
        feats = _gather_features(images, codec.enc, cfg.f)
        init_rng = np.random.default_rng([cfg.seed, 2])
        # seed from features, then re-seed from the pooled multi-depth residual
        # stream so codes cover every scale the recursion will ask them to serve
        if cfg.per_depth_codebooks:
            per_k = max(1, cfg.codebook_size // cfg.depth)
            books = [cbm.init_codebook(feats, per_k, init_rng) for _ in range(cfg.depth)]
            _, residuals, _ = rq._encode_batch(feats, books, cfg.depth, None, None)
            books = [cbm.init_codebook(residuals[d], per_k, init_rng)
                     for d in range(cfg.depth)]
        else:
            books = cbm.init_codebook(feats, cfg.codebook_size, init_rng)
            if cfg.depth > 1:
                _, residuals, _ = rq._encode_batch(feats, books, cfg.depth, None, None)
                pool = residuals[:-1].reshape(-1, cfg.n_z)
                books = cbm.init_codebook(pool, cfg.codebook_size, init_rng)

    patches_all = np.stack([patchify(X, cfg.f) for X in images])  # (N, H, W, n)
    N, Hs, Ws, _ = patches_all.shape
    T = Hs * Ws
    metrics = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        usage = np.zeros((cfg.depth, cfg.codebook_size), dtype=np.int64) if cfg.quantize else None
        epoch_recon = 0.0
        epoch_commit = 0.0
        batches = 0
        restart_pool = None
        for lo in range(0, N, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            P = patches_all[sel].reshape(-1, n)  # (B*T, 3f^2)
            tape = ad.Tape()
            with ad.recording(tape):
                if cfg.mode == MODE_TRAINABLE:
                    Z_t = ad.matmul(ad.constant(P), enc_w)
                else:
                    Z_t = ad.constant(P @ codec.enc)
                Z = Z_t.data
                if cfg.quantize:
                    codes, residuals, partials = rq._encode_batch(
                        Z, books, cfg.depth, None, None)
                    for d in range(cfg.depth):
                        book = rq._book_at(books, d)
                        usage[d, :book.size] += np.bincount(codes[:, d], minlength=book.size)
                    if cfg.per_depth_codebooks:
                        for d in range(cfg.depth):
                            cbm.ema_update(books[d], residuals[d], codes[:, d], cfg.decay)
                    else:
                        cbm.ema_update(
                            books,
                            residuals[:-1].reshape(-1, Z.shape[1]),
                            codes.T.reshape(-1),
                            cfg.decay,
                        )
                    Zq_t = rq.straight_through(Z_t, partials[-1])
                    commit_t = rq.commitment_loss(Z_t, partials)
                    restart_pool = residuals[:-1].reshape(-1, Z.shape[1])
                else:
                    Zq_t = Z_t
                    commit_t = ad.constant(0.0)
                if cfg.mode == MODE_TRAINABLE:
                    Xhat_t = ad.matmul(Zq_t, dec_w)
                else:
                    Xhat_t = ad.constant(Zq_t.data @ codec.dec)
                diff = ad.sub(Xhat_t, ad.constant(P))
                recon_t = ad.mean_all(ad.mul(diff, diff))
                loss = ad.add(recon_t, ad.scale(commit_t, cfg.beta))
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}: recon={recon_t.item()} "
                    f"commit={commit_t.item()}")
            if cfg.mode == MODE_TRAINABLE:
                tape.backward(loss)
                opt.step()
                opt.zero_grad()
            tape.clear()
            epoch_recon += recon_t.item()
            epoch_commit += commit_t.item()
            batches += 1
            if not cfg.quantize:
                restart_pool = Z
        if cfg.mode == MODE_TRAINABLE:
            codec.enc = enc_w.data
            codec.dec = dec_w.data
        if cfg.quantize and cfg.restart_every and (epoch + 1) % cfg.restart_every == 0:
            restart_rng = np.random.default_rng([cfg.seed, 3, epoch])
            if cfg.per_depth_codebooks:
                for b in books:
                    cbm.restart_unused(b, restart_pool, cfg.restart_threshold, restart_rng)
            else:
                cbm.restart_unused(books, restart_pool, cfg.restart_threshold, restart_rng)
        entry = {
            "epoch": epoch,
            "recon": epoch_recon / batches,
            "commit": epoch_commit / batches,
        }
        if cfg.quantize:
            entry["usage_entropy"] = cbm.usage_entropy(usage).tolist()
            if not cfg.per_depth_codebooks:
                books.usage_count = usage
        metrics.append(entry)
    return Stage1Result(codec, books, metrics)


# ---------------------------------------------------------------------------
# PPM input/output
# ---------------------------------------------------------------------------


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 into a [0,1] float image."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise FormatError("not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    if raw.size != width * height * 3:
        raise FormatError("truncated PPM pixel data")
    return raw.reshape(height, width, 3).astype(np.float64) / 255.0


def save_ppm(img: np.ndarray, path) -> None:
    """Write a [0,1] float image as binary P6 with maxval 255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {img.shape}")
    raw = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + raw.tobytes())


# ---------------------------------------------------------------------------
# RQPC serialization
# ---------------------------------------------------------------------------


def dump_codec(codec: PatchCodec) -> bytes:
    buf = io.BytesIO()
    buf.write(RQPC_MAGIC)
    buf.write(struct.pack("<IIIB", RQPC_VERSION, codec.cfg.f, codec.cfg.n_z,
                          _MODE_BYTE[codec.cfg.mode]))
    buf.write(codec.enc.astype("<f8").tobytes())
    buf.write(codec.dec.astype("<f8").tobytes())
    return buf.getvalue()


def parse_codec(data: bytes) -> PatchCodec:
    if data[:4] != RQPC_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {RQPC_MAGIC!r}")
    version, f, n_z, mode_byte = struct.unpack_from("<IIIB", data, 4)
    if version != RQPC_VERSION:
        raise FormatError(f"unsupported codec version {version}")
    if mode_byte not in _BYTE_MODE:
        raise FormatError(f"unknown codec mode byte {mode_byte}")
    n = 3 * f * f
    off = 17
    enc = np.frombuffer(data, dtype="<f8", count=n * n_z, offset=off).reshape(n, n_z)
    off += 8 * n * n_z
    dec = np.frombuffer(data, dtype="<f8", count=n_z * n, offset=off).reshape(n_z, n)
    return PatchCodec(CodecConfig(f, n_z, _BYTE_MODE[mode_byte]), enc.copy(), dec.copy())


def save_codec(codec: PatchCodec, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_codec(codec))


def load_codec(path) -> PatchCodec:
    with open(path, "rb") as fh:
        return parse_codec(fh.read())
