"""Two-axis autoregressive model over stacked code maps.

A spatial stack of masked self-attention blocks summarizes the code stacks
of previous raster positions into a context vector; a depth stack then
predicts the position's codes one depth at a time, conditioned on the
context and the embedding partial sums of the codes already fixed at that
position. Code embeddings are reused from the stage-1 codebook and kept
frozen, so the model's input sums coincide exactly with the quantizer's
partial-sum reconstructions.

Blocks are pre-norm residual (layer norm, attention, add; layer norm,
4x-wide GELU feed-forward, add) with a closing layer norm on each stack.
A single-axis baseline over the depth-minor flattened sequence is included
for complexity and throughput comparison, along with exact causal-attention
MAC accounting.
"""

from __future__ import annotations

import io
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .codebook import Codebook
from .errors import (
    DimensionError,
    DivergenceError,
    FormatError,
    ValidationError,
)
from .rqcore import _encode_batch, soft_label_batch

RQTM_MAGIC = b"RQTM"
RQTM_VERSION = 1
CONDITION_REPLACE = "replace"
CONDITION_PREPEND = "prepend"
_COND_BYTE = {CONDITION_REPLACE: 0, CONDITION_PREPEND: 1}
_BYTE_COND = {v: k for k, v in _COND_BYTE.items()}
_LN_EPS = 1e-5
_INIT_STD = 0.02


@dataclass
class ModelConfig:
    spatial_layers: int
    depth_layers: int
    embed_dim: int
    heads: int
    positions: int          # raster length T = H*W
    depth: int              # codes per position
    codebook_size: int
    code_dim: int
    dropout: float = 0.0
    condition_classes: int = 0
    condition_mode: str = CONDITION_REPLACE

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValidationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.positions < 1 or self.depth < 1:
            raise ValidationError("positions and depth must be >= 1")
        if self.condition_mode not in _COND_BYTE:
            raise ValidationError(f"unknown condition mode {self.condition_mode!r}")


class FlopCounter:
    """Exact multiply-accumulate tallies per component, reset per forward."""

    def __init__(self):
        self.tallies: dict[str, int] = {}

    def add(self, component: str, macs: int) -> None:
        self.tallies[component] = self.tallies.get(component, 0) + int(macs)

    def reset(self) -> None:
        self.tallies.clear()

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.tallies.items() if k.startswith(prefix))


class RQTransformerModel:
    """Parameter store for the two-axis model.

    ``params`` maps name -> trainable Tensor in serialization order;
    ``code_embed`` is the frozen code-embedding table shared with the
    quantizer codebook.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, ad.Tensor],
                 code_embed: np.ndarray, codebook_hash: bytes = b"\x00" * 32):
        self.cfg = cfg
        self.params = params
        self.code_embed = np.asarray(code_embed, dtype=np.float64)
        if self.code_embed.shape != (cfg.codebook_size, cfg.code_dim):
            raise DimensionError(
                f"code embedding table must be ({cfg.codebook_size}, {cfg.code_dim})")
        self.codebook_hash = bytes(codebook_hash)

    def param_count(self) -> dict[str, int]:
        trainable = sum(p.size for p in self.params.values())
        return {"trainable": trainable, "buffer": self.code_embed.size,
                "total": trainable + self.code_embed.size}


def _block_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in (
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]


def _init_block(params: dict, prefix: str, E: int, rng: np.random.Generator) -> None:
    params[f"{prefix}.ln1_g"] = ad.parameter(np.ones(E))
    params[f"{prefix}.ln1_b"] = ad.parameter(np.zeros(E))
    for n in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{n}"] = ad.parameter(rng.normal(0, _INIT_STD, (E, E)))
    for n in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{n}"] = ad.parameter(np.zeros(E))
    params[f"{prefix}.ln2_g"] = ad.parameter(np.ones(E))
    params[f"{prefix}.ln2_b"] = ad.parameter(np.zeros(E))
    params[f"{prefix}.w1"] = ad.parameter(rng.normal(0, _INIT_STD, (E, 4 * E)))
    params[f"{prefix}.b1"] = ad.parameter(np.zeros(4 * E))
    params[f"{prefix}.w2"] = ad.parameter(rng.normal(0, _INIT_STD, (4 * E, E)))
    params[f"{prefix}.b2"] = ad.parameter(np.zeros(E))


def build_model(cfg: ModelConfig, rng: np.random.Generator,
                codebook: Codebook | None = None) -> RQTransformerModel:
    """Fresh model; code embeddings come from ``codebook`` when given, else
    random. Positional tables start at zero, projections at normal(0, 0.02)."""
    E = cfg.embed_dim
    if codebook is not None:
        if codebook.size != cfg.codebook_size or codebook.dim != cfg.code_dim:
            raise DimensionError("codebook does not match model config")
        table = codebook.embeddings.copy()
        chash = codebook.content_hash()
    else:
        table = rng.normal(0, _INIT_STD, (cfg.codebook_size, cfg.code_dim))
        chash = b"\x00" * 32
    params: dict[str, ad.Tensor] = {}
    params["in_proj_w"] = ad.parameter(rng.normal(0, _INIT_STD, (cfg.code_dim, E)))
    params["in_proj_b"] = ad.parameter(np.zeros(E))
    params["pos_spatial"] = ad.parameter(np.zeros((cfg.positions, E)))
    params["pos_depth"] = ad.parameter(np.zeros((cfg.depth, E)))
    params["start_embed"] = ad.parameter(rng.normal(0, _INIT_STD, E))
    if cfg.condition_classes:
        params["cond_embed"] = ad.parameter(
            rng.normal(0, _INIT_STD, (cfg.condition_classes, E)))
    for i in range(cfg.spatial_layers):
        _init_block(params, f"sp{i}", E, rng)
    params["sp_final_g"] = ad.parameter(np.ones(E))
    params["sp_final_b"] = ad.parameter(np.zeros(E))
    for i in range(cfg.depth_layers):
        _init_block(params, f"dp{i}", E, rng)
    params["dp_final_g"] = ad.parameter(np.ones(E))
    params["dp_final_b"] = ad.parameter(np.zeros(E))
    params["head_w"] = ad.parameter(rng.normal(0, _INIT_STD, (E, cfg.codebook_size)))
    params["head_b"] = ad.parameter(np.zeros(cfg.codebook_size))
    return RQTransformerModel(cfg, params, table, chash)


# ---------------------------------------------------------------------------
# forward (training path, differentiable)
# ---------------------------------------------------------------------------


def _causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor,
            counter: FlopCounter | None, comp: str) -> ad.Tensor:
    if counter is not None:
        rows = x.size // x.shape[-1]
        counter.add(f"{comp}_proj_macs", rows * w.shape[0] * w.shape[1])
    return ad.add(ad.matmul(x, w), b)


def _attention(x: ad.Tensor, P: dict, pfx: str, heads: int, mask: np.ndarray,
               counter: FlopCounter | None, comp: str,
               drop: float, rng) -> ad.Tensor:
    Bx, L, E = x.shape
    hd = E // heads
    q = _linear(x, P[f"{pfx}.wq"], P[f"{pfx}.bq"], counter, comp)
    k = _linear(x, P[f"{pfx}.wk"], P[f"{pfx}.bk"], counter, comp)
    v = _linear(x, P[f"{pfx}.wv"], P[f"{pfx}.bv"], counter, comp)
    q = ad.transpose(ad.reshape(q, (Bx, L, heads, hd)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (Bx, L, heads, hd)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (Bx, L, heads, hd)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    att = ad.masked_softmax(scores, mask)
    if counter is not None:
        macs = Bx * heads * int(mask.sum()) * hd
        counter.add(f"{comp}_score_macs", macs)
        counter.add(f"{comp}_value_macs", macs)
    if drop > 0 and rng is not None:
        att = ad.dropout(att, drop, rng)
    ctx = ad.matmul(att, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (Bx, L, E))
    return _linear(ctx, P[f"{pfx}.wo"], P[f"{pfx}.bo"], counter, comp)


def _block(x: ad.Tensor, P: dict, pfx: str, heads: int, mask: np.ndarray,
           counter: FlopCounter | None, comp: str, drop: float, rng) -> ad.Tensor:
    a = _attention(ad.layer_norm(x, P[f"{pfx}.ln1_g"], P[f"{pfx}.ln1_b"], _LN_EPS),
                   P, pfx, heads, mask, counter, comp, drop, rng)
    if drop > 0 and rng is not None:
        a = ad.dropout(a, drop, rng)
    x = ad.add(x, a)
    h = ad.layer_norm(x, P[f"{pfx}.ln2_g"], P[f"{pfx}.ln2_b"], _LN_EPS)
    h = ad.gelu(_linear(h, P[f"{pfx}.w1"], P[f"{pfx}.b1"], counter, comp))
    h = _linear(h, P[f"{pfx}.w2"], P[f"{pfx}.b2"], counter, comp)
    if drop > 0 and rng is not None:
        h = ad.dropout(h, drop, rng)
    return ad.add(x, h)


def _as_batched_codes(S, cfg: ModelConfig) -> tuple[np.ndarray, bool]:
    S = np.asarray(S, dtype=np.int64)
    squeeze = S.ndim == 2
    if squeeze:
        S = S[None]
    if S.ndim != 3 or S.shape[1] != cfg.positions or S.shape[2] != cfg.depth:
        raise DimensionError(
            f"codes must be (B, {cfg.positions}, {cfg.depth}), got {S.shape}")
    if S.min() < 0 or S.max() >= cfg.codebook_size:
        raise ValueError(f"code out of range [0, {cfg.codebook_size})")
    return S, squeeze


def embedding_sums(code_embed: np.ndarray, S: np.ndarray):
    """Sequentially accumulated embedding sums matching the quantizer's order.

    Returns (full, prev, pref): full[b,t] is the whole-stack sum at position
    t; prev shifts it one position right (zeros at t=0); pref[b,t,j] is the
    inclusive prefix sum through depth j.
    """
    B, T, D = S.shape
    emb = code_embed[S]                      # (B, T, D, dim)
    dim = code_embed.shape[1]
    pref = np.zeros((B, T, D, dim))
    acc = np.zeros((B, T, dim))
    for d in range(D):
        acc = acc + emb[:, :, d]
        pref[:, :, d] = acc
    full = pref[:, :, D - 1]
    prev = np.zeros_like(full)
    prev[:, 1:] = full[:, :-1]
    return full, prev, pref


def spatial_inputs(model: RQTransformerModel, S, condition=None) -> ad.Tensor:
    """Sequence of spatial-stack inputs: position t>0 combines its positional
    row with the projected embedding sum of the previous position's codes;
    position 0 is the start (or class) embedding alone."""
    cfg = model.cfg
    S, squeeze = _as_batched_codes(S, cfg)
    B, T, _ = S.shape
    _, prev, _ = embedding_sums(model.code_embed, S)
    u = _assemble_spatial_inputs(model, prev, B, condition)
    return ad.reshape(u, u.shape[1:]) if squeeze else u


def _condition_rows(model: RQTransformerModel, condition, B: int) -> ad.Tensor:
    cfg = model.cfg
    cond = np.asarray(condition, dtype=np.int64)
    if cond.ndim == 0:
        cond = np.full(B, int(cond))
    if cond.shape != (B,):
        raise DimensionError(f"condition must be scalar or shape ({B},)")
    if cond.min() < 0 or cond.max() >= cfg.condition_classes:
        raise ValueError("condition class out of range")
    rows = ad.embedding(model.params["cond_embed"], cond)
    return ad.reshape(rows, (B, 1, cfg.embed_dim))


def _assemble_spatial_inputs(model: RQTransformerModel, prev: np.ndarray, B: int,
                             condition) -> ad.Tensor:
    cfg = model.cfg
    P = model.params
    E = cfg.embed_dim
    T = cfg.positions
    start = ad.add(ad.reshape(P["start_embed"], (1, 1, E)),
                   ad.constant(np.zeros((B, 1, E))))
    if condition is not None:
        if not cfg.condition_classes:
            raise ValidationError("model was built without condition classes")
        cond_rows = _condition_rows(model, condition, B)
        first = cond_rows if cfg.condition_mode == CONDITION_REPLACE else None
    else:
        cond_rows = None
        first = None
    if first is None:
        first = start
    if T > 1:
        proj = _linear(ad.constant(prev[:, 1:]), P["in_proj_w"], P["in_proj_b"], None, "")
        rest = ad.add(proj, ad.narrow(P["pos_spatial"], 0, 1, T - 1))
        u = ad.concat([first, rest], axis=1)
    else:
        u = first
    if condition is not None and cfg.condition_mode == CONDITION_PREPEND:
        u = ad.concat([cond_rows, u], axis=1)
    return u


@dataclass
class ForwardResult:
    logits: ad.Tensor        # (B, T, D, K) or (T, D, K)
    probs: np.ndarray        # softmax of logits over the code axis


def forward(model: RQTransformerModel, S, condition=None, *, training: bool = False,
            rng: np.random.Generator | None = None,
            counter: FlopCounter | None = None) -> ForwardResult:
    """Full teacher-forced pass producing next-code logits for every
    (position, depth) slot."""
    cfg = model.cfg
    P = model.params
    S, squeeze = _as_batched_codes(S, cfg)
    B, T, D = S.shape
    E = cfg.embed_dim
    drop = cfg.dropout if training else 0.0
    _, prev, pref = embedding_sums(model.code_embed, S)

    u = _assemble_spatial_inputs(model, prev, B, condition)
    L = u.shape[1]
    mask = _causal_mask(L)
    x = u
    for i in range(cfg.spatial_layers):
        x = _block(x, P, f"sp{i}", cfg.heads, mask, counter, "spatial", drop, rng)
    h = ad.layer_norm(x, P["sp_final_g"], P["sp_final_b"], _LN_EPS)
    if L != T:  # prepended condition token: context for position t sits at index t+1
        h = ad.narrow(h, 1, 1, T)

    v1 = ad.add(ad.reshape(h, (B, T, 1, E)), ad.narrow(P["pos_depth"], 0, 0, 1))
    if D > 1:
        proj = _linear(ad.constant(pref[:, :, :D - 1]), P["in_proj_w"], P["in_proj_b"],
                       None, "")
        rest = ad.add(proj, ad.narrow(P["pos_depth"], 0, 1, D - 1))
        v = ad.concat([v1, rest], axis=2)
    else:
        v = v1
    y = ad.reshape(v, (B * T, D, E))
    dmask = _causal_mask(D)
    for i in range(cfg.depth_layers):
        y = _block(y, P, f"dp{i}", cfg.heads, dmask, counter, "depth", drop, rng)
    y = ad.layer_norm(y, P["dp_final_g"], P["dp_final_b"], _LN_EPS)
    logits = _linear(y, P["head_w"], P["head_b"], counter, "head")
    logits = ad.reshape(logits, (B, T, D, cfg.codebook_size))

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=-1, keepdims=True)
    if squeeze:
        logits = ad.reshape(logits, (T, D, cfg.codebook_size))
        probs = probs[0]
    return ForwardResult(logits, probs)


def one_hot_targets(S: np.ndarray, K: int) -> np.ndarray:
    S = np.asarray(S, dtype=np.int64)
    out = np.zeros(S.shape + (K,))
    np.put_along_axis(out, S[..., None], 1.0, axis=-1)
    return out


def nll_loss(model: RQTransformerModel, S, targets=None, condition=None, *,
             training: bool = False, rng=None) -> ad.Tensor:
    """Mean cross-entropy over every (position, depth) slot.

    ``targets`` may be one-hot/soft distributions shaped like
    (..., positions, depth, K); by default the observed codes supervise
    themselves (one-hot).
    """
    res = forward(model, S, condition, training=training, rng=rng)
    K = model.cfg.codebook_size
    if targets is None:
        Sb, _ = _as_batched_codes(S, model.cfg)
        targets = one_hot_targets(Sb, K).reshape(res.logits.shape)
    else:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != res.logits.shape:
            raise DimensionError(
                f"targets shape {targets.shape} != logits shape {res.logits.shape}")
    flat = ad.reshape(res.logits, (-1, K))
    return ad.cross_entropy_soft(flat, targets.reshape(-1, K))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"      # or "cosine"
    seed: int = 0
    soft_label_tau: float | None = None
    stochastic_tau: float | None = None
    eval_every: int = 50
    target_nll: float | None = None


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)
    steps_run: int = 0
    final_nll: float = float("nan")


def _draw_example(item, codebook, depth, tcfg: TrainConfig, step: int, slot: int):
    """Codes and targets for one dataset item, re-encoding stochастically and
    softening labels when configured. Feature items carry a (T, code_dim)
    array under "features"; code items a (T, depth) array under "codes"."""
    if "features" in item:
        feats = item["features"]
        T = feats.shape[0]
        if tcfg.stochastic_tau is not None and tcfg.stochastic_tau > 0:
            rngs = [np.random.default_rng([tcfg.seed, 12, step, slot, t]) for t in range(T)]
            codes, residuals, _ = _encode_batch(feats, codebook, depth,
                                                tcfg.stochastic_tau, rngs)
        else:
            codes, residuals, _ = _encode_batch(feats, codebook, depth, None, None)
        if tcfg.soft_label_tau is not None and tcfg.soft_label_tau > 0:
            target = np.stack(
                [soft_label_batch(residuals[d], codebook, tcfg.soft_label_tau)
                 for d in range(depth)], axis=1)   # (T, depth, K)
        else:
            target = None
        return codes, target
    return np.asarray(item["codes"], dtype=np.int64), None


def train_model(model: RQTransformerModel, dataset, tcfg: TrainConfig,
                codebook: Codebook | None = None) -> TrainResult:
    """Minibatch AdamW training; deterministic given the seed (timing fields
    aside). Dataset items are dicts holding either "codes" (T, depth) or
    "features" (T, code_dim); features require the codebook and enable the
    stochastic-resampling and soft-label modes."""
    if not dataset:
        raise ValidationError("empty training dataset")
    needs_features = (tcfg.soft_label_tau is not None) or (tcfg.stochastic_tau is not None)
    if needs_features and any("features" not in it for it in dataset):
        raise ValidationError("soft-label / stochastic modes need feature-map items")
    if needs_features and codebook is None:
        raise ValidationError("soft-label / stochastic modes need the codebook")
    cfg = model.cfg
    opt = ad.AdamW(model.params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2,
                   eps=tcfg.eps, weight_decay=tcfg.weight_decay)
    data_rng = np.random.default_rng([tcfg.seed, 10])
    drop_rng = np.random.default_rng([tcfg.seed, 11])
    result = TrainResult()
    t0 = time.perf_counter()
    K = cfg.codebook_size
    for step in range(tcfg.steps):
        sel = data_rng.integers(0, len(dataset), size=tcfg.batch_size)
        batch_codes = []
        batch_targets = []
        batch_conds = []
        for slot, idx in enumerate(sel):
            codes, target = _draw_example(dataset[int(idx)], codebook, cfg.depth,
                                          tcfg, step, slot)
            batch_codes.append(codes)
            batch_conds.append(dataset[int(idx)].get("condition"))
            if target is not None:
                batch_targets.append(target)
        S = np.stack(batch_codes)
        targets = np.stack(batch_targets) if batch_targets else None
        if any(c is not None for c in batch_conds):
            if any(c is None for c in batch_conds):
                raise ValidationError("either all or no dataset items may carry a condition")
            condition = np.asarray(batch_conds, dtype=np.int64)
        else:
            condition = None
        if tcfg.lr_schedule == "cosine":
            lr = tcfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / max(1, tcfg.steps)))
        else:
            lr = tcfg.lr
        tape = ad.Tape()
        with ad.recording(tape):
            loss = nll_loss(model, S, targets, condition, training=True, rng=drop_rng)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite training loss at step {step}")
        tape.backward(loss)
        opt.step(lr=lr)
        opt.zero_grad()
        tape.clear()
        result.trace.append({
            "step": step,
            "nll": float(loss.data),
            "lr": float(lr),
            "seconds": time.perf_counter() - t0,
        })
        result.steps_run = step + 1
        if tcfg.target_nll is not None and (step + 1) % tcfg.eval_every == 0:
            nll = evaluate_nll(model, dataset, codebook)
            result.final_nll = nll
            if nll < tcfg.target_nll:
                break
    if not np.isfinite(result.final_nll):
        result.final_nll = evaluate_nll(model, dataset, codebook)
    return result


def model_grad_check(model: RQTransformerModel, S, h: float = 1e-5,
                     params: list[str] | None = None) -> dict[str, float]:
    """Finite-difference check of the one-hot NLL gradient for each named
    parameter (all by default). Returns name -> max relative error."""
    names = list(model.params) if params is None else params
    out = {}
    for name in names:
        saved = model.params[name]

        def f(t, name=name):
            model.params[name] = t
            try:
                return nll_loss(model, S)
            finally:
                model.params[name] = saved

        out[name] = ad.grad_check(f, ad.Tensor(saved.data.copy()), h=h)
    return out


def evaluate_nll(model: RQTransformerModel, dataset, codebook=None,
                 batch_size: int = 16) -> float:
    """Mean one-hot NLL (nats/code) over the dataset, deterministic codes."""
    cfg = model.cfg
    total = 0.0
    count = 0
    maps = []
    conds = []
    for item in dataset:
        if "codes" in item:
            maps.append(np.asarray(item["codes"], dtype=np.int64))
        else:
            codes, _, _ = _encode_batch(item["features"], codebook, cfg.depth, None, None)
            maps.append(codes)
        conds.append(item.get("condition"))
    conditioned = all(c is not None for c in conds) and conds
    for lo in range(0, len(maps), batch_size):
        S = np.stack(maps[lo:lo + batch_size])
        cond = (np.asarray(conds[lo:lo + batch_size], dtype=np.int64)
                if conditioned else None)
        loss = nll_loss(model, S, condition=cond)
        total += float(loss.data) * S.shape[0]
        count += S.shape[0]
    return total / count


# ---------------------------------------------------------------------------
# numpy inference path with per-layer KV caches
# ---------------------------------------------------------------------------


def _np_ln(x, g, b, eps=_LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    u = np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _StackState:
    """Incremental state for one pre-norm attention stack (numpy weights)."""

    def __init__(self, weights: list[dict], final_g, final_b, heads: int,
                 batch: int, max_len: int):
        self.weights = weights
        self.final_g = final_g
        self.final_b = final_b
        self.heads = heads
        E = final_g.shape[0]
        hd = E // heads
        self.k = [np.zeros((batch, heads, max_len, hd)) for _ in weights]
        self.v = [np.zeros((batch, heads, max_len, hd)) for _ in weights]
        self.t = 0

    def step(self, x: np.ndarray) -> np.ndarray:
        """Append one token (B, E) and return the stack output for it."""
        B, E = x.shape
        H = self.heads
        hd = E // H
        t = self.t
        for li, w in enumerate(self.weights):
            xn = _np_ln(x, w["ln1_g"], w["ln1_b"])
            q = (xn @ w["wq"] + w["bq"]).reshape(B, H, hd)
            self.k[li][:, :, t] = (xn @ w["wk"] + w["bk"]).reshape(B, H, hd)
            self.v[li][:, :, t] = (xn @ w["wv"] + w["bv"]).reshape(B, H, hd)
            keys = self.k[li][:, :, :t + 1]
            vals = self.v[li][:, :, :t + 1]
            scores = np.einsum("bhe,bhte->bht", q, keys) / np.sqrt(hd)
            att = _np_softmax(scores)
            ctx = np.einsum("bht,bhte->bhe", att, vals).reshape(B, E)
            x = x + ctx @ w["wo"] + w["bo"]
            xn2 = _np_ln(x, w["ln2_g"], w["ln2_b"])
            x = x + _np_gelu(xn2 @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
        self.t = t + 1
        return _np_ln(x, self.final_g, self.final_b)


def _np_stack_full(weights, final_g, final_b, heads: int, x: np.ndarray) -> np.ndarray:
    """Full causal forward of a short sequence (B, L, E), no cache."""
    B, L, E = x.shape
    H = heads
    hd = E // H
    mask = _causal_mask(L)
    for w in weights:
        xn = _np_ln(x, w["ln1_g"], w["ln1_b"])
        q = (xn @ w["wq"] + w["bq"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        k = (xn @ w["wk"] + w["bk"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        v = (xn @ w["wv"] + w["bv"]).reshape(B, L, H, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
        scores = np.where(mask, scores, -np.inf)
        ctx = (_np_softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(B, L, E)
        x = x + ctx @ w["wo"] + w["bo"]
        xn2 = _np_ln(x, w["ln2_g"], w["ln2_b"])
        x = x + _np_gelu(xn2 @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]
    return _np_ln(x, final_g, final_b)


def _extract_block_weights(params: dict, prefix: str, count: int) -> list[dict]:
    out = []
    for i in range(count):
        out.append({n.split(".", 1)[1]: params[f"{prefix}{i}.{n.split('.', 1)[1]}"].data
                    for n in _block_param_names(f"{prefix}{i}")})
    return out


def filter_logits(logits: np.ndarray, top_k: int | None, top_p: float) -> np.ndarray:
    """Top-k then nucleus filtering of one (K,) logit row; returns the
    renormalized probability vector."""
    K = logits.shape[0]
    if top_k is not None and not (1 <= top_k <= K):
        raise ValidationError(f"top_k must be in [1, {K}], got {top_k}")
    if not (0.0 < top_p <= 1.0):
        raise ValidationError(f"top_p must be in (0, 1], got {top_p}")
    masked = logits.copy()
    if top_k is not None and top_k < K:
        kth = np.partition(masked, K - top_k)[K - top_k]
        masked[masked < kth] = -np.inf
    p = _np_softmax(masked[None])[0]
    if top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        # tolerance so an exact-mass prefix is not skipped over by rounding
        cut = int(np.searchsorted(csum, top_p - 1e-12)) + 1
        keep = np.zeros(K, dtype=bool)
        keep[order[:cut]] = True
        p = np.where(keep, p, 0.0)
        p = p / p.sum()
    return p


def _sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    u = rng.random()
    return min(int(np.searchsorted(cdf, u, side="right")), p.shape[0] - 1)


def sample(model: RQTransformerModel, count: int, *, temperature: float = 1.0,
           top_k: int | None = None, top_p: float = 1.0, condition=None,
           seed: int = 0, start_index: int = 0) -> np.ndarray:
    """Generate ``count`` code stacks of shape (positions, depth).

    Raster-order generation with an inner depth loop. Each sequence draws
    from its own RNG stream keyed by (seed, global sequence index), so
    results are reproducible across runs and batch sizes.
    """
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    cfg = model.cfg
    P = {k: v for k, v in model.params.items()}
    T, D, E, K = cfg.positions, cfg.depth, cfg.embed_dim, cfg.codebook_size
    sp_w = _extract_block_weights(P, "sp", cfg.spatial_layers)
    dp_w = _extract_block_weights(P, "dp", cfg.depth_layers)
    in_w = P["in_proj_w"].data
    in_b = P["in_proj_b"].data
    pos_sp = P["pos_spatial"].data
    pos_dp = P["pos_depth"].data
    head_w = P["head_w"].data
    head_b = P["head_b"].data
    table = model.code_embed
    rngs = [np.random.default_rng([seed, 20, start_index + i]) for i in range(count)]

    prepend = condition is not None and cfg.condition_mode == CONDITION_PREPEND
    max_len = T + (1 if prepend else 0)
    state = _StackState(sp_w, P["sp_final_g"].data, P["sp_final_b"].data,
                        cfg.heads, count, max_len)
    if condition is not None:
        if not cfg.condition_classes:
            raise ValidationError("model was built without condition classes")
        cond = np.asarray(condition, dtype=np.int64)
        if cond.ndim == 0:
            cond = np.full(count, int(cond))
        if cond.min() < 0 or cond.max() >= cfg.condition_classes:
            raise ValueError("condition class out of range")
        cond_rows = P["cond_embed"].data[cond]
    out = np.zeros((count, T, D), dtype=np.int64)
    for t in range(T):
        if t == 0:
            if condition is not None and prepend:
                state.step(cond_rows)
                u = np.broadcast_to(P["start_embed"].data, (count, E)).copy()
            elif condition is not None:
                u = cond_rows.copy()
            else:
                u = np.broadcast_to(P["start_embed"].data, (count, E)).copy()
        else:
            u = pos_sp[t] + esum @ in_w + in_b
        h = state.step(u)
        esum = np.zeros((count, table.shape[1]))
        v_rows = np.zeros((count, D, E))
        for d in range(D):
            v_rows[:, d] = pos_dp[d] + (h if d == 0 else esum @ in_w + in_b)
            y = _np_stack_full(dp_w, P["dp_final_g"].data, P["dp_final_b"].data,
                               cfg.heads, v_rows[:, :d + 1])
            logits = (y[:, -1] @ head_w + head_b) / temperature
            for i in range(count):
                p = filter_logits(logits[i], top_k, top_p)
                code = _sample_index(p, rngs[i])
                out[i, t, d] = code
                esum[i] += table[code]
    return out


# ---------------------------------------------------------------------------
# naive single-axis baseline over the flattened sequence
# ---------------------------------------------------------------------------


class NaiveModel:
    """Conventional causal transformer over the depth-minor flattened codes."""

    def __init__(self, cfg: ModelConfig, layers: int, params: dict, code_embed: np.ndarray):
        self.cfg = cfg
        self.layers = layers
        self.params = params
        self.code_embed = np.asarray(code_embed, dtype=np.float64)

    def param_count(self) -> dict[str, int]:
        trainable = sum(p.size for p in self.params.values())
        return {"trainable": trainable, "buffer": self.code_embed.size,
                "total": trainable + self.code_embed.size}


def matched_naive_layers(cfg: ModelConfig) -> int:
    """Layer count giving the baseline the same block budget."""
    return cfg.spatial_layers + cfg.depth_layers


def build_naive_model(cfg: ModelConfig, rng: np.random.Generator,
                      layers: int | None = None,
                      codebook: Codebook | None = None) -> NaiveModel:
    E = cfg.embed_dim
    L = cfg.positions * cfg.depth
    layers = matched_naive_layers(cfg) if layers is None else layers
    table = (codebook.embeddings.copy() if codebook is not None
             else rng.normal(0, _INIT_STD, (cfg.codebook_size, cfg.code_dim)))
    params: dict[str, ad.Tensor] = {}
    params["in_proj_w"] = ad.parameter(rng.normal(0, _INIT_STD, (cfg.code_dim, E)))
    params["in_proj_b"] = ad.parameter(np.zeros(E))
    params["pos"] = ad.parameter(np.zeros((L, E)))
    params["start_embed"] = ad.parameter(rng.normal(0, _INIT_STD, E))
    for i in range(layers):
        _init_block(params, f"nv{i}", E, rng)
    params["final_g"] = ad.parameter(np.ones(E))
    params["final_b"] = ad.parameter(np.zeros(E))
    params["head_w"] = ad.parameter(rng.normal(0, _INIT_STD, (E, cfg.codebook_size)))
    params["head_b"] = ad.parameter(np.zeros(cfg.codebook_size))
    return NaiveModel(cfg, layers, params, table)


def naive_forward(model: NaiveModel, S, *, training: bool = False, rng=None,
                  counter: FlopCounter | None = None) -> ForwardResult:
    """Causal forward over the flattened (B, T*D) code sequence."""
    cfg = model.cfg
    P = model.params
    S = np.asarray(S, dtype=np.int64)
    L_expected = cfg.positions * cfg.depth
    if S.ndim == 3:
        flat, squeeze = S.reshape(S.shape[0], -1), False
    elif S.ndim == 2 and S.shape == (cfg.positions, cfg.depth):
        flat, squeeze = S.reshape(1, -1), True
    elif S.ndim == 2:
        flat, squeeze = S, False
    elif S.ndim == 1:
        flat, squeeze = S.reshape(1, -1), True
    else:
        raise DimensionError(f"cannot interpret code array of shape {S.shape}")
    if flat.shape[1] != L_expected:
        raise DimensionError(f"flattened length {flat.shape[1]} != {L_expected}")
    B, L = flat.shape
    E = cfg.embed_dim
    emb = model.code_embed[flat]            # (B, L, dim)
    prev = np.zeros_like(emb)
    prev[:, 1:] = emb[:, :-1]
    drop = cfg.dropout if training else 0.0
    start = ad.add(ad.reshape(P["start_embed"], (1, 1, E)),
                   ad.constant(np.zeros((B, 1, E))))
    proj = _linear(ad.constant(prev[:, 1:]), P["in_proj_w"], P["in_proj_b"], None, "")
    rest = ad.add(proj, ad.narrow(P["pos"], 0, 1, L - 1))
    x = ad.concat([start, rest], axis=1)
    mask = _causal_mask(L)
    for i in range(model.layers):
        x = _block(x, P, f"nv{i}", cfg.heads, mask, counter, "naive", drop, rng)
    x = ad.layer_norm(x, P["final_g"], P["final_b"], _LN_EPS)
    logits = _linear(x, P["head_w"], P["head_b"], counter, "naive_head")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=-1, keepdims=True)
    if squeeze:
        logits = ad.reshape(logits, (L, cfg.codebook_size))
        probs = probs[0]
    return ForwardResult(logits, probs)


def naive_sample(model: NaiveModel, count: int, *, temperature: float = 1.0,
                 top_k: int | None = None, top_p: float = 1.0, seed: int = 0,
                 start_index: int = 0) -> np.ndarray:
    """Generate (count, positions, depth) code stacks token by token."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    cfg = model.cfg
    P = model.params
    L = cfg.positions * cfg.depth
    E = cfg.embed_dim
    weights = _extract_block_weights(P, "nv", model.layers)
    state = _StackState(weights, P["final_g"].data, P["final_b"].data,
                        cfg.heads, count, L)
    in_w = P["in_proj_w"].data
    in_b = P["in_proj_b"].data
    pos = P["pos"].data
    head_w = P["head_w"].data
    head_b = P["head_b"].data
    rngs = [np.random.default_rng([seed, 21, start_index + i]) for i in range(count)]
    out = np.zeros((count, L), dtype=np.int64)
    for s in range(L):
        if s == 0:
            u = np.broadcast_to(P["start_embed"].data, (count, E)).copy()
        else:
            u = pos[s] + model.code_embed[out[:, s - 1]] @ in_w + in_b
        h = state.step(u)
        logits = (h @ head_w + head_b) / temperature
        for i in range(count):
            p = filter_logits(logits[i], top_k, top_p)
            out[i, s] = _sample_index(p, rngs[i])
    return out.reshape(count, cfg.positions, cfg.depth)


# ---------------------------------------------------------------------------
# complexity accounting and benchmarking
# ---------------------------------------------------------------------------


def causal_attention_macs(L: int, embed_dim: int) -> int:
    """Exact per-layer score MACs of causal attention over length L: each
    query row t attends to t keys (self inclusive), each key costing one MAC
    per feature, summed over heads."""
    return embed_dim * L * (L + 1) // 2


def flop_report(cfg: ModelConfig, naive_layers: int | None = None,
                seed: int = 0) -> dict:
    """Measured vs closed-form attention MACs for both architectures (batch 1)
    plus the asymptotic complexity-ratio prediction."""
    rng = np.random.default_rng([seed, 30])
    model = build_model(cfg, rng)
    naive_layers = matched_naive_layers(cfg) if naive_layers is None else naive_layers
    naive = build_naive_model(cfg, rng, naive_layers)
    S = np.random.default_rng([seed, 31]).integers(
        0, cfg.codebook_size, size=(cfg.positions, cfg.depth))

    counter = FlopCounter()
    forward(model, S, counter=counter)
    measured_spatial = counter.tallies.get("spatial_score_macs", 0)
    measured_depth = counter.tallies.get("depth_score_macs", 0)
    measured_attn = (measured_spatial + measured_depth
                     + counter.tallies.get("spatial_value_macs", 0)
                     + counter.tallies.get("depth_value_macs", 0))
    rq_tallies = dict(counter.tallies)

    counter = FlopCounter()
    naive_forward(naive, S, counter=counter)
    measured_naive = counter.tallies.get("naive_score_macs", 0)
    measured_naive_attn = measured_naive + counter.tallies.get("naive_value_macs", 0)

    T, D, E = cfg.positions, cfg.depth, cfg.embed_dim
    predicted_spatial = cfg.spatial_layers * causal_attention_macs(T, E)
    predicted_depth = cfg.depth_layers * T * causal_attention_macs(D, E)
    predicted_naive = naive_layers * causal_attention_macs(T * D, E)
    ratio_predicted = (cfg.spatial_layers * T**2 + cfg.depth_layers * T * D**2) / (
        naive_layers * (T * D) ** 2)
    ratio_measured = (measured_spatial + measured_depth) / measured_naive
    return {
        "config": {"positions": T, "depth": D, "embed_dim": E, "heads": cfg.heads,
                   "spatial_layers": cfg.spatial_layers,
                   "depth_layers": cfg.depth_layers, "naive_layers": naive_layers},
        "measured_spatial_score_macs": measured_spatial,
        "measured_depth_score_macs": measured_depth,
        "measured_attention_macs": measured_attn,
        "measured_naive_score_macs": measured_naive,
        "measured_naive_attention_macs": measured_naive_attn,
        "predicted_spatial_score_macs": predicted_spatial,
        "predicted_depth_score_macs": predicted_depth,
        "predicted_naive_score_macs": predicted_naive,
        "ratio_measured": ratio_measured,
        "ratio_predicted": ratio_predicted,
        "component_tallies": rq_tallies,
        "param_count": model.param_count(),
        "naive_param_count": naive.param_count(),
    }


def benchmark_sampling(cfg: ModelConfig, batch_sizes=(4, 16, 64), seed: int = 0,
                       naive_layers: int | None = None) -> dict:
    """Wall-clock images/second for both architectures at matched block
    budgets, excluding any stage-1 decode work."""
    rng = np.random.default_rng([seed, 32])
    model = build_model(cfg, rng)
    naive = build_naive_model(cfg, rng, naive_layers)
    rows = []
    for bs in batch_sizes:
        t0 = time.perf_counter()
        sample(model, bs, seed=seed)
        rq_dt = time.perf_counter() - t0
        t0 = time.perf_counter()
        naive_sample(naive, bs, seed=seed)
        nv_dt = time.perf_counter() - t0
        rows.append({
            "batch_size": bs,
            "rq_seconds": rq_dt,
            "naive_seconds": nv_dt,
            "rq_images_per_second": bs / rq_dt,
            "naive_images_per_second": bs / nv_dt,
            "speedup": nv_dt / rq_dt,
        })
    return {
        "batches": rows,
        "flops": flop_report(cfg, naive_layers=naive_layers, seed=seed),
    }


# ---------------------------------------------------------------------------
# RQTM checkpoint serialization
# ---------------------------------------------------------------------------


def dump_model(model: RQTransformerModel) -> bytes:
    cfg = model.cfg
    buf = io.BytesIO()
    buf.write(RQTM_MAGIC)
    buf.write(struct.pack(
        "<IIIIIIIIIIB", RQTM_VERSION, cfg.spatial_layers, cfg.depth_layers,
        cfg.embed_dim, cfg.heads, cfg.positions, cfg.depth, cfg.codebook_size,
        cfg.code_dim, cfg.condition_classes, _COND_BYTE[cfg.condition_mode]))
    buf.write(struct.pack("<d", cfg.dropout))
    buf.write(model.codebook_hash)
    buf.write(model.code_embed.astype("<f8").tobytes())
    for p in model.params.values():
        buf.write(p.data.astype("<f8").tobytes())
    return buf.getvalue()


def parse_model(data: bytes) -> RQTransformerModel:
    if data[:4] != RQTM_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {RQTM_MAGIC!r}")
    fields = struct.unpack_from("<IIIIIIIIIIB", data, 4)
    version = fields[0]
    if version != RQTM_VERSION:
        raise FormatError(f"unsupported model version {version}")
    off = 4 + struct.calcsize("<IIIIIIIIIIB")
    (dropout,) = struct.unpack_from("<d", data, off)
    off += 8
    cfg = ModelConfig(
        spatial_layers=fields[1], depth_layers=fields[2], embed_dim=fields[3],
        heads=fields[4], positions=fields[5], depth=fields[6],
        codebook_size=fields[7], code_dim=fields[8], dropout=dropout,
        condition_classes=fields[9], condition_mode=_BYTE_COND[fields[10]])
    chash = data[off:off + 32]
    off += 32
    skeleton = build_model(cfg, np.random.default_rng(0))
    n = cfg.codebook_size * cfg.code_dim
    table = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(
        cfg.codebook_size, cfg.code_dim)
    off += 8 * n
    params: dict[str, ad.Tensor] = {}
    for name, ref in skeleton.params.items():
        cnt = ref.size
        arr = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(ref.shape)
        params[name] = ad.parameter(arr.copy())
        off += 8 * cnt
    if off != len(data):
        raise FormatError("trailing bytes in model checkpoint")
    return RQTransformerModel(cfg, params, table.copy(), chash)


def save_model(model: RQTransformerModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_model(model))


def load_model(path) -> RQTransformerModel:
    with open(path, "rb") as fh:
        return parse_model(fh.read())
