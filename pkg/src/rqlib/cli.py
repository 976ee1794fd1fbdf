"""Command-line surface: stage-1/stage-2 training, encoding, sampling,
rate-distortion sweeps, benchmarks, and self-checks.

Every command is reproducible: (config, seed) determines all output bytes
except timing fields. Exit codes: 0 ok, 2 config error, 3 divergence,
4 artifact mismatch.

The ``--threads N`` flag caps BLAS threading; it must take effect before
numpy loads, so heavy imports happen inside command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_MISMATCH = 4

_THREAD_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS")


def _apply_thread_limit(argv: list[str]) -> None:
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            for var in _THREAD_ENV:
                os.environ[var] = argv[i + 1]
            return
        if a.startswith("--threads="):
            for var in _THREAD_ENV:
                os.environ[var] = a.split("=", 1)[1]
            return


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rqlib", description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, default="out")
    p.add_argument("--config", type=str, default=None,
                   help="JSON file of defaults; explicit flags override")
    p.add_argument("--threads", type=str, default=None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-stage1", help="train codec + codebook on a PPM directory")
    s.add_argument("--data", type=str, required=False)
    s.add_argument("--f", type=int, default=4)
    s.add_argument("--n-z", type=int, default=48)
    s.add_argument("--mode", choices=("orthonormal", "trainable"), default="orthonormal")
    s.add_argument("--codebook-size", type=int, default=256)
    s.add_argument("--depth", type=int, default=4)
    s.add_argument("--beta", type=float, default=0.25)
    s.add_argument("--decay", type=float, default=0.99)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--per-depth-codebooks", action="store_true")

    s = sub.add_parser("encode", help="encode one image to a code map + per-depth recons")
    s.add_argument("image", type=str)
    s.add_argument("--codebook", type=str, required=True)
    s.add_argument("--codec", type=str, required=True)
    s.add_argument("--depth", type=int, default=None)

    s = sub.add_parser("decode", help="decode a code map back to an image")
    s.add_argument("codemap", type=str)
    s.add_argument("--codebook", type=str, required=True)
    s.add_argument("--codec", type=str, required=True)
    s.add_argument("--depth", type=int, default=None)

    s = sub.add_parser("sweep", help="rate-distortion table over (K, D) cells")
    s.add_argument("--data", type=str, required=False)
    s.add_argument("--codebook-sizes", type=_int_list, default=[64, 256])
    s.add_argument("--depths", type=_int_list, default=[1, 4])
    s.add_argument("--cells", type=str, default=None,
                   help="explicit K:D list, e.g. 64:1,4096:1,64:4 (overrides the grid)")
    s.add_argument("--betas", type=_float_list, default=[0.25])
    s.add_argument("--holdout", type=int, default=16)
    s.add_argument("--f", type=int, default=4)
    s.add_argument("--n-z", type=int, default=48)
    s.add_argument("--mode", choices=("orthonormal", "trainable"), default="orthonormal")
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--decay", type=float, default=0.99)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--per-depth-codebooks", action="store_true")

    s = sub.add_parser("train-ar", help="train the two-axis model on encoded images")
    s.add_argument("--data", type=str, required=False)
    s.add_argument("--stage1", type=str, required=True,
                   help="directory holding codebook.rqcb and codec.rqpc")
    s.add_argument("--depth", type=int, default=4)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    s.add_argument("--weight-decay", type=float, default=1e-4)
    s.add_argument("--embed-dim", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--spatial-layers", type=int, default=2)
    s.add_argument("--depth-layers", type=int, default=2)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--soft-label", type=float, nargs="?", const=0.5, default=None,
                   metavar="TAU", help="soften code targets (bare flag: tau=0.5)")
    s.add_argument("--stochastic", type=float, nargs="?", const=0.5, default=None,
                   metavar="TAU", help="resample codes per batch (bare flag: tau=0.5)")
    s.add_argument("--target-nll", type=float, default=None)
    s.add_argument("--eval-every", type=int, default=50)

    s = sub.add_parser("sample", help="generate images from a trained model")
    s.add_argument("--model", type=str, required=True)
    s.add_argument("--codebook", type=str, required=True)
    s.add_argument("--codec", type=str, required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--top-k", type=int, default=None)
    s.add_argument("--top-p", type=float, default=1.0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--condition", type=int, default=None, metavar="CLASS")

    s = sub.add_parser("bench", help="sampling throughput and attention-MAC report")
    s.add_argument("--positions", type=int, default=64)
    s.add_argument("--depth", type=int, default=4)
    s.add_argument("--spatial-layers", type=int, default=24)
    s.add_argument("--depth-layers", type=int, default=4)
    s.add_argument("--embed-dim", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--codebook-size", type=int, default=64)
    s.add_argument("--code-dim", type=int, default=16)
    s.add_argument("--batch-sizes", type=_int_list, default=[4, 16, 64])

    sub.add_parser("grad-check", help="finite-difference checks of all primitives")
    sub.add_parser("selftest", help="quick oracle and format battery")
    return p


def _merge_config(args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Fill values from --config JSON for options not given explicitly."""
    if not args.config:
        return args
    from .errors import ConfigError

    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    explicit = {a.split("=", 1)[0].lstrip("-").replace("-", "_")
                for a in argv if a.startswith("--")}
    for key, value in data.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and attr not in explicit:
            setattr(args, attr, value)
    return args


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(args, out: Path) -> None:
    payload = {k: v for k, v in vars(args).items() if k not in ("config", "threads")}
    (out / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_dataset(data_dir: str | None):
    from .errors import ConfigError
    from .patchcodec import load_ppm

    if not data_dir:
        raise ConfigError("no input images: --data directory is required")
    root = Path(data_dir)
    if not root.is_dir():
        raise ConfigError(f"no input images: {root} is not a directory")
    paths = sorted(root.glob("*.ppm"))
    if not paths:
        raise ConfigError(f"no input images in {root}")
    return [load_ppm(p) for p in paths]


def _stage1_config(args, seed: int):
    from .patchcodec import Stage1Config

    return Stage1Config(
        f=args.f, n_z=args.n_z, mode=args.mode, codebook_size=args.codebook_size,
        depth=args.depth, beta=args.beta, decay=args.decay, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr,
        per_depth_codebooks=args.per_depth_codebooks, seed=seed)


def cmd_train_stage1(args) -> int:
    import numpy as np

    from .codebook import save_codebook
    from .patchcodec import save_codec, train_stage1

    images = _load_dataset(args.data)
    out = _out_dir(args)
    _write_run_config(args, out)
    result = train_stage1(images, _stage1_config(args, args.seed))
    save_codec(result.codec, out / "codec.rqpc")
    if isinstance(result.codebook, list):
        for d, book in enumerate(result.codebook):
            save_codebook(book, out / f"codebook_d{d}.rqcb")
    else:
        save_codebook(result.codebook, out / "codebook.rqcb")
    with open(out / "metrics.jsonl", "w") as fh:
        for entry in result.metrics:
            fh.write(json.dumps(entry) + "\n")
    final = result.metrics[-1]
    print(f"stage1 done: recon {final['recon']:.6f} commit {final['commit']:.6f}")
    return EXIT_OK


def _load_stage1_pair(codebook_path, codec_path):
    from .codebook import load_codebook
    from .errors import ArtifactMismatchError
    from .patchcodec import load_codec

    cb = load_codebook(codebook_path)
    codec = load_codec(codec_path)
    if codec.cfg.n_z != cb.dim:
        raise ArtifactMismatchError(
            f"codebook/codec mismatch: codebook dim {cb.dim}, codec n_z {codec.cfg.n_z}")
    return cb, codec


def cmd_encode(args) -> int:
    import numpy as np

    from .patchcodec import load_ppm, recon_loss, save_ppm
    from .rqcore import quantize_feature_map, save_code_map

    cb, codec = _load_stage1_pair(args.codebook, args.codec)
    depth = args.depth or 4
    image = load_ppm(args.image)
    out = _out_dir(args)
    Z = codec.encode(image)
    q = quantize_feature_map(Z, cb, depth)
    stem = Path(args.image).stem
    save_code_map(q.map, out / f"{stem}.rqcm")
    report = {"image": args.image, "depth": depth, "per_depth_mse": []}
    for d in range(depth):
        recon = codec.decode(q.partials[d])
        save_ppm(recon, out / f"{stem}_recon_d{d + 1}.ppm")
        report["per_depth_mse"].append(recon_loss(image, recon))
    (out / f"{stem}_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report["per_depth_mse"]))
    return EXIT_OK


def cmd_decode(args) -> int:
    from .errors import ArtifactMismatchError
    from .patchcodec import save_ppm
    from .rqcore import decode_map, load_code_map

    cb, codec = _load_stage1_pair(args.codebook, args.codec)
    cmap = load_code_map(args.codemap)
    if cmap.codebook_id != cb.content_hash():
        raise ArtifactMismatchError("codebook/codec mismatch: code map was "
                                    "produced with a different codebook")
    depth = args.depth or cmap.depth
    out = _out_dir(args)
    recon = codec.decode(decode_map(cmap, cb, depth))
    target = out / f"{Path(args.codemap).stem}_decoded_d{depth}.ppm"
    save_ppm(recon, target)
    print(str(target))
    return EXIT_OK


def cmd_sweep(args) -> int:
    import numpy as np

    from .codebook import usage_entropy, usage_histogram
    from .patchcodec import Stage1Config, per_depth_mse, train_stage1
    from .rqcore import quantize_feature_map

    images = _load_dataset(args.data)
    if args.holdout >= len(images):
        from .errors import ConfigError
        raise ConfigError(f"holdout {args.holdout} >= dataset size {len(images)}")
    held = images[-args.holdout:] if args.holdout else []
    train = images[:-args.holdout] if args.holdout else images
    out = _out_dir(args)
    _write_run_config(args, out)
    if args.cells:
        cells = [tuple(int(x) for x in cell.split(":")) for cell in args.cells.split(",")]
    else:
        cells = [(K, D) for K in args.codebook_sizes for D in args.depths]
    T = (images[0].shape[0] // args.f) * (images[0].shape[1] // args.f)
    rows = []
    for K, D in cells:
        for beta in args.betas:
            row = {"K": K, "D": D, "beta": beta,
                   "bits_per_image": T * D * float(np.log2(K))}

            def cell_config(per_depth: bool) -> Stage1Config:
                return Stage1Config(
                    f=args.f, n_z=args.n_z, mode=args.mode, codebook_size=K,
                    depth=D, beta=beta, decay=args.decay, epochs=args.epochs,
                    batch_size=args.batch_size, lr=args.lr,
                    per_depth_codebooks=per_depth, seed=args.seed)

            try:
                res = train_stage1(train, cell_config(False))
                eval_set = held if held else train
                mses = np.stack([per_depth_mse(X, res.codec, res.codebook, D)
                                 for X in eval_set])
                maps = [quantize_feature_map(res.codec.encode(X), res.codebook, D).map.codes
                        for X in eval_set]
                ent = usage_entropy(usage_histogram(maps, K))
                row["mse"] = float(mses[:, -1].mean())
                row["usage_entropy"] = "|".join(f"{e:.4f}" for e in ent)
                if args.per_depth_codebooks:
                    res2 = train_stage1(train, cell_config(True))
                    m2 = np.stack([per_depth_mse(X, res2.codec, res2.codebook, D)
                                   for X in eval_set])
                    row["mse_per_depth_codebooks"] = float(m2[:, -1].mean())
                row["status"] = "ok"
            except Exception as e:  # keep sweeping remaining cells
                row.setdefault("mse", "")
                row.setdefault("usage_entropy", "")
                row["status"] = f"error: {e}"
            rows.append(row)
    cols = ["K", "D", "beta", "bits_per_image", "mse", "usage_entropy", "status"]
    if args.per_depth_codebooks:
        cols.insert(5, "mse_per_depth_codebooks")
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(str(row.get(c, "")) for c in cols))
    (out / "rd_table.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_train_ar(args) -> int:
    import numpy as np

    from .errors import ConfigError
    from .transformer import (ModelConfig, TrainConfig, build_model, save_model,
                              train_model)

    stage1 = Path(args.stage1)
    cb, codec = _load_stage1_pair(stage1 / "codebook.rqcb", stage1 / "codec.rqpc")
    images = _load_dataset(args.data)
    out = _out_dir(args)
    _write_run_config(args, out)
    feats = [codec.encode(X) for X in images]
    H, W, n_z = feats[0].shape
    dataset = [{"features": f.reshape(-1, n_z)} for f in feats]
    depth = args.depth
    cfg = ModelConfig(
        spatial_layers=args.spatial_layers, depth_layers=args.depth_layers,
        embed_dim=args.embed_dim, heads=args.heads, positions=H * W, depth=depth,
        codebook_size=cb.size, code_dim=cb.dim, dropout=args.dropout)
    model = build_model(cfg, np.random.default_rng([args.seed, 40]), codebook=cb)
    tcfg = TrainConfig(
        steps=args.steps, batch_size=args.batch_size, lr=args.lr,
        weight_decay=args.weight_decay, lr_schedule=args.lr_schedule,
        seed=args.seed, soft_label_tau=args.soft_label,
        stochastic_tau=args.stochastic, eval_every=args.eval_every,
        target_nll=args.target_nll)
    result = train_model(model, dataset, tcfg, codebook=cb)
    save_model(model, out / "model.rqtm")
    with open(out / "trace.jsonl", "w") as fh:
        for entry in result.trace:
            fh.write(json.dumps(entry) + "\n")
    print(f"train-ar done: steps {result.steps_run} final nll {result.final_nll:.4f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np

    from .errors import ArtifactMismatchError
    from .patchcodec import save_ppm
    from .rqcore import CodeStackMap, decode_map, save_code_map
    from .transformer import load_model, sample

    cb, codec = _load_stage1_pair(args.codebook, args.codec)
    model = load_model(args.model)
    if model.codebook_hash != b"\x00" * 32 and model.codebook_hash != cb.content_hash():
        raise ArtifactMismatchError("model was trained against a different codebook")
    if model.cfg.codebook_size != cb.size or model.cfg.code_dim != cb.dim:
        raise ArtifactMismatchError("model/codebook geometry mismatch")
    out = _out_dir(args)
    H = W = int(np.sqrt(model.cfg.positions))
    if H * W != model.cfg.positions:
        from .errors import ConfigError
        raise ConfigError("non-square position count; cannot lay out images")
    codes = sample(model, args.count, temperature=args.temperature,
                   top_k=args.top_k, top_p=args.top_p,
                   condition=args.condition, seed=args.seed)
    for i in range(args.count):
        cmap = CodeStackMap(codes[i].reshape(H, W, model.cfg.depth), cb.size,
                            cb.content_hash())
        save_code_map(cmap, out / f"sample_{i}.rqcm")
        img = codec.decode(decode_map(cmap, cb))
        save_ppm(img, out / f"sample_{i}.ppm")
        meta = {"seed": args.seed, "index": i, "temperature": args.temperature,
                "top_k": args.top_k, "top_p": args.top_p,
                "condition": args.condition}
        (out / f"sample_{i}.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .transformer import ModelConfig, benchmark_sampling

    cfg = ModelConfig(
        spatial_layers=args.spatial_layers, depth_layers=args.depth_layers,
        embed_dim=args.embed_dim, heads=args.heads, positions=args.positions,
        depth=args.depth, codebook_size=args.codebook_size, code_dim=args.code_dim)
    report = benchmark_sampling(cfg, batch_sizes=tuple(args.batch_sizes), seed=args.seed)
    out = _out_dir(args)
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    for row in report["batches"]:
        print(f"batch {row['batch_size']}: {row['rq_images_per_second']:.2f} img/s "
              f"vs naive {row['naive_images_per_second']:.2f} img/s "
              f"(speedup {row['speedup']:.2f}x)")
    fl = report["flops"]
    print(f"attention-MAC ratio measured {fl['ratio_measured']:.5f} "
          f"predicted {fl['ratio_predicted']:.5f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    import numpy as np

    from . import autodiff as ad
    from .transformer import ModelConfig, build_model, model_grad_check

    rng = np.random.default_rng(args.seed)
    failures = []

    def report(name, err, tol):
        ok = err < tol
        print(f"{'PASS' if ok else 'FAIL'} {name}: rel err {err:.3e} (tol {tol:g})")
        if not ok:
            failures.append(name)

    a = ad.Tensor(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 5))
    report("matmul", ad.grad_check(
        lambda t: ad.sum_all(ad.matmul(t, ad.constant(b))), a), 1e-6)
    x = ad.Tensor(rng.normal(size=(1, 8)))
    w = rng.normal(size=(1, 8))
    report("masked_softmax", ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.masked_softmax(t), ad.constant(w))), x), 1e-6)
    x = ad.Tensor(rng.normal(size=(2, 6)))
    g = ad.constant(rng.normal(size=6))
    bb = ad.constant(rng.normal(size=6))
    w2 = rng.normal(size=(2, 6))
    report("layer_norm", ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.layer_norm(t, g, bb), ad.constant(w2))), x), 1e-6)
    x = ad.Tensor(rng.normal(size=(2, 7)))
    report("gelu", ad.grad_check(lambda t: ad.sum_all(ad.gelu(t)), x), 1e-6)
    lg = ad.Tensor(rng.normal(size=(4, 16)))
    tt = rng.random((4, 16))
    tt /= tt.sum(axis=1, keepdims=True)
    report("cross_entropy_soft", ad.grad_check(
        lambda t: ad.cross_entropy_soft(t, tt), lg), 1e-6)

    cfg = ModelConfig(1, 1, 16, 2, 4, 2, 8, 4)
    model = build_model(cfg, np.random.default_rng([args.seed, 50]))
    S = np.random.default_rng([args.seed, 51]).integers(0, 8, size=(4, 2))
    errs = model_grad_check(model, S)
    worst = max(errs.values())
    report("rq-transformer nll", worst, 1e-4)
    return EXIT_OK if not failures else 1


def cmd_selftest(args) -> int:
    import numpy as np

    from . import codebook as cbm
    from . import patchcodec as pc
    from . import rqcore as rq

    rng = np.random.default_rng(args.seed)
    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    cb = cbm.init_codebook(rng.normal(size=(200, 8)), 64, rng)
    Q = rng.normal(size=(2000, 8))
    fast = cbm.nearest_code_batch(Q, cb)
    oracle = np.array([int(np.argmin(((q - cb.embeddings) ** 2).sum(axis=1))) for q in Q])
    check("nearest_code vs exhaustive scan", bool(np.array_equal(fast, oracle)))

    ok = True
    for _ in range(200):
        z = rng.normal(size=8)
        res = rq.rq_encode(z, cb, 5)
        r = z.copy()
        for d in range(5):
            k = int(np.argmin(((r - cb.embeddings) ** 2).sum(axis=1)))
            ok &= k == res.codes[d]
            r = r - cb.embeddings[k]
        ok &= bool(np.abs(res.partial_sums[-1] + res.residuals[-1] - z).max() < 1e-12)
    check("rq recursion + telescoping", ok)

    small = cbm.Codebook(rng.normal(size=(4, 3)))
    count = rq.capacity_check(small, 3)
    check("capacity <= K^D and > K", count <= 64 and count > 4)

    blob = cbm.dump_codebook(cb)
    check("RQCB round trip", blob == cbm.dump_codebook(cbm.parse_codebook(blob)))
    cmap = rq.CodeStackMap(rng.integers(0, 64, size=(4, 4, 3)), 64, cb.content_hash())
    blob = rq.dump_code_map(cmap)
    check("RQCM round trip", blob == rq.dump_code_map(rq.parse_code_map(blob)))
    codec = pc.PatchCodec.orthonormal(4, 48)
    blob = pc.dump_codec(codec)
    check("RQPC round trip", blob == pc.dump_codec(pc.parse_codec(blob)))
    B = pc.patch_basis(4)
    check("patch basis orthonormal", bool(np.abs(B @ B.T - np.eye(48)).max() < 1e-12))
    return EXIT_OK if not failures else 1


COMMANDS = {
    "train-stage1": cmd_train_stage1,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "sweep": cmd_sweep,
    "train-ar": cmd_train_ar,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "grad-check": cmd_grad_check,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_limit(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import (ArtifactMismatchError, ConfigError, DivergenceError,
                         FormatError, InsufficientDataError, ValidationError)

    try:
        args = _merge_config(args, argv)
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError, InsufficientDataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ArtifactMismatchError, FormatError) as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    raise SystemExit(main())
