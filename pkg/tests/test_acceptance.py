"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. Every tolerance is pinned
here; nothing is deferred to later calibration.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from rqlib import autodiff as ad
from rqlib import codebook as cbm
from rqlib import patchcodec as pc
from rqlib import rqcore as rq
from rqlib import synthetic
from rqlib import transformer as tr
from rqlib.cli import main


def report(tag: str, ok: bool, detail: str) -> None:
    print(f"\n[{tag}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{tag}: {detail}"


# -------------------------------------------------------------------------
# 1. VQ oracle equivalence
# -------------------------------------------------------------------------


def test_c01_nearest_code_matches_exhaustive_scan():
    t0 = time.time()
    rng = np.random.default_rng(101)
    checked = 0
    for _ in range(100):
        K = int(rng.integers(2, 257))
        dim = int(rng.integers(2, 17))
        cb = cbm.Codebook(rng.normal(size=(K, dim)))
        Q = rng.normal(size=(100, dim)) * rng.uniform(0.2, 2.0)
        fast = cbm.nearest_code_batch(Q, cb)
        for i, z in enumerate(Q):
            oracle = int(np.argmin(((z - cb.embeddings) ** 2).sum(axis=1)))
            assert fast[i] == oracle
            checked += 1
    # constructed exact ties must break to the lowest index
    tie_cb = cbm.Codebook(np.array([[0.0, 0.0], [3.0, 4.0], [-3.0, -4.0]]))
    assert cbm.nearest_code(np.array([1.5, 2.0]), tie_cb) == 0
    assert cbm.nearest_code(np.array([0.0, 0.0]), tie_cb) == 0
    dt = time.time() - t0
    report("C1", checked == 10_000 and dt < 10,
           f"nearest_code == exhaustive scan on {checked} pairs, "
           f"tie-break exact, {dt:.1f}s (< 10s)")


# -------------------------------------------------------------------------
# 2. RQ oracle equivalence + telescoping
# -------------------------------------------------------------------------


def test_c02_rq_encode_matches_independent_recursion():
    t0 = time.time()
    rng = np.random.default_rng(202)
    worst_tel = 0.0
    for _ in range(1000):
        K = int(rng.integers(2, 65))
        dim = int(rng.integers(2, 13))
        depth = int(rng.integers(1, 9))
        cb = cbm.Codebook(rng.normal(size=(K, dim)))
        z = rng.normal(size=dim) * rng.uniform(0.2, 2.0)
        res = rq.rq_encode(z, cb, depth)
        # independent recursion: quantize the running residual step by step
        r = z.copy()
        for d in range(depth):
            k = int(np.argmin(((r - cb.embeddings) ** 2).sum(axis=1)))
            assert res.codes[d] == k
            r = r - cb.embeddings[k]
        tel = np.abs(res.partial_sums[-1] + res.residuals[-1] - z).max()
        worst_tel = max(worst_tel, tel)
    dt = time.time() - t0
    report("C2", worst_tel < 1e-12 and dt < 10,
           f"1000 instances match the recursion oracle; worst telescoping "
           f"error {worst_tel:.2e} (< 1e-12), {dt:.1f}s (< 10s)")


# -------------------------------------------------------------------------
# 3. capacity
# -------------------------------------------------------------------------


def test_c03_capacity_between_k_and_k_power_d():
    cb = cbm.Codebook(np.random.default_rng(303).normal(size=(4, 3)))
    count = rq.capacity_check(cb, 3)
    report("C3", 4 < count <= 64,
           f"distinct depth-3 outputs {count}: > K=4 and <= K^D=64")


# -------------------------------------------------------------------------
# 4. coarse-to-fine monotonicity after stage-1 training
# -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stage1_run(tmp_path_factory):
    data = tmp_path_factory.mktemp("c4data")
    for i, img in enumerate(synthetic.make_images(64, 32, seed=100)):
        pc.save_ppm(img, data / f"img_{i:03d}.ppm")
    out = tmp_path_factory.mktemp("c4out")
    rc = main(["--seed", "0", "--out", str(out), "train-stage1", "--data", str(data),
               "--f", "4", "--n-z", "48", "--codebook-size", "256", "--depth", "4",
               "--epochs", "40"])
    assert rc == 0
    return out


def test_c04_held_out_per_depth_mse_non_increasing(stage1_run):
    t0 = time.time()
    cb = cbm.load_codebook(stage1_run / "codebook.rqcb")
    codec = pc.load_codec(stage1_run / "codec.rqpc")
    held = synthetic.make_images(16, 32, seed=200)
    mses = np.stack([pc.per_depth_mse(X, codec, cb, 4) for X in held])
    frac = float((np.diff(mses, axis=1) <= 1e-12).all(axis=1).mean())
    mean_strict = bool((np.diff(mses.mean(axis=0)) < 0).all())
    dt = time.time() - t0
    report("C4", frac >= 0.95 and mean_strict and dt < 300,
           f"per-depth MSE non-increasing for {frac * 100:.0f}% of held-out "
           f"images (>= 95%), mean strictly decreasing "
           f"{np.round(mses.mean(axis=0), 5).tolist()}, eval {dt:.0f}s")


# -------------------------------------------------------------------------
# 5. rate-distortion ablation shape
# -------------------------------------------------------------------------


def test_c05_depth_beats_codebook_growth(tmp_path):
    t0 = time.time()
    data = tmp_path / "data"
    data.mkdir()
    train = synthetic.make_images(64, 32, seed=100)
    held = synthetic.make_images(16, 32, seed=200)
    for i, img in enumerate(train + held):
        pc.save_ppm(img, data / f"img_{i:03d}.ppm")
    out = tmp_path / "sweep"
    rc = main(["--seed", "0", "--out", str(out), "sweep", "--data", str(data),
               "--cells", "64:1,4096:1,64:4", "--holdout", "16",
               "--f", "4", "--n-z", "48", "--epochs", "40"])
    assert rc == 0
    lines = (out / "rd_table.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    mse = {(int(r["K"]), int(r["D"])): float(r["mse"]) for r in rows}
    ok = mse[(64, 4)] < mse[(4096, 1)] < mse[(64, 1)]
    dt = time.time() - t0
    report("C5", ok and dt < 900,
           f"MSE(64,4)={mse[(64, 4)]:.5f} < MSE(4096,1)={mse[(4096, 1)]:.5f} "
           f"< MSE(64,1)={mse[(64, 1)]:.5f}, {dt:.0f}s (< 15min)")


# -------------------------------------------------------------------------
# 6. gradient correctness
# -------------------------------------------------------------------------


def test_c06_gradient_checks():
    t0 = time.time()
    rng = np.random.default_rng(606)
    errs = {}
    a = ad.Tensor(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))
    errs["matmul"] = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.matmul(t, ad.constant(b)), ad.constant(w))), a)
    x = ad.Tensor(rng.normal(size=(1, 8)))
    wm = rng.normal(size=(1, 8))
    mask = np.array([True] * 7 + [False])
    errs["masked_softmax"] = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.masked_softmax(t, mask), ad.constant(wm))), x)
    x = ad.Tensor(rng.normal(size=(2, 6)))
    g = ad.constant(rng.normal(size=6))
    bb = ad.constant(rng.normal(size=6))
    wl = rng.normal(size=(2, 6))
    errs["layer_norm"] = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.layer_norm(t, g, bb), ad.constant(wl))), x)
    errs["gelu"] = ad.grad_check(
        lambda t: ad.sum_all(ad.gelu(t)), ad.Tensor(rng.normal(size=(2, 7))))
    tt = rng.random((4, 16))
    tt /= tt.sum(axis=1, keepdims=True)
    errs["cross_entropy"] = ad.grad_check(
        lambda t: ad.cross_entropy_soft(t, tt), ad.Tensor(rng.normal(size=(4, 16))))
    errs["add_mul"] = ad.grad_check(
        lambda t: ad.sum_all(ad.mul(ad.add(t, t), t)), ad.Tensor(rng.normal(size=(3, 3))))
    prim_ok = all(e < 1e-6 for e in errs.values())

    cfg = tr.ModelConfig(1, 1, 16, 2, 4, 2, 8, 4)
    model = tr.build_model(cfg, np.random.default_rng(607))
    S = np.random.default_rng(608).integers(0, 8, size=(4, 2))
    model_errs = tr.model_grad_check(model, S, h=1e-5)
    model_worst = max(model_errs.values())
    dt = time.time() - t0
    report("C6", prim_ok and model_worst < 1e-4 and dt < 60,
           f"primitive rel errs {max(errs.values()):.2e} (< 1e-6 each); "
           f"full T=4,D=2,K=8,n_e=16 model worst {model_worst:.2e} (< 1e-4), "
           f"{dt:.0f}s (< 1min)")


# -------------------------------------------------------------------------
# 7. causal invariance
# -------------------------------------------------------------------------


def test_c07_causal_invariance_bitwise():
    t0 = time.time()
    cfg = tr.ModelConfig(2, 1, 32, 2, 8, 3, 16, 6)
    model = tr.build_model(cfg, np.random.default_rng(707))
    rng = np.random.default_rng(708)
    S = rng.integers(0, 16, size=(8, 3))
    base = tr.forward(model, S).probs

    spatial_ok = 0
    for _ in range(100):
        t_keep = int(rng.integers(0, 7))
        S2 = S.copy()
        tail = S2[t_keep + 1:]
        S2[t_keep + 1:] = (tail + rng.integers(1, 16, size=tail.shape)) % 16
        probs = tr.forward(model, S2).probs
        if np.array_equal(base[:t_keep + 1], probs[:t_keep + 1]):
            spatial_ok += 1

    depth_ok = 0
    for _ in range(100):
        t_star = int(rng.integers(0, 8))
        d_star = int(rng.integers(1, 3))
        S2 = S.copy()
        S2[t_star, d_star:] = (S2[t_star, d_star:] + rng.integers(1, 16)) % 16
        S2[t_star + 1:] = (S2[t_star + 1:] + 1) % 16
        probs = tr.forward(model, S2).probs
        if (np.array_equal(base[:t_star], probs[:t_star])
                and np.array_equal(base[t_star, :d_star + 1], probs[t_star, :d_star + 1])):
            depth_ok += 1
    dt = time.time() - t0
    report("C7", spatial_ok == 100 and depth_ok == 100 and dt < 60,
           f"bitwise-identical unperturbed slots in {spatial_ok}/100 spatial "
           f"and {depth_ok}/100 depth perturbation trials, {dt:.0f}s (< 1min)")


# -------------------------------------------------------------------------
# 8. trainability
# -------------------------------------------------------------------------


def test_c08_memorization_and_soft_label_limit():
    t0 = time.time()
    rng = np.random.default_rng(808)
    maps = [{"codes": rng.integers(0, 64, size=(64, 4))} for _ in range(32)]
    cfg = tr.ModelConfig(2, 2, 64, 4, 64, 4, 64, 16)
    model = tr.build_model(cfg, np.random.default_rng(809))
    res = tr.train_model(model, maps, tr.TrainConfig(
        steps=3000, batch_size=16, lr=3e-3, lr_schedule="cosine", seed=0,
        eval_every=100, target_nll=0.1))
    nll = res.final_nll
    memor_ok = nll < 0.1 and res.steps_run <= 3000

    emb = rng.normal(size=(16, 8))
    cb = cbm.Codebook(emb)
    data = [{"features": rng.normal(size=(8, 8))} for _ in range(4)]

    def trace(tau):
        m = tr.build_model(tr.ModelConfig(1, 1, 32, 2, 8, 2, 16, 8),
                           np.random.default_rng(810))
        r = tr.train_model(m, data, tr.TrainConfig(
            steps=25, batch_size=2, lr=1e-3, seed=4, soft_label_tau=tau), codebook=cb)
        return [e["nll"] for e in r.trace]

    soft_ok = trace(None) == trace(1e-9)
    dt = time.time() - t0
    report("C8", memor_ok and soft_ok and dt < 600,
           f"memorization NLL {nll:.4f} (< 0.1) in {res.steps_run} steps "
           f"(<= 3000); soft-label tau->0 trace bitwise equals one-hot; "
           f"{dt:.0f}s (< 10min)")


# -------------------------------------------------------------------------
# 9. stochastic code distribution
# -------------------------------------------------------------------------


def test_c09_stochastic_frequencies_match_q_tau():
    t0 = time.time()
    rng = np.random.default_rng(909)
    # ring geometry keeps every code's probability comfortably testable
    K = 6
    angles = np.linspace(0, 2 * np.pi, K, endpoint=False)
    emb = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    cb = cbm.Codebook(emb)
    z = np.array([0.25, 0.1])
    n = 100_000
    pvals = {}
    for tau in (0.5, 1.0):
        d = ((z - cb.embeddings) ** 2).sum(axis=1)
        p = np.exp(-(d - d.min()) / tau)
        p /= p.sum()
        draw_rng = np.random.default_rng([910, int(tau * 10)])
        counts = np.zeros(K, dtype=int)
        for _ in range(n):
            counts[rq.rq_encode_stochastic(z, cb, 1, tau, draw_rng).codes[0]] += 1
        pvals[tau] = stats.chisquare(counts, f_exp=p * n).pvalue
    chi_ok = all(v > 0.01 for v in pvals.values())

    zero_ok = True
    for _ in range(100):
        zz = rng.normal(size=2)
        a = rq.rq_encode(zz, cb, 3)
        b = rq.rq_encode_stochastic(zz, cb, 3, 0.0, np.random.default_rng(0))
        zero_ok &= bool(np.array_equal(a.codes, b.codes)
                        and np.array_equal(a.residuals, b.residuals))
    dt = time.time() - t0
    report("C9", chi_ok and zero_ok and dt < 60,
           f"chi-square p-values tau=0.5: {pvals[0.5]:.3f}, tau=1.0: "
           f"{pvals[1.0]:.3f} (> 0.01 each, 1e5 draws); tau=0 bit-equals "
           f"deterministic; {dt:.0f}s (< 1min)")


# -------------------------------------------------------------------------
# 10. complexity verification
# -------------------------------------------------------------------------


def test_c10_complexity_and_sampling_speedup():
    t0 = time.time()
    cfg = tr.ModelConfig(spatial_layers=24, depth_layers=4, embed_dim=64, heads=4,
                         positions=64, depth=4, codebook_size=64, code_dim=16)
    rep = tr.flop_report(cfg, naive_layers=28, seed=0)
    exact_ok = (rep["measured_spatial_score_macs"] == rep["predicted_spatial_score_macs"]
                and rep["measured_depth_score_macs"] == rep["predicted_depth_score_macs"]
                and rep["measured_naive_score_macs"] == rep["predicted_naive_score_macs"])
    ratio_ok = abs(rep["ratio_measured"] / rep["ratio_predicted"] - 1.0) < 0.2

    bench = tr.benchmark_sampling(cfg, batch_sizes=(16,), seed=0, naive_layers=28)
    speedup = bench["batches"][0]["speedup"]
    dt = time.time() - t0
    report("C10", exact_ok and ratio_ok and speedup >= 2.0 and dt < 300,
           f"attention MACs exactly match causal closed forms; measured/"
           f"predicted ratio {rep['ratio_measured']:.4f}/{rep['ratio_predicted']:.4f} "
           f"(within 20%); sampling speedup {speedup:.2f}x (>= 2x); "
           f"{dt:.0f}s (< 5min)")


# -------------------------------------------------------------------------
# 11. format round trips
# -------------------------------------------------------------------------


def test_c11_format_round_trips_byte_identical():
    t0 = time.time()
    rng = np.random.default_rng(1111)
    ok = True
    for _ in range(20):
        K = int(rng.integers(1, 40))
        dim = int(rng.integers(1, 12))
        cb = cbm.Codebook(rng.normal(size=(K, dim)), ema_size=rng.random(K),
                          ema_sum=rng.normal(size=(K, dim)))
        blob = cbm.dump_codebook(cb)
        ok &= blob == cbm.dump_codebook(cbm.parse_codebook(blob))

        H, W, D = (int(rng.integers(1, 7)) for _ in range(3))
        cmap = rq.CodeStackMap(rng.integers(0, K, size=(H, W, D)), K,
                               bytes(rng.integers(0, 256, size=32, dtype=np.uint8)))
        blob = rq.dump_code_map(cmap)
        ok &= blob == rq.dump_code_map(rq.parse_code_map(blob))

        f = int(rng.integers(1, 5))
        n_z = int(rng.integers(1, 3 * f * f + 1))
        codec = pc.PatchCodec.trainable(f, n_z, rng)
        blob = pc.dump_codec(codec)
        ok &= blob == pc.dump_codec(pc.parse_codec(blob))
    for cond in (0, 3):
        cfg = tr.ModelConfig(1, 1, 8, 2, int(rng.integers(1, 5)),
                             int(rng.integers(1, 4)), 8, 4,
                             condition_classes=cond)
        model = tr.build_model(cfg, rng)
        blob = tr.dump_model(model)
        ok &= blob == tr.dump_model(tr.parse_model(blob))
    dt = time.time() - t0
    report("C11", ok and dt < 10,
           f"RQCB/RQCM/RQPC/RQTM write-read-write byte-identical on "
           f"randomized instances, {dt:.1f}s (< 10s)")
