"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed in the terminal
summary. Pre-trained checkpoints are cached under pytest's cache directory,
so clear it (``pytest --cache-clear``) for a from-scratch run.
"""

import itertools
import math
import time

import numpy as np
import pytest

from nsae import experiments as X
from nsae import losses as L
from nsae.config import parse_config
from nsae.datasets import benchmark_specs, generate_domain
from nsae.evaluation import evaluate_protocol
from nsae.model import NsaeModel
from nsae.numerics import Tensor, singular_values
from nsae.numerics.gradcheck import check_gradients

from test_losses import _model_grad_errors
from test_numerics import GRAD_CASES

VERDICTS: dict[int, str] = {}
SEEDS = (0, 1, 2)


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture(scope="session")
def cache_dir(request):
    return request.config.cache.mkdir("nsae-acceptance")


# ---------------------------------------------------------------- 1
def _loss_cases(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(3, 2, 3, 3))
    y5, y3 = rng.integers(0, 5, 4), rng.integers(0, 3, 4)
    sy, qy = np.repeat(np.arange(3), 2), rng.integers(0, 3, 4)

    def p(*shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    return {
        "rec": (lambda a: L.rec_loss(t, a), [p(3, 2, 3, 3)]),
        "ce": (lambda a: L.ce_loss(a, y5), [p(4, 5, scale=2.0)]),
        "bsr": (lambda a, b: L.bsr_loss(a @ b, y3, a, 0.05), [p(4, 6), p(6, 3)]),
        "distance": (lambda a, b: L.distance_loss(b, qy, L.prototypes(a, sy, 3)), [p(6, 5), p(4, 5)]),
    }


def test_criterion_1_gradient_suite():
    t0 = time.time()
    worst, where = 0.0, ""
    for seed in range(10):
        cases = {name: make(np.random.default_rng(seed)) for name, make in GRAD_CASES.items()}
        cases.update(_loss_cases(seed))
        for name, (fn, inputs) in cases.items():
            err = max(check_gradients(fn, inputs, h=1e-4, seed=seed))
            if err > worst:
                worst, where = err, f"{name}/seed {seed}"
        for variant, kind in (("SAE", "CE"), ("NSAE", "CE"), ("NSAE", "BSR")):
            cfg = L.LossConfig(variant=variant, pretrain_cls=kind, lambda_bsr=0.01)
            err = max(_model_grad_errors(seed, cfg))
            if err > worst:
                worst, where = err, f"{variant}-{kind}/seed {seed}"
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 120
    verdict(1, ok, f"{len(GRAD_CASES) + 7} cases x 10 seeds, max rel err {worst:.2e} ({where}), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 2
def test_criterion_2_bsr_identity():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for _ in range(100):
        b, d = int(rng.integers(1, 17)), int(rng.integers(1, 33))
        m = rng.normal(size=(b, d))
        for dtype in worst:
            mm = m.astype(dtype)
            svd = float(np.sum(singular_values(mm).astype(np.float64) ** 2))
            fro = L.bsr_penalty(Tensor(mm)).item()
            worst[dtype] = max(worst[dtype], abs(svd - fro) / max(1.0, abs(fro)))
    elapsed = time.time() - t0
    ok = worst[np.float32] < 1e-6 and worst[np.float64] < 1e-10 and elapsed < 10
    verdict(2, ok, f"100 matrices, rel gap 32-bit {worst[np.float32]:.1e}, 64-bit {worst[np.float64]:.1e}, "
                   f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3
def test_criterion_3_reduction_lattice():
    from conftest import TINY

    worst = 0.0
    for seed, kind in itertools.product(range(10), ("CE", "BSR")):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(size=(4, 3, 8, 8)), rng.integers(0, 3, 4)
        m = NsaeModel(TINY, 3, seed=seed, dtype=np.float64)
        base = dict(pretrain_cls=kind, lambda_bsr=0.01)
        nsae0 = L.nsae_loss(x, y, m, L.LossConfig(variant="NSAE", lambda_recon_cls=0.0, **base)).item()
        sae = L.sae_loss(x, y, m, L.LossConfig(variant="SAE", **base)).item()
        sae0 = L.sae_loss(x, y, m, L.LossConfig(variant="SAE", lambda_rec=0.0, **base)).item()
        feat = m.encode(x)
        plain = L.cls_loss(kind, m.classify(feat), y, feat, L.LossConfig(**base)).item()
        worst = max(worst, abs(nsae0 - sae), abs(sae0 - plain))
    ok = worst < 1e-12
    verdict(3, ok, f"NSAE(l2=0)=SAE and SAE(l1=0)=CE/BSR on 20 batches, max gap {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 4
def test_criterion_4_chance_level():
    t0 = time.time()
    target = generate_domain(benchmark_specs(32)["strong"], 40, seed=0)
    rep = evaluate_protocol(NsaeModel("fast32", 8, seed=0), target, 5, 5, 15, 600, finetune_mode="none",
                            master_seed=0)
    elapsed = time.time() - t0
    ci_ok = abs(rep.ci95 - 1.96 * np.std(rep.accuracies, ddof=1) / math.sqrt(600)) < 1e-12
    ok = 0.18 <= rep.mean <= 0.22 and ci_ok and elapsed < 300
    verdict(4, ok, f"untrained fast32, E=600: {rep.mean:.4f} +- {rep.ci95:.4f}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5
def test_criterion_5_shape_contract():
    m = NsaeModel("paper84", 64, seed=0)
    x = np.random.default_rng(0).uniform(size=(2, 3, 84, 84)).astype(np.float32)
    feat = m.encode(x)
    recon = m.decode(feat)
    p = m.profile
    ok = (feat.shape == (2, 1600) and recon.shape == (2, 3, 80, 80)
          and m.params["dec.fc1.w"].shape == (1600, 512)
          and (p.enc_channels[-1], p.pooled, p.pooled) == (64, 5, 5))
    verdict(5, ok, f"84x84x3 -> {feat.shape[1]} features -> {recon.shape[1:]}")
    assert ok


# ---------------------------------------------------------------- 6, 7, 9
@pytest.fixture(scope="session")
def claims(cache_dir):
    out = {}
    for seed in SEEDS:
        cfg = parse_config({}, seed=seed)
        t0 = time.time()
        out[seed] = (X.main_claim(cfg, cache_dir=cache_dir), time.time() - t0)
    return out


@pytest.mark.slow
def test_criterion_6_main_claim(claims):
    gaps = [res.gap for res, _ in claims.values()]
    wins = sum(g > 0 for g in gaps)
    elapsed = sum(t for _, t in claims.values())
    ok = wins >= 2 and elapsed < 3600
    cells = ", ".join(f"s{s}: {100 * r.baseline.mean:.1f} -> {100 * r.nsae.mean:.1f}" for s, (r, _) in claims.items())
    verdict(6, ok, f"strong target, baseline one-step -> NSAE two-step ({cells}); NSAE ahead on {wins}/3, "
                   f"{elapsed / 60:.0f} min incl. ICC")
    assert ok


@pytest.mark.slow
def test_criterion_7_icc_direction(claims):
    ratios = [(r.icc.ratio("source"), r.icc.ratio("strong")) for r, _ in claims.values()]
    hits = sum(s is not None and t is not None and s > 1 > t for s, t in ratios)
    ok = hits >= 2
    fmt = lambda v: "undefined" if v is None else f"{v:.3f}"  # noqa: E731
    text = ", ".join(f"({fmt(s)}, {fmt(t)})" for s, t in ratios)
    verdict(7, ok, f"icc_ratio baseline/NSAE (source, strong) = {text}; direction holds on {hits}/3")
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(claims, cache_dir, tmp_path):
    cfg = parse_config({}, seed=0)
    bench = X.build_benchmark(cfg, targets=["strong"])
    loss = X.loss_for(cfg, "baseline", cfg.loss.combo)
    model, _ = X.pretrained_model(cfg, loss, bench["source"], tmp_path)  # retrain from scratch
    cached, _ = X.pretrained_model(cfg, loss, bench["source"], cache_dir)
    same_ckpt = model.fingerprint() == cached.fingerprint()
    first = claims[0][0].baseline
    again = X.evaluate(model, bench["strong"], cfg, loss, False, "baseline")
    cfg4 = parse_config({}, seed=0, jobs=4)
    par = X.evaluate(model, bench["strong"], cfg4, loss, False, "baseline")
    ok = same_ckpt and again.to_json() == first.to_json() and (par.mean, par.ci95) == (first.mean, first.ci95)
    verdict(9, ok, f"seed-0 baseline cell retrained and re-evaluated: checkpoint equal {same_ckpt}, "
                   f"report bytes equal {again.to_json() == first.to_json()}, jobs=4 mean/CI equal "
                   f"{(par.mean, par.ci95) == (first.mean, first.ci95)}")
    assert ok


# ---------------------------------------------------------------- 8
def test_criterion_8_prototype_classifier():
    rng = np.random.default_rng(8)
    sum_err = scale_err = 0.0
    mismatches = 0
    for _ in range(1000):
        n, k, q, d = int(rng.integers(2, 8)), int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 20))
        support = rng.normal(size=(n * k, d))
        query = rng.normal(size=(n * q, d))
        sy = np.repeat(np.arange(n), k)
        protos = L.prototypes(Tensor(support), sy, n)
        probs = L.distance_probs(Tensor(query), protos).data
        sum_err = max(sum_err, float(np.abs(probs.sum(axis=1) - 1).max()))
        scales = rng.uniform(0.1, 10, size=(n, 1))
        rescaled = L.distance_probs(Tensor(query), Tensor(protos.data * scales)).data
        scale_err = max(scale_err, float(np.abs(rescaled - probs).max()))
        for i, v in enumerate(query):
            best, best_c = math.inf, -1
            for c in range(n):
                p = support[sy == c].mean(axis=0)
                dist = 1 - float(v @ p) / (math.sqrt(float(v @ v)) * math.sqrt(float(p @ p)))
                if dist < best:
                    best, best_c = dist, c
            mismatches += int(np.argmax(probs[i]) != best_c)
    ok = sum_err < 1e-10 and scale_err < 1e-10 and mismatches == 0
    verdict(8, ok, f"1000 episodes: sum err {sum_err:.1e}, rescale dev {scale_err:.1e}, "
                   f"argmax mismatches {mismatches}")
    assert ok


# ---------------------------------------------------------------- 10
@pytest.mark.slow
def test_criterion_10_noise_study(cache_dir):
    t0 = time.time()
    outcomes = []
    for seed in SEEDS:
        cfg = parse_config({"data": {"targets": ["strong"]}}, seed=seed)
        bench = X.build_benchmark(cfg)
        table = X.noise_study(bench, cfg, cache_dir)
        assert len(table.rows) == 9
        nsae = table.cell("NSAE", "strong").mean
        best_a = max(r["report"].mean for r in table.rows if r.get("setting") == "a")
        outcomes.append((nsae, best_a))
    wins = sum(n >= a for n, a in outcomes)
    ok = wins >= 2
    text = ", ".join(f"s{s}: NSAE {100 * n:.1f} vs best (a) {100 * a:.1f}" for s, (n, a) in zip(SEEDS, outcomes))
    verdict(10, ok, f"9-row table on 3 seeds ({text}); NSAE >= best (a) on {wins}/3, "
                    f"{(time.time() - t0) / 60:.0f} min")
    assert ok
