from dataclasses import replace

import numpy as np
import pytest

from nsae import losses as L
from nsae.datasets import Episode, SplitError, benchmark_specs, generate_domain, sample_episode
from nsae.evaluation import predict_query
from nsae.model import ConfigurationError, NsaeModel
from nsae.train import (
    DivergenceError,
    PretrainConfig,
    Step1Config,
    Step2Config,
    TrainConfig,
    _batches,
    finetune_classification,
    finetune_one_step,
    finetune_reconstruction,
    finetune_two_step,
    pretrain,
    write_history_csv,
)

from conftest import color_toy


def quick_cfg(**kw):
    cfg = TrainConfig(pretrain=PretrainConfig(epochs=2, batch_size=16, lr=0.01),
                      finetune_step1=Step1Config(epochs=3, lr=0.01),
                      finetune_step2=Step2Config(epochs=6, augment_copies=2))
    return replace(cfg, **kw)


def snapshot(params):
    return [p.data.copy() for p in params]


# ---------------------------------------------------------------- config
def test_train_config_defaults():
    cfg = TrainConfig()
    p, s1, s2 = cfg.pretrain, cfg.finetune_step1, cfg.finetune_step2
    assert (p.batch_size, p.lr, p.momentum, p.weight_decay) == (64, 1e-3, 0.9, 5e-4)
    assert (s1.epochs, s1.lr) == (30, 1e-3)
    assert (s2.epochs, s2.lr, s2.momentum, s2.weight_decay) == (200, 1e-2, 0.9, 1e-3)
    assert [s2.batch_size_for(k) for k in (5, 20, 50)] == [4, 4, 16]


@pytest.mark.parametrize("bad", [
    {"pretrain": PretrainConfig(lr=0)}, {"pretrain": PretrainConfig(epochs=0)},
    {"finetune_step2": Step2Config(momentum=1.0)}, {"finetune_step1": Step1Config(epochs=-1)},
    {"finetune_step2": Step2Config(weight_decay=-1)},
])
def test_train_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_batches_cover_and_avoid_singletons():
    rng = np.random.default_rng(0)
    out = _batches(9, 4, rng)
    assert sorted(np.concatenate(out).tolist()) == list(range(9))
    assert min(len(b) for b in out) >= 2
    assert len(_batches(5, 0, rng)) == 1


# ---------------------------------------------------------------- pre-training
def test_pretrain_one_batch_changes_params(tiny_model, tiny_domains):
    m = tiny_model()
    src = tiny_domains["source"]
    before = snapshot(m.all_params())
    cfg = quick_cfg(pretrain=PretrainConfig(epochs=1, batch_size=len(src), lr=0.01))
    res = pretrain(m, src, cfg, L.LossConfig())
    assert len(res.history) == 1
    assert any(np.abs(a - p.data).max() > 0 for a, p in zip(before, m.all_params()))
    assert set(res.history[0]) == {"epoch", "total", "cls_orig", "rec", "cls_recon"}


def test_baseline_leaves_decoder_untouched(tiny_model, tiny_domains):
    m = tiny_model()
    dec = snapshot(m.decoder_params())
    enc = snapshot(m.encoder_params())
    pretrain(m, tiny_domains["source"], quick_cfg(), L.LossConfig(variant="baseline", lambda_rec=0, lambda_recon_cls=0))
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(dec, m.decoder_params()))
    assert any(a.tobytes() != p.data.tobytes() for a, p in zip(enc, m.encoder_params()))


def test_noise_setting_a_leaves_decoder_untouched(tiny_model, tiny_domains):
    m = tiny_model()
    dec = snapshot(m.decoder_params())
    res = pretrain(m, tiny_domains["source"], quick_cfg(), L.LossConfig(noise_kind="gaussian", noise_setting="a"))
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(dec, m.decoder_params()))
    assert "cls_recon" in res.history[0] and "rec" not in res.history[0]


def test_pretrain_reproducible(tiny_model, tiny_domains):
    runs = []
    for _ in range(2):
        m = tiny_model(seed=4)
        res = pretrain(m, tiny_domains["source"], quick_cfg(seed=11), L.LossConfig(pretrain_cls="BSR"))
        runs.append((res.history, m.fingerprint()))
    assert runs[0] == runs[1]


def test_pretrain_head_mismatch(tiny_model, tiny_domains):
    with pytest.raises(ConfigurationError):
        pretrain(tiny_model(classes=5), tiny_domains["source"], quick_cfg(), L.LossConfig())


def test_pretrain_divergence(tiny_model, tiny_domains):
    cfg = quick_cfg(pretrain=PretrainConfig(epochs=3, batch_size=8, lr=1e4, momentum=0.0))
    with pytest.raises(DivergenceError) as err:
        pretrain(tiny_model(), tiny_domains["source"], cfg, L.LossConfig())
    assert err.value.stage == "pretrain" and err.value.epoch >= 0 and err.value.batch >= 0


def test_history_csv(tmp_path, tiny_model, tiny_domains):
    res = pretrain(tiny_model(), tiny_domains["source"], quick_cfg(), L.LossConfig(variant="SAE"))
    text = write_history_csv(res.history, tmp_path / "h.csv").read_text().splitlines()
    assert text[0] == "epoch,total,cls_orig,rec,cls_recon"
    assert len(text) == 1 + 2
    assert text[1].endswith(",")  # SAE has no reconstructed-image term


# ---------------------------------------------------------------- fine-tuning
def episode_from(ds, n=3, k=5, q=4, seed=0):
    return sample_episode(ds, n, k, q, np.random.default_rng(seed))


def test_two_step_without_step1_equals_one_step(tiny_model, tiny_domains):
    ep = episode_from(tiny_domains["strong"])
    cfg = quick_cfg(finetune_step1=Step1Config(epochs=0))
    a, b = tiny_model(seed=2), tiny_model(seed=2)
    ra = finetune_two_step(a, ep.support_x, ep.support_y, cfg, L.LossConfig(), seed=5)
    rb = finetune_one_step(b, ep.support_x, ep.support_y, cfg, L.LossConfig(), seed=5)
    assert a.fingerprint() == b.fingerprint()
    assert ra.step2_loss == rb.step2_loss and ra.step1_rec == []


def test_step1_touches_encoder_and_decoder_only(tiny_model, tiny_domains):
    m = tiny_model()
    ep = episode_from(tiny_domains["strong"])
    head = snapshot(m.head_params())
    enc, dec = snapshot(m.encoder_params()), snapshot(m.decoder_params())
    finetune_reconstruction(m, ep.support_x, quick_cfg(), seed=0)
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(head, m.head_params()))
    assert any(a.tobytes() != p.data.tobytes() for a, p in zip(enc, m.encoder_params()))
    assert any(a.tobytes() != p.data.tobytes() for a, p in zip(dec, m.decoder_params()))


def test_step1_reduces_support_reconstruction():
    specs = benchmark_specs(32)
    ds = generate_domain(specs["strong"], 10, seed=0)
    ep = sample_episode(ds, 5, 5, 1, np.random.default_rng(0))
    m = NsaeModel("fast32", 8, seed=0)
    cfg = TrainConfig(finetune_step1=Step1Config(epochs=30, lr=0.01))
    curve = finetune_reconstruction(m, ep.support_x, cfg, seed=0)
    assert len(curve) == 31 and curve[-1] < curve[0]


@pytest.mark.parametrize("kind", ["CE", "D"])
def test_step2_updates_every_used_tensor(tiny_model, tiny_domains, kind):
    m = tiny_model()
    ep = episode_from(tiny_domains["strong"])
    enc = snapshot(m.encoder_params())
    finetune_classification(m, ep.support_x, ep.support_y, quick_cfg(), L.LossConfig(finetune_cls=kind), seed=1)
    assert all(np.abs(a - p.data).max() > 0 for a, p in zip(enc, m.encoder_params()))
    if kind == "CE":
        assert m.num_classes == 3


def test_step2_separable_toy_reaches_full_support_accuracy(tiny_model):
    toy = color_toy(n_way=3, per_class=6)
    m = tiny_model(seed=0)
    cfg = quick_cfg(finetune_step2=Step2Config(epochs=150, lr=0.05, augment=False))
    finetune_one_step(m, toy.images, toy.labels, cfg, L.LossConfig(), seed=0)
    ep = Episode(toy.images, toy.labels, toy.images, toy.labels, {0: 0, 1: 1, 2: 2},
                 np.arange(18), np.arange(18))
    assert np.mean(predict_query(m, ep, "CE", transductive=True) == toy.labels) == 1.0


def test_memorization_support_equals_query(tiny_model, tiny_domains):
    ep = episode_from(tiny_domains["strong"], n=2, k=4)
    ep = Episode(ep.support_x, ep.support_y, ep.support_x, ep.support_y, ep.class_map, ep.support_idx,
                 ep.support_idx)
    m = tiny_model(seed=1)
    cfg = quick_cfg(finetune_step2=Step2Config(epochs=200, lr=0.05, augment=False))
    res = finetune_one_step(m, ep.support_x, ep.support_y, cfg, L.LossConfig(), seed=0)
    assert np.mean(predict_query(m, ep, "CE", True) == ep.query_y) == 1.0
    assert np.mean(res.step2_loss[-10:]) < np.mean(res.step2_loss[:10])


def test_distance_finetune_needs_two_shots(tiny_model, tiny_domains):
    ep = episode_from(tiny_domains["strong"], k=1)
    with pytest.raises(SplitError):
        finetune_one_step(tiny_model(), ep.support_x, ep.support_y,
                          quick_cfg(finetune_step2=Step2Config(epochs=2, augment=False)),
                          L.LossConfig(finetune_cls="D"), seed=0)


def test_distance_finetune_loss_decreases(tiny_model, tiny_domains):
    ep = episode_from(tiny_domains["strong"], k=6)
    cfg = quick_cfg(finetune_step2=Step2Config(epochs=60, lr=0.05, augment=False))
    res = finetune_one_step(tiny_model(seed=3), ep.support_x, ep.support_y, cfg,
                            L.LossConfig(finetune_cls="D"), seed=0)
    assert np.mean(res.step2_loss[-10:]) < np.mean(res.step2_loss[:10])


def test_finetune_reproducible(tiny_model, tiny_domains):
    ep = episode_from(tiny_domains["strong"])
    prints = []
    for _ in range(2):
        m = tiny_model(seed=2)
        finetune_two_step(m, ep.support_x, ep.support_y, quick_cfg(), L.LossConfig(), seed=9)
        prints.append(m.fingerprint())
    assert prints[0] == prints[1]
