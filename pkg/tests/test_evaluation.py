import inspect
import math

import numpy as np
import pytest

from nsae import losses as L
from nsae.datasets import Episode, SamplingError, sample_episode
from nsae.evaluation import EvalReport, _Job, evaluate_protocol, mean_ci95, predict_query, run_episode
from nsae.train import PretrainConfig, Step1Config, Step2Config, TrainConfig

from conftest import color_toy

FAST = TrainConfig(pretrain=PretrainConfig(epochs=1), finetune_step1=Step1Config(epochs=2, lr=0.01),
                   finetune_step2=Step2Config(epochs=4, augment_copies=2))


def test_ci_formula():
    accs = [0.2, 0.4, 0.6, 0.8]
    mean, ci = mean_ci95(accs)
    assert mean == pytest.approx(0.5, abs=1e-15)
    assert ci == pytest.approx(1.96 * np.std(accs, ddof=1) / 2, abs=1e-15)


def test_ci_single_episode_zero():
    assert mean_ci95([0.7]) == (0.7, 0.0)


def test_protocol_defaults():
    sig = inspect.signature(evaluate_protocol).parameters
    assert (sig["n_way"].default, sig["k_shot"].default, sig["n_query"].default, sig["episodes"].default) == (5, 5, 15, 600)


def _episode_of(ds):
    return Episode(ds.images, ds.labels, ds.images, ds.labels, {c: c for c in range(ds.labels.max() + 1)},
                   np.arange(len(ds)), np.arange(len(ds)))


def test_query_identical_to_support_predicts_its_class(tiny_model):
    toy = color_toy(n_way=3, per_class=1, noise=0.0)
    m = tiny_model(seed=0)
    ep = _episode_of(toy)
    assert predict_query(m, ep, "D", transductive=False).tolist() == [0, 1, 2]


def test_one_way_episode(tiny_model, tiny_domains):
    ep = sample_episode(tiny_domains["strong"], 1, 2, 5, np.random.default_rng(0))
    m = tiny_model()
    assert np.all(predict_query(m, ep, "D") == 0)
    m.reset_head(1, np.random.default_rng(0))
    assert np.all(predict_query(m, ep, "CE") == 0)


@pytest.mark.parametrize("transductive", [True, False])
def test_distance_prediction_is_nearest_prototype(tiny_model, tiny_domains, transductive):
    m = tiny_model(seed=3)
    mode = "transductive" if transductive else "eval"
    for s in range(5):
        ep = sample_episode(tiny_domains["strong"], 4, 3, 5, np.random.default_rng(s))
        q = m.encode(ep.query_x, mode).data.astype(np.float64)
        sf = m.encode(ep.support_x, mode).data.astype(np.float64)
        protos = [sf[ep.support_y == c].mean(axis=0) for c in range(4)]
        cos = lambda a, b: 1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b))  # noqa: E731
        want = [int(np.argmin([cos(v, p) for p in protos])) for v in q]
        assert predict_query(m, ep, "D", transductive).tolist() == want


def test_transductive_uses_query_statistics(tiny_model, tiny_domains):
    m = tiny_model(seed=1)
    m.reset_head(3, np.random.default_rng(0))
    ep = sample_episode(tiny_domains["strong"], 3, 2, 6, np.random.default_rng(0))
    logits_t = m.classify(m.encode(ep.query_x, "transductive")).data
    logits_e = m.classify(m.encode(ep.query_x, "eval")).data
    assert not np.allclose(logits_t, logits_e)
    np.testing.assert_array_equal(predict_query(m, ep, "CE", True), logits_t.argmax(axis=1))
    np.testing.assert_array_equal(predict_query(m, ep, "CE", False), logits_e.argmax(axis=1))


def test_report_mean_is_arithmetic_mean(tiny_model, tiny_domains):
    rep = evaluate_protocol(tiny_model(), tiny_domains["strong"], 3, 2, 4, 5, FAST, master_seed=1)
    assert len(rep.accuracies) == rep.episodes == 5
    assert abs(rep.mean - math.fsum(rep.accuracies) / 5) < 1e-12
    assert 0 <= rep.mean <= 1 and rep.ci95 >= 0
    assert rep.combo == "CE+CE" and rep.target == "strong"


def test_episode_order_irrelevant(tiny_model, tiny_domains):
    model = tiny_model(seed=2)
    job = _Job(model, tiny_domains["strong"], 3, 2, 4, FAST, L.LossConfig(), 7, True, "finetune", True)
    forward = [run_episode(job, i) for i in range(4)]
    backward = [run_episode(job, i) for i in reversed(range(4))][::-1]
    assert forward == backward
    rep = evaluate_protocol(model, tiny_domains["strong"], 3, 2, 4, 4, FAST, master_seed=7, two_step=True)
    assert rep.accuracies == forward


def test_jobs_do_not_change_report(tiny_model, tiny_domains):
    args = (tiny_model(seed=4), tiny_domains["strong"], 3, 2, 4, 6, FAST)
    one = evaluate_protocol(*args, master_seed=3, jobs=1)
    many = evaluate_protocol(*args, master_seed=3, jobs=3)
    assert one.to_json() == many.to_json()


def test_checkpoint_unchanged_by_evaluation(tiny_model, tiny_domains):
    m = tiny_model(seed=5)
    fp = m.fingerprint()
    evaluate_protocol(m, tiny_domains["strong"], 3, 2, 4, 2, FAST)
    assert m.fingerprint() == fp


def test_failed_episode_aborts(tiny_model, tiny_domains):
    with pytest.raises(SamplingError):
        evaluate_protocol(tiny_model(), tiny_domains["strong"], 5, 10, 10, 2, FAST)


def test_report_serialization(tmp_path, tiny_model, tiny_domains):
    rep = evaluate_protocol(tiny_model(), tiny_domains["strong"], 3, 2, 4, 3, FAST, finetune_mode="none",
                            variant="baseline", config_hash="abc")
    assert EvalReport.from_json(rep.to_json()) == rep
    rep.write(tmp_path / "r.json", tmp_path / "t.csv")
    rep.write(tmp_path / "r2.json", tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("target,variant,combo")
    assert "abc" in lines[1]


def test_untrained_model_near_chance(tiny_model, tiny_domains):
    rep = evaluate_protocol(tiny_model(seed=6), tiny_domains["strong"], 5, 1, 5, 300, FAST,
                            finetune_mode="none", master_seed=2)
    se = math.sqrt(0.2 * 0.8 / (300 * 25))
    # episodes share a model, so allow per-episode spread rather than per-query
    assert abs(rep.mean - 0.2) < 4 * max(se, np.std(rep.accuracies, ddof=1) / math.sqrt(300))


def test_invalid_mode(tiny_model, tiny_domains):
    with pytest.raises(ValueError):
        evaluate_protocol(tiny_model(), tiny_domains["strong"], 3, 2, 4, 1, FAST, finetune_mode="frozen")

