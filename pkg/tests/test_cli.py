import csv
import io
import json
import os

import pytest
import yaml

from nsae.cli import main
from nsae.model import NsaeModel, save_checkpoint

SMALL = {
    "data": {"source_images_per_class": 6, "target_images_per_class": 12},
    "train": {"pretrain": {"epochs": 2, "batch_size": 16}, "finetune_step1": {"epochs": 1},
              "finetune_step2": {"epochs": 2, "augment_copies": 2}},
    "protocol": {"episodes": 2, "n_query": 4},
    "icc": {"reps": 3},
}


def write_cfg(path, **sections):
    cfg = {k: dict(v) for k, v in SMALL.items()}
    for k, v in sections.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    path.write_text(yaml.safe_dump(cfg))
    return path.name


@pytest.fixture
def small(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write_cfg(tmp_path / "small.yaml")

    def run(*args, config="small.yaml"):
        return main([*args, "--config", config])

    return run


def tree(path):
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_generate_writes_three_domains(small, tmp_path):
    assert small("generate", "--out", "o") == 0
    assert sorted(p.name for p in (tmp_path / "o" / "data").iterdir()) == ["mild", "source", "strong"]
    man = json.loads((tmp_path / "o/data/strong/manifest.json").read_text())
    assert man["meta"]["seed"] == 0 and len(man["meta"]["config_hash"]) == 16
    assert small("generate", "--out", "o2") == 0
    assert tree(tmp_path / "o/data") == tree(tmp_path / "o2/data")


def test_nothing_written_outside_out(small, tmp_path):
    before = set(os.listdir(tmp_path))
    assert small("generate", "--out", "sub/o") == 0
    assert set(os.listdir(tmp_path)) - before == {"sub"}
    assert os.listdir(tmp_path / "sub") == ["o"]


def test_config_echo_written(small, tmp_path):
    small("generate", "--out", "o", "--seed", "5")
    text = (tmp_path / "o/config.yaml").read_text()
    assert text.startswith("# config_hash: ") and "seed: 5" in text


def test_pretrain_reproducible_with_history(small, tmp_path):
    assert small("pretrain", "--out", "a", "--variant", "SAE") == 0
    assert small("pretrain", "--out", "b", "--variant", "SAE") == 0
    (ck,) = (tmp_path / "a/checkpoints").iterdir()
    assert tree(ck) == tree(tmp_path / "b/checkpoints" / ck.name)
    man = json.loads((ck / "manifest.json").read_text())
    assert man["meta"]["variant"] == "SAE" and man["meta"]["seed"] == 0
    rows = list(csv.DictReader(io.StringIO((ck / "history.csv").read_text())))
    assert len(rows) == 2 and rows[0]["rec"] and rows[0]["cls_orig"]


def test_pretrain_rejects_harness_only_variant(small):
    assert small("pretrain", "--out", "o", "--variant", "NSAE(-)") == 2


def test_finetune_eval_k_sweep(small, tmp_path):
    k = write_cfg(tmp_path / "k.yaml", data={"target_images_per_class": 55, "targets": ["strong"]},
                  protocol={"episodes": 1, "n_query": 2, "k_values": [5, 20, 50], "transductive": False})
    assert small("finetune-eval", "--out", "o", "--one-step", config=k) == 0
    reports = sorted((tmp_path / "o/eval").glob("*.json"))
    assert len(reports) == 3
    for r in reports:
        rep = json.loads(r.read_text())
        assert rep["transductive"] is False and rep["two_step"] is False and rep["episodes"] == 1
    assert len((tmp_path / "o/eval/reports.csv").read_text().splitlines()) == 4


def test_finetune_eval_from_checkpoint(small, tmp_path):
    small("pretrain", "--out", "o", "--variant", "baseline")
    (ck,) = (tmp_path / "o/checkpoints").iterdir()
    assert small("finetune-eval", "--out", "o", "--checkpoint", str(ck), "--variant", "baseline",
                 "--episodes", "3") == 0
    rep = json.loads((tmp_path / "o/eval/baseline_CE-CE_strong_k5.json").read_text())
    assert rep["episodes"] == 3 and rep["variant"] == "baseline" and rep["master_seed"] == 0


def test_ablate_partial(small, tmp_path):
    assert small("ablate", "--out", "o", "--combo", "CE+D") == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o/ablation.csv").read_text())))
    assert [r["row"] for r in rows][::2] == ["baseline", "SAE", "SAE*", "NSAE(-)", "NSAE"]
    assert {r["combo"] for r in rows} == {"CE+D"} and {r["target"] for r in rows} == {"mild", "strong"}
    assert len(list((tmp_path / "o/checkpoints").iterdir())) == 4  # NSAE(-) reuses NSAE
    stamp = {p.name: p.stat().st_mtime_ns for p in (tmp_path / "o/checkpoints").iterdir()}
    assert small("ablate", "--out", "o", "--combo", "CE+D", "--variant", "NSAE") == 0
    assert {p.name: p.stat().st_mtime_ns for p in (tmp_path / "o/checkpoints").iterdir()} == stamp


def test_noise_study_nine_rows(small, tmp_path):
    n = write_cfg(tmp_path / "n.yaml", data={"source_images_per_class": 4, "targets": ["strong"]})
    assert small("noise-study", "--out", "o", config=n) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "o/noise_study.csv").read_text())))
    assert len(rows) == 9
    assert {r["combo"] for r in rows} == {"BSR+CE"}
    assert sum(r["setting"] == "a" for r in rows) == 4 and rows[-1]["row"] == "NSAE"


def _checkpoint(path, profile):
    return save_checkpoint(NsaeModel(profile, 8, seed=0), path, {"variant": "x"})


def test_icc_outputs_and_seed(small, tmp_path):
    a = _checkpoint(tmp_path / "ca", "fast32")
    b = _checkpoint(tmp_path / "cb", "fast32")
    assert small("icc", "--out", "o", "--seed", "4", "--checkpoint-a", str(a), "--checkpoint-b", str(b)) == 0
    rep = json.loads((tmp_path / "o/icc.json").read_text())
    assert rep["master_seed"] == 4 and rep["ratios"][0]["icc_ratio"] == 1.0
    assert (tmp_path / "o/icc.csv").read_text().startswith("domain,icc_ratio")


def test_icc_refuses_mismatched_profiles(small, tmp_path):
    a = _checkpoint(tmp_path / "ca", "fast32")
    b = _checkpoint(tmp_path / "cb", "paper84")
    assert small("icc", "--out", "o", "--checkpoint-a", str(a), "--checkpoint-b", str(b)) == 2
    assert small("icc", "--out", "o", "--checkpoint-a", str(a)) == 2


@pytest.mark.parametrize("config, code", [
    ("bogus: 1\n", 2),
    ("train: {pretrain: {lr: -1.0}}\n", 2),
    ("data: {source_images_per_class: 6}\ntrain: {pretrain: {epochs: 3, batch_size: 8, lr: 10000.0, momentum: 0.0}}\n", 3),
])
def test_exit_codes(small, tmp_path, config, code):
    (tmp_path / "c.yaml").write_text(config)
    assert small("pretrain", "--out", "o", config="c.yaml") == code


def test_io_errors(small, tmp_path):
    (tmp_path / "blocker").write_text("")
    assert small("generate", "--out", "blocker/o") == 4
    assert small("generate", "--out", "o", config="missing.yaml") == 4
    assert small("icc", "--out", "o", "--checkpoint-a", "nope", "--checkpoint-b", "nope") == 4
