"""Episodic evaluation: fine-tune a copy of the checkpoint on each support
set, classify the query set, and report mean accuracy with a 95% interval."""

from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing as mp
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .datasets import Dataset, Episode, sample_episode
from .model import NsaeModel, load_checkpoint
from .numerics import Tensor, no_grad
from .seeding import derive_seed, rng_for
from .train import TrainConfig, finetune

FINETUNE_MODES = ("finetune", "none")


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    ci95: float
    episodes: int
    n_way: int
    k_shot: int
    n_query: int
    master_seed: int
    variant: str = ""
    combo: str = ""
    two_step: bool = True
    transductive: bool = True
    finetune_mode: str = "finetune"
    target: str = ""
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    CSV_FIELDS = ("target", "variant", "combo", "two_step", "n_way", "k_shot", "n_query", "episodes",
                  "mean", "ci95", "transductive", "finetune_mode", "master_seed", "config_hash")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def csv_row(self) -> dict:
        d = asdict(self)
        return {k: (repr(d[k]) if isinstance(d[k], float) else d[k]) for k in self.CSV_FIELDS}

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()

    def write(self, json_path, csv_path=None) -> None:
        """JSON report; the CSV row is appended (header only for a new file)."""
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            csv_path = Path(csv_path)
            new = not csv_path.exists() or csv_path.stat().st_size == 0
            with open(csv_path, "a") as fh:
                fh.write(self.to_csv(header=new))


def mean_ci95(accuracies) -> tuple[float, float]:
    """Mean and 1.96 * sample std / sqrt(E); the interval of a single episode is 0."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no episodes")
    mean = float(math.fsum(a) / a.size)
    if a.size == 1:
        return mean, 0.0
    return mean, float(1.96 * a.std(ddof=1) / math.sqrt(a.size))


# ---------------------------------------------------------------- prediction
def _features(model: NsaeModel, x: np.ndarray, transductive: bool) -> Tensor:
    mode = "transductive" if transductive and len(x) > 1 else "eval"
    return model.encode(x, mode)


def predict_query(model: NsaeModel, episode: Episode, finetune_cls: str = "CE",
                  transductive: bool = True) -> np.ndarray:
    """Episode-local labels for the query images.

    ``CE``: argmax of the head logits. ``D``: nearest prototype (cosine)
    with prototypes built from the full support set. With ``transductive``
    the batch-norm layers use each batch's own statistics.
    """
    with no_grad():
        q = _features(model, episode.query_x, transductive)
        if finetune_cls == "CE":
            return np.argmax(model.classify(q).data, axis=1)
        s = _features(model, episode.support_x, transductive)
        protos = L.prototypes(s, episode.support_y, episode.n_way)
        return np.argmax(L.distance_probs(q, protos).data, axis=1)


# ---------------------------------------------------------------- protocol
@dataclass
class _Job:
    model: NsaeModel
    dataset: Dataset
    n_way: int
    k_shot: int
    n_query: int
    cfg: TrainConfig
    loss_cfg: L.LossConfig
    master_seed: int
    two_step: bool
    finetune_mode: str
    transductive: bool


_JOB: _Job | None = None


def run_episode(job: _Job, index: int) -> float:
    seed = derive_seed(job.master_seed, "episode", index)
    ep = sample_episode(job.dataset, job.n_way, job.k_shot, job.n_query, rng_for(seed, "sample"))
    model = job.model.clone()
    if job.finetune_mode == "finetune":
        finetune(model, ep.support_x, ep.support_y, job.cfg, job.loss_cfg, derive_seed(seed, "finetune"),
                 two_step=job.two_step)
    elif job.loss_cfg.finetune_cls == "CE":
        model.reset_head(ep.n_way, rng_for(seed, "head"))
    pred = predict_query(model, ep, job.loss_cfg.finetune_cls, job.transductive)
    return float(np.mean(pred == ep.query_y))


def _init_worker(job: _Job) -> None:
    global _JOB
    _JOB = job


def _worker(index: int) -> float:
    return run_episode(_JOB, index)


def evaluate_protocol(checkpoint, target: Dataset, n_way: int = 5, k_shot: int = 5, n_query: int = 15,
                      episodes: int = 600, cfg: TrainConfig | None = None,
                      loss_cfg: L.LossConfig | None = None, master_seed: int = 0,
                      two_step: bool | None = None, finetune_mode: str = "finetune",
                      transductive: bool = True, jobs: int = 1, variant: str = "",
                      config_hash: str = "") -> EvalReport:
    """Run ``episodes`` independent episodes from the same checkpoint.

    ``checkpoint`` is a model or a checkpoint directory. Episode ``i`` uses
    seeds derived from ``(master_seed, i)`` only, so results do not depend
    on episode order or on ``jobs``. Any failing episode aborts the run.
    """
    if finetune_mode not in FINETUNE_MODES:
        raise ValueError(f"finetune_mode must be one of {FINETUNE_MODES}")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    model = checkpoint if isinstance(checkpoint, NsaeModel) else load_checkpoint(checkpoint)[0]
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or L.LossConfig()
    two = cfg.two_step if two_step is None else two_step
    job = _Job(model, target, n_way, k_shot, n_query, cfg, loss_cfg, master_seed, two, finetune_mode,
               transductive)
    if jobs > 1:
        with mp.get_context("fork").Pool(jobs, initializer=_init_worker, initargs=(job,)) as pool:
            accs = pool.map(_worker, range(episodes), chunksize=1)
    else:
        accs = [run_episode(job, i) for i in range(episodes)]
    mean, ci = mean_ci95(accs)
    return EvalReport(accs, mean, ci, episodes, n_way, k_shot, n_query, master_seed, variant,
                      loss_cfg.combo, two, transductive, finetune_mode, target.domain_id, config_hash)
