"""Pipelines shared by the CLI and the scripts: benchmark data, cached
pre-training, the ablation grid and the handcrafted-noise study."""

from __future__ import annotations

import csv
import io
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import losses as L
from .config import RunConfig, content_hash
from .datasets import Dataset, generate_domain
from .evaluation import EvalReport, evaluate_protocol
from .model import NsaeModel, load_checkpoint, save_checkpoint
from .seeding import derive_seed
from .train import pretrain, write_history_csv

log = logging.getLogger(__name__)

# ablation variant -> (pre-training variant, two-step fine-tuning)
VARIANT_PLAN = {
    "baseline": ("baseline", False),
    "SAE": ("SAE", True),
    "SAE*": ("SAE*", True),
    "NSAE(-)": ("NSAE", False),
    "NSAE": ("NSAE", True),
}


def build_benchmark(cfg: RunConfig, targets=None) -> dict[str, Dataset]:
    """Source domain plus the configured target domains, rendered from the master seed."""
    specs = cfg.domain_specs()
    out = {"source": generate_domain(specs["source"], cfg.data.source_images_per_class, cfg.seed)}
    for name in targets or cfg.data.targets:
        out[name] = generate_domain(specs[name], cfg.data.target_images_per_class, cfg.seed)
    return out


def loss_for(cfg: RunConfig, variant: str, combo: str, noise: tuple[str, str] | None = None) -> L.LossConfig:
    pre, fine = combo.split("+")
    kind, setting = noise or (None, None)
    return replace(cfg.loss, variant=variant, pretrain_cls=pre, finetune_cls=fine,
                   noise_kind=kind, noise_setting=setting)


def pretrain_key(cfg: RunConfig, loss_cfg: L.LossConfig) -> str:
    """Hash of everything that determines a pre-trained checkpoint."""
    loss = asdict(loss_cfg)
    loss.pop("finetune_cls")
    content = {
        "profile": cfg.profile,
        "seed": cfg.seed,
        "data": asdict(cfg.data),
        "pretrain": asdict(cfg.train.pretrain),
        "augmentation": asdict(cfg.train.augmentation),
        "loss": loss,
    }
    if loss_cfg.noise_kind is not None:
        content["noise"] = asdict(cfg.noise_study.params)
    return content_hash(content)


def pretrained_model(cfg: RunConfig, loss_cfg: L.LossConfig, source: Dataset, cache_dir=None,
                     progress: bool = False) -> tuple[NsaeModel, dict]:
    """Pre-train on ``source``, reusing ``cache_dir/<key>`` when it already holds the checkpoint."""
    key = pretrain_key(cfg, loss_cfg)
    target = Path(cache_dir) / key if cache_dir is not None else None
    if target is not None and (target / "manifest.json").exists():
        log.info("using cached checkpoint %s", target)
        return load_checkpoint(target)
    model = NsaeModel(cfg.profile, len(source.classes), seed=derive_seed(cfg.seed, "init"))
    t0 = time.time()
    res = pretrain(model, source, cfg.train, loss_cfg, progress=progress, noise_params=cfg.noise_study.params)
    meta = {
        "pretrain_key": key,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "variant": loss_cfg.variant,
        "loss": asdict(loss_cfg),
        "epochs": cfg.train.pretrain.epochs,
        "final_loss": res.history[-1]["total"],
    }
    log.info("pre-trained %s (%s) in %.0fs", loss_cfg.variant, key, time.time() - t0)
    if target is not None:
        tmp = target.with_name(target.name + ".partial")
        shutil.rmtree(tmp, ignore_errors=True)
        save_checkpoint(model, tmp, meta)
        write_history_csv(res.history, tmp / "history.csv")
        tmp.rename(target)
    return model, meta


def evaluate(model: NsaeModel, target: Dataset, cfg: RunConfig, loss_cfg: L.LossConfig, two_step: bool,
             variant: str, k_shot: int | None = None) -> EvalReport:
    p = cfg.protocol
    return evaluate_protocol(model, target, p.n_way, k_shot or p.k_shot, p.n_query, p.episodes, cfg.train,
                             loss_cfg, master_seed=cfg.seed, two_step=two_step,
                             finetune_mode=p.finetune_mode, transductive=p.transductive, jobs=cfg.jobs,
                             variant=variant, config_hash=cfg.hash())


# ---------------------------------------------------------------- tables
@dataclass
class ResultTable:
    """Rows of labelled EvalReports with a flat CSV view."""

    kind: str
    config_hash: str
    seed: int
    rows: list[dict] = field(default_factory=list)

    def add(self, label: str, report: EvalReport, **extra) -> None:
        self.rows.append({"label": label, **extra, "report": report})

    def cell(self, label: str, target: str, combo: str | None = None) -> EvalReport:
        for r in self.rows:
            rep = r["report"]
            if r["label"] == label and rep.target == target and (combo is None or rep.combo == combo):
                return rep
        raise KeyError((label, target, combo))

    def to_csv(self) -> str:
        buf = io.StringIO()
        extra = [k for k in self.rows[0] if k not in ("label", "report")] if self.rows else []
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", *extra, "target", "combo", "two_step", "n_way", "k_shot", "episodes",
                    "mean", "ci95", "seed", "config_hash"])
        for r in self.rows:
            rep = r["report"]
            w.writerow([r["label"], *(r[k] for k in extra), rep.target, rep.combo, rep.two_step,
                        rep.n_way, rep.k_shot, rep.episodes, repr(rep.mean), repr(rep.ci95), self.seed,
                        self.config_hash])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [{k: (json.loads(v.to_json()) if k == "report" else v) for k, v in r.items()} for r in self.rows]
        return json.dumps({"kind": self.kind, "config_hash": self.config_hash, "seed": self.seed,
                           "rows": rows}, indent=2, sort_keys=True) + "\n"

    def write(self, directory, stem: str) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        a, b = directory / f"{stem}.csv", directory / f"{stem}.json"
        a.write_text(self.to_csv())
        b.write_text(self.to_json())
        return a, b


def run_ablation(variants, combos, benchmark: dict[str, Dataset], cfg: RunConfig, cache_dir=None,
                 targets=None, progress: bool = False) -> ResultTable:
    """Pre-train each needed (variant, pre-training loss) once and evaluate every
    requested (variant, combo, target) cell. NSAE(-) and NSAE share a checkpoint."""
    unknown = set(variants) - set(VARIANT_PLAN)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    targets = targets or [t for t in benchmark if t != "source"]
    table = ResultTable("ablation", cfg.hash(), cfg.seed)
    for variant in [v for v in VARIANT_PLAN if v in set(variants)]:
        pre_variant, two = VARIANT_PLAN[variant]
        for combo in combos:
            loss_cfg = loss_for(cfg, pre_variant, combo)
            model, _ = pretrained_model(cfg, loss_cfg, benchmark["source"], cache_dir, progress)
            for t in targets:
                rep = evaluate(model, benchmark[t], cfg, loss_cfg, two, variant)
                log.info("%s %s %s: %.4f +- %.4f", variant, combo, t, rep.mean, rep.ci95)
                table.add(variant, rep)
    return table


def noise_study_rows(cfg: RunConfig) -> list[tuple[str, tuple[str, str] | None, str, bool]]:
    """(label, noise, pre-training variant, two_step) for every row of the study."""
    rows = []
    for setting in cfg.noise_study.settings:
        for kind in cfg.noise_study.kinds:
            # setting (a) never trains a decoder, so it has nothing to reconstruct with
            rows.append((f"{kind}-{setting}", (kind, setting), "baseline", setting == "b"))
    rows.append(("NSAE", None, "NSAE", True))
    return rows


def noise_study(benchmark: dict[str, Dataset], cfg: RunConfig, cache_dir=None, targets=None,
                progress: bool = False) -> ResultTable:
    targets = targets or [t for t in benchmark if t != "source"]
    combo = cfg.noise_study.combo
    table = ResultTable("noise-study", cfg.hash(), cfg.seed)
    for label, noise, variant, two in noise_study_rows(cfg):
        loss_cfg = loss_for(cfg, variant, combo, noise)
        model, _ = pretrained_model(cfg, loss_cfg, benchmark["source"], cache_dir, progress)
        for t in targets:
            rep = evaluate(model, benchmark[t], cfg, loss_cfg, two, label)
            log.info("%s %s: %.4f +- %.4f", label, t, rep.mean, rep.ci95)
            table.add(label, rep, noise=noise[0] if noise else "", setting=noise[1] if noise else "")
    return table


@dataclass
class ClaimResult:
    baseline: EvalReport
    nsae: EvalReport
    icc: object  # analysis.IccReport, traditional (a) over NSAE (b)

    @property
    def gap(self) -> float:
        return self.nsae.mean - self.baseline.mean


def main_claim(cfg: RunConfig, target: str = "strong", cache_dir=None, icc_reps: int | None = None,
               progress: bool = False) -> ClaimResult:
    """Baseline pre-training with one-step fine-tuning against NSAE pre-training
    with two-step fine-tuning, plus the ICC comparison of the two checkpoints."""
    from .analysis import compare_extractors, model_extractor

    bench = build_benchmark(cfg, targets=[target])
    combo = cfg.loss.combo
    reports, models = [], []
    for variant in ("baseline", "NSAE"):
        pre_variant, two = VARIANT_PLAN[variant]
        loss_cfg = loss_for(cfg, pre_variant, combo)
        model, _ = pretrained_model(cfg, loss_cfg, bench["source"], cache_dir, progress)
        models.append(model)
        reports.append(evaluate(model, bench[target], cfg, loss_cfg, two, variant))
    icc = compare_extractors(model_extractor(models[0]), model_extractor(models[1]),
                             {"source": bench["source"], target: bench[target]},
                             cfg.icc.classes_per_rep, icc_reps or cfg.icc.reps, cfg.seed,
                             ("baseline", "NSAE"), cfg.hash())
    return ClaimResult(reports[0], reports[1], icc)
