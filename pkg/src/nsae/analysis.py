"""Feature discriminability: intra-/inter-class variation of normalized
embeddings, their ratio (ICC), extractor comparisons and embedding dumps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datasets import Dataset
from .model import NsaeModel
from .numerics import no_grad
from .seeding import rng_for

DEGENERACY_FLOOR = 1e-12

Extractor = Callable[[np.ndarray], np.ndarray]


class DegeneracyError(ValueError):
    pass


class DegenerateIntraError(DegeneracyError):
    """Raised when the intra-class variation is below the floor; carries both variations."""

    def __init__(self, d_intra: float, d_inter: float):
        super().__init__(f"intra-class variation {d_intra:.3e} below {DEGENERACY_FLOOR:g}; ICC undefined")
        self.d_intra, self.d_inter = d_intra, d_inter


class AnalysisError(RuntimeError):
    pass


def normalize_features(features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegeneracyError(f"zero-norm feature rows: {zero.tolist()}")
    return f / norms[:, None]


@dataclass(frozen=True)
class IccStats:
    d_intra: float
    d_inter: float
    icc: float


def variations(features, labels) -> tuple[float, float]:
    """(d_intra, d_inter) of the normalized features."""
    f = normalize_features(features)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegeneracyError(f"need at least 2 classes, got {len(classes)}")
    centers = np.stack([f[labels == c].mean(axis=0) for c in classes])
    intra = np.mean([np.mean(np.sum((f[labels == c] - centers[i]) ** 2, axis=1))
                     for i, c in enumerate(classes)])
    k = len(classes)
    sq = np.sum(centers ** 2, axis=1)
    pair = np.clip(sq[:, None] + sq[None, :] - 2 * centers @ centers.T, 0, None)
    np.fill_diagonal(pair, 0.0)
    inter = pair.sum() / (k * (k - 1))
    return float(intra), float(inter)


def icc(features, labels) -> IccStats:
    d_intra, d_inter = variations(features, labels)
    if d_intra < DEGENERACY_FLOOR:
        raise DegenerateIntraError(d_intra, d_inter)
    return IccStats(d_intra, d_inter, d_inter / d_intra)


# ---------------------------------------------------------------- experiments
def model_extractor(model: NsaeModel, batch_size: int = 200) -> Extractor:
    """Encoder features with running batch-norm statistics (no fine-tuning)."""

    def extract(x: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.concatenate([model.encode(x[i:i + batch_size], "eval").data
                                   for i in range(0, len(x), batch_size)])

    return extract


@dataclass
class IccExperiment:
    d_intra: float
    d_inter: float
    icc: float
    reps: int
    reps_used: int
    reps_degenerate: int
    icc_min: float
    icc_max: float


def icc_experiment(extractor: Extractor, dataset: Dataset, classes_per_rep: int = 5, reps: int = 600,
                   rng: np.random.Generator | None = None, features: np.ndarray | None = None) -> IccExperiment:
    """Average intra/inter variation and ICC over ``reps`` random class subsets.
    Degenerate repetitions are excluded and counted."""
    classes = dataset.classes
    if len(classes) < classes_per_rep:
        raise AnalysisError(f"dataset has {len(classes)} classes, {classes_per_rep} needed per repetition")
    rng = rng if rng is not None else np.random.default_rng(0)
    feats = extractor(dataset.images) if features is None else features
    by_class = dataset.indices_by_class()
    stats, degenerate = [], 0
    for _ in range(reps):
        chosen = rng.choice(classes, size=classes_per_rep, replace=False)
        idx = np.concatenate([by_class[int(c)] for c in chosen])
        try:
            stats.append(icc(feats[idx], dataset.labels[idx]))
        except DegenerateIntraError:
            degenerate += 1
    if not stats:
        raise AnalysisError(f"all {reps} repetitions had degenerate intra-class variation")
    iccs = np.array([s.icc for s in stats])
    return IccExperiment(float(np.mean([s.d_intra for s in stats])), float(np.mean([s.d_inter for s in stats])),
                         float(iccs.mean()), reps, len(stats), degenerate, float(iccs.min()), float(iccs.max()))


@dataclass
class IccReport:
    entries: list[dict]  # extractor, domain and the IccExperiment fields
    ratios: list[dict]  # domain, icc_ratio, inter_ratio (a / b; None when undefined)
    reps: int
    classes_per_rep: int
    master_seed: int
    config_hash: str = ""
    extractors: tuple[str, str] = ("a", "b")
    extra: dict = field(default_factory=dict)

    def ratio(self, domain: str, key: str = "icc_ratio"):
        return next(r[key] for r in self.ratios if r["domain"] == domain)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Plot-ready per-domain ratios."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["domain", "icc_ratio", "inter_ratio", "reps", "classes_per_rep", "master_seed", "config_hash"])
        for r in self.ratios:
            w.writerow([r["domain"], r["icc_ratio"], r["inter_ratio"], self.reps, self.classes_per_rep,
                        self.master_seed, self.config_hash])
        return buf.getvalue()


def _safe_ratio(a: float, b: float):
    return a / b if b > DEGENERACY_FLOOR and a >= 0 else None


def compare_extractors(extractor_a: Extractor, extractor_b: Extractor, datasets: dict[str, Dataset],
                       classes_per_rep: int = 5, reps: int = 600, master_seed: int = 0,
                       names: tuple[str, str] = ("a", "b"), config_hash: str = "") -> IccReport:
    """ICC of both extractors on every domain, with ratios a/b per domain.
    Both extractors see the same class subsets on a given domain."""
    if names[0] == names[1]:
        names = (f"{names[0]}-a", f"{names[1]}-b")
    entries, ratios = [], []
    for domain, ds in datasets.items():
        res = []
        for name, ex in zip(names, (extractor_a, extractor_b)):
            r = icc_experiment(ex, ds, classes_per_rep, reps, rng_for(master_seed, "icc", domain))
            res.append(r)
            entries.append({"extractor": name, "domain": domain, **asdict(r)})
        a, b = res
        ratios.append({"domain": domain, "icc_ratio": _safe_ratio(a.icc, b.icc),
                       "inter_ratio": _safe_ratio(a.d_inter, b.d_inter)})
    return IccReport(entries, ratios, reps, classes_per_rep, master_seed, config_hash, tuple(names))


# ---------------------------------------------------------------- embedding dumps
EMBED_MAGIC = "nsae-embeddings"


def dump_embeddings(extractor: Extractor, dataset: Dataset, class_subset, path) -> Path:
    """Text header line ``nsae-embeddings dim=D count=N``, then N binary rows of
    a little-endian int64 label followed by D little-endian float32 values."""
    classes = list(class_subset)
    missing = set(classes) - set(dataset.classes.tolist())
    if missing:
        raise ValueError(f"classes not in dataset: {sorted(missing)}")
    sub = dataset.subset(classes)
    feats = np.asarray(extractor(sub.images), dtype="<f4")
    row = np.dtype([("label", "<i8"), ("feature", "<f4", (feats.shape[1],))])
    rows = np.empty(len(sub), dtype=row)
    rows["label"] = sub.labels
    rows["feature"] = feats
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{EMBED_MAGIC} dim={feats.shape[1]} count={len(sub)}\n".encode())
        fh.write(rows.tobytes())
    return path


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, dim, count = raw[:nl].decode().split()
    if magic != EMBED_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    dim, count = int(dim.split("=")[1]), int(count.split("=")[1])
    row = np.dtype([("label", "<i8"), ("feature", "<f4", (dim,))])
    rows = np.frombuffer(raw, dtype=row, count=count, offset=nl + 1)
    return rows["label"].copy(), rows["feature"].copy()
