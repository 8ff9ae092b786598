"""Procedural source/target domains, episode sampling, augmentation and noise.

Every image is a pure function of ``(domain spec, seed, class id, instance
index)``: a textured, colored blob with a class-specific radial profile on a
noisy background. Target domains use their own class ids (disjoint from the
source) and apply a domain shift: hue rotation, texture-frequency scaling,
background statistics, saturation and contrast.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TEXTURES = ("stripes", "rings", "checker", "spots")


class SamplingError(ValueError):
    pass


class SplitError(ValueError):
    pass


class NoiseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainShift:
    """Identity at the defaults."""

    hue_degrees: float = 0.0
    texture_freq_scale: float = 1.0
    background_mean_shift: float = 0.0
    background_std_scale: float = 1.0
    saturation_scale: float = 1.0
    contrast: float = 1.0


@dataclass(frozen=True)
class DomainSpec:
    name: str
    class_count: int
    class_offset: int
    image_size: int = 84
    shift: DomainShift = field(default_factory=DomainShift)
    generator_seed: int = 1234
    # class-generator ranges
    saturation_range: tuple[float, float] = (0.55, 1.0)
    value_range: tuple[float, float] = (0.55, 0.95)
    freq_range: tuple[float, float] = (1.5, 4.0)
    background_mean: float = 0.5
    background_std: float = 0.12
    pixel_noise: float = 0.03

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["shift"] = DomainShift(**d.get("shift", {}))
        for k in ("saturation_range", "value_range", "freq_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ClassPrototype:
    class_id: int
    lobes: int
    lobe_amp: float
    lobe_phase: float
    elongation: float
    texture: str
    tex_angle: float
    tex_freq: float
    tex_strength: float
    color: tuple[float, float, float]
    color2: tuple[float, float, float]


def benchmark_specs(image_size: int = 84, generator_seed: int = 1234) -> dict[str, DomainSpec]:
    """Source domain plus a mild-shift and a strong-shift target domain."""
    return {
        "source": DomainSpec("source", 8, 0, image_size, DomainShift(), generator_seed),
        "mild": DomainSpec(
            "mild", 8, 100, image_size,
            DomainShift(hue_degrees=60.0, texture_freq_scale=1.2, background_mean_shift=-0.05,
                        background_std_scale=1.3, saturation_scale=0.8, contrast=0.9),
            generator_seed),
        "strong": DomainSpec(
            "strong", 8, 200, image_size,
            DomainShift(hue_degrees=150.0, texture_freq_scale=1.6, background_mean_shift=-0.2,
                        background_std_scale=0.5, saturation_scale=0.15, contrast=0.6),
            generator_seed),
    }


# ---------------------------------------------------------------- rendering
def class_prototype(spec: DomainSpec, class_index: int) -> ClassPrototype:
    cid = spec.class_offset + class_index
    rng = np.random.default_rng([spec.generator_seed, 7, cid])
    hue = rng.uniform()
    sat = rng.uniform(*spec.saturation_range)
    val = rng.uniform(*spec.value_range)
    color = colorsys.hsv_to_rgb(hue, sat, val)
    hue2 = (hue + rng.uniform(0.3, 0.7)) % 1.0
    color2 = colorsys.hsv_to_rgb(hue2, sat, 1.0 - 0.6 * val)
    return ClassPrototype(
        class_id=cid,
        lobes=int(rng.choice([0, 2, 3, 4, 5, 6])),
        lobe_amp=float(rng.uniform(0.15, 0.35)),
        lobe_phase=float(rng.uniform(0, 2 * math.pi)),
        elongation=float(rng.uniform(0.7, 1.0)),
        texture=str(rng.choice(TEXTURES)),
        tex_angle=float(rng.uniform(0, math.pi)),
        tex_freq=float(rng.uniform(*spec.freq_range)),
        tex_strength=float(rng.uniform(0.5, 0.9)),
        color=tuple(float(c) for c in color),
        color2=tuple(float(c) for c in color2),
    )


def _hue_rotate(rgb: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate colors about the gray axis (last axis is RGB)."""
    if degrees == 0.0:
        return rgb
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + (1 - c) * k, k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + (1 - c) * k],
    ])
    return rgb @ m.T


def _desaturate(rgb: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return rgb
    gray = rgb.mean(axis=-1, keepdims=True)
    return gray + scale * (rgb - gray)


def render_image(spec: DomainSpec, proto: ClassPrototype, instance: int, seed: int) -> np.ndarray:
    """One 3xHxW float32 image in [0, 1]."""
    rng = np.random.default_rng([seed, proto.class_id, instance])
    sh = spec.shift
    n = spec.image_size
    lin = (np.arange(n) + 0.5) / n * 2 - 1
    v, u = np.meshgrid(lin, lin, indexing="ij")

    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    scale = rng.uniform(0.5, 0.68)
    rot = rng.uniform(-0.45, 0.45)
    x, y = u - cx, v - cy
    cr, sr = math.cos(rot), math.sin(rot)
    xr, yr = cr * x + sr * y, -sr * x + cr * y
    yr = yr / proto.elongation
    r = np.sqrt(xr * xr + yr * yr)
    phi = np.arctan2(yr, xr)
    amp = proto.lobe_amp * rng.uniform(0.8, 1.2)
    radius = scale * (1 + amp * np.cos(proto.lobes * phi + proto.lobe_phase)) if proto.lobes else scale
    mask = 1.0 / (1.0 + np.exp(-(radius - r) * n / 2.5))

    freq = proto.tex_freq * sh.texture_freq_scale * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * math.pi)
    ang = proto.tex_angle + rot
    w = 2 * math.pi * freq
    if proto.texture == "stripes":
        t = np.sin(w * (xr * math.cos(ang) + yr * math.sin(ang)) + phase)
    elif proto.texture == "rings":
        t = np.sin(w * r * 1.5 + phase)
    elif proto.texture == "checker":
        t = np.sin(w * xr + phase) * np.sin(w * yr + phase)
        t = np.tanh(3 * t)
    else:
        t = np.cos(w * xr + phase) + np.cos(w * yr + phase)
        t = np.tanh(2 * (t - 0.8))
    t = 0.5 + 0.5 * t

    colors = np.array([proto.color, proto.color2])
    colors = colors + rng.normal(0, 0.03, size=colors.shape)
    colors = _desaturate(_hue_rotate(colors, sh.hue_degrees), sh.saturation_scale)
    strength = proto.tex_strength
    fg = colors[0][:, None, None] * (1 - strength * t) + colors[1][:, None, None] * (strength * t)

    bg_mean = spec.background_mean + sh.background_mean_shift
    bg_std = spec.background_std * sh.background_std_scale
    coarse = rng.normal(0, 1, size=(3, 5, 5))
    bg = np.stack([_upsample(c, n) for c in coarse]) * bg_std + bg_mean
    bg_tint = rng.normal(0, 0.04, size=(3, 1, 1))
    bg = bg + bg_tint

    img = mask * fg + (1 - mask) * bg
    img = 0.5 + sh.contrast * (img - 0.5)
    img = img + rng.normal(0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _upsample(grid: np.ndarray, n: int) -> np.ndarray:
    g = grid.shape[0]
    m = _bilinear_matrix(g, n)
    return m @ grid @ m.T


# ---------------------------------------------------------------- datasets
@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    domain_id: str


@dataclass
class Dataset:
    """Images as an (N, 3, H, W) float32 array with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    domain_id: str
    seed: int = 0
    spec: DomainSpec | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), self.domain_id)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def indices_by_class(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in self.classes}

    def subset(self, classes) -> "Dataset":
        keep = np.isin(self.labels, list(classes))
        return Dataset(self.images[keep], self.labels[keep], self.domain_id, self.seed, self.spec)


def generate_domain(spec: DomainSpec, images_per_class: int, seed: int) -> Dataset:
    if images_per_class < 1:
        raise ValueError("images_per_class must be >= 1")
    protos = [class_prototype(spec, c) for c in range(spec.class_count)]
    images = np.empty((spec.class_count * images_per_class, 3, spec.image_size, spec.image_size),
                      dtype=np.float32)
    labels = np.empty(spec.class_count * images_per_class, dtype=np.int64)
    k = 0
    for p in protos:
        for i in range(images_per_class):
            images[k] = render_image(spec, p, i, seed)
            labels[k] = p.class_id
            k += 1
    return Dataset(images, labels, spec.name, seed, spec)


def check_disjoint(*specs: DomainSpec) -> None:
    seen: dict[int, str] = {}
    for s in specs:
        for c in range(s.class_offset, s.class_offset + s.class_count):
            if c in seen:
                raise ValueError(f"class id {c} appears in both {seen[c]!r} and {s.name!r}")
            seen[c] = s.name


# ---------------------------------------------------------------- episodes
@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: dict[int, int]
    support_idx: np.ndarray
    query_idx: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_map)


def sample_episode(dataset: Dataset, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator) -> Episode:
    by_class = dataset.indices_by_class()
    if len(by_class) < n_way:
        raise SamplingError(f"need {n_way} classes, dataset {dataset.domain_id!r} has {len(by_class)}")
    need = k_shot + n_query
    eligible = [c for c, idx in by_class.items() if len(idx) >= need]
    if len(eligible) < n_way:
        short = {c: len(idx) for c, idx in by_class.items() if len(idx) < need}
        raise SamplingError(
            f"need {n_way} classes with >= {need} images (K={k_shot}+Q={n_query}); "
            f"only {len(eligible)} qualify, short classes: {short}")
    classes = rng.choice(np.array(sorted(eligible)), size=n_way, replace=False)
    s_idx, q_idx, s_y, q_y = [], [], [], []
    for local, c in enumerate(classes):
        pick = rng.choice(by_class[int(c)], size=need, replace=False)
        s_idx.append(pick[:k_shot])
        q_idx.append(pick[k_shot:])
        s_y.append(np.full(k_shot, local))
        q_y.append(np.full(n_query, local))
    s_idx, q_idx = np.concatenate(s_idx), np.concatenate(q_idx)
    return Episode(
        dataset.images[s_idx], np.concatenate(s_y).astype(np.int64),
        dataset.images[q_idx], np.concatenate(q_y).astype(np.int64),
        {int(c): i for i, c in enumerate(classes)}, s_idx, q_idx)


def pseudo_split(x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    """Per class, ceil(n/2) images to a pseudo-support set, the rest to a pseudo-query set."""
    s_parts, q_parts = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < 2:
            raise SplitError(f"class {int(c)} has {len(idx)} support image(s); pseudo-split needs >= 2")
        perm = rng.permutation(idx)
        half = (len(idx) + 1) // 2
        s_parts.append(perm[:half])
        q_parts.append(perm[half:])
    s, q = np.concatenate(s_parts), np.concatenate(q_parts)
    return (x[s], y[s]), (x[q], y[q])


# ---------------------------------------------------------------- augmentation
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear interpolation, half-pixel centers."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(images: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Resize the last two axes."""
    out_w = out_h if out_w is None else out_w
    h, w = images.shape[-2:]
    if (h, w) == (out_h, out_w):
        return images
    mh = _bilinear_matrix(h, out_h).astype(images.dtype)
    mw = _bilinear_matrix(w, out_w).astype(images.dtype)
    return np.ascontiguousarray(np.matmul(np.matmul(mh, images), mw.T))


def crop(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Crop a size x size window and resize it back to the input size."""
    h, w = img.shape[-2:]
    if size > min(h, w) or top + size > h or left + size > w or top < 0 or left < 0:
        raise ValueError(f"crop window {size} at ({top},{left}) exceeds image {h}x{w}")
    return resize_bilinear(img[..., top:top + size, left:left + size], h, w)


def flip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def color_jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Multiplicative factors; 1.0 everywhere is the identity."""
    out = img * brightness if brightness != 1.0 else img
    if contrast != 1.0:
        mean = out.mean()
        out = mean + contrast * (out - mean)
    if saturation != 1.0:
        gray = out.mean(axis=0, keepdims=True)
        out = gray + saturation * (out - gray)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


@dataclass(frozen=True)
class AugmentConfig:
    crop_p: float = 0.5
    flip_p: float = 0.5
    jitter_p: float = 0.5
    min_crop: float = 0.8
    jitter_strength: float = 0.3


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
            ops: tuple[str, ...] = ("crop", "flip", "color_jitter")) -> np.ndarray:
    h = img.shape[-1]
    out = img
    # draw every variate regardless of the branch so the stream layout is fixed
    u = rng.uniform(size=3)
    size = int(round(h * rng.uniform(cfg.min_crop, 1.0)))
    top, left = rng.integers(0, h - size + 1, size=2)
    factors = 1.0 + cfg.jitter_strength * rng.uniform(-1, 1, size=3)
    if "crop" in ops and u[0] < cfg.crop_p:
        out = crop(out, int(top), int(left), size)
    if "flip" in ops and u[1] < cfg.flip_p:
        out = flip(out)
    if "color_jitter" in ops and u[2] < cfg.jitter_p:
        out = color_jitter(out, *factors)
    return out.astype(img.dtype, copy=False)


def augment_batch(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return np.stack([augment(im, rng, cfg) for im in x])


def augment_image(item: LabeledImage, ops, rng: np.random.Generator,
                  cfg: AugmentConfig = AugmentConfig()) -> LabeledImage:
    return LabeledImage(augment(item.pixels, rng, cfg, tuple(ops)), item.label, item.domain_id)


# ---------------------------------------------------------------- handcrafted noise
NOISE_KINDS = ("gaussian", "salt_pepper", "poisson", "speckle")


@dataclass(frozen=True)
class NoiseParams:
    gaussian_mean: float = 0.0
    gaussian_var: float = 0.1
    salt_vs_pepper: float = 0.5
    sp_amount: float = 0.05
    speckle_mean: float = 0.0
    speckle_var: float = 0.05


def inject_noise(img: np.ndarray, kind: str, rng: np.random.Generator,
                 params: NoiseParams = NoiseParams()) -> np.ndarray:
    """Noise with the semantics of scikit-image's ``random_noise`` (clipped to [0, 1])."""
    x = np.asarray(img)
    dtype = x.dtype
    xf = x.astype(np.float64)
    if kind == "gaussian":
        out = xf + rng.normal(params.gaussian_mean, params.gaussian_var ** 0.5, size=x.shape)
    elif kind == "salt_pepper":
        out = xf.copy()
        flips = rng.uniform(size=x.shape) < params.sp_amount
        salt = rng.uniform(size=x.shape) < params.salt_vs_pepper
        out[flips & salt] = 1.0
        out[flips & ~salt] = 0.0
    elif kind == "poisson":
        levels = len(np.unique(xf))
        levels = 2 ** np.ceil(np.log2(max(levels, 1)))
        out = rng.poisson(np.clip(xf, 0, None) * levels) / float(levels)
    elif kind == "speckle":
        out = xf + xf * rng.normal(params.speckle_mean, params.speckle_var ** 0.5, size=x.shape)
    else:
        raise NoiseConfigError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    return np.clip(out, 0.0, 1.0).astype(dtype)


def inject_noise_image(item: LabeledImage, kind: str, rng: np.random.Generator,
                       params: NoiseParams = NoiseParams()) -> LabeledImage:
    return LabeledImage(inject_noise(item.pixels, kind, rng, params), item.label, item.domain_id)


# ---------------------------------------------------------------- storage
def save_dataset(ds: Dataset, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ds.images.astype("<f4").tofile(path / "images.bin")
    ds.labels.astype("<i8").tofile(path / "labels.bin")
    manifest = {
        "format": "nsae-dataset/1",
        "domain_id": ds.domain_id,
        "seed": ds.seed,
        "images": {"file": "images.bin", "dtype": "<f4", "shape": list(ds.images.shape)},
        "labels": {"file": "labels.bin", "dtype": "<i8", "shape": list(ds.labels.shape)},
        "classes": [int(c) for c in ds.classes],
        "spec": None if ds.spec is None else asdict(ds.spec),
        "meta": meta or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    img = np.fromfile(path / m["images"]["file"], dtype=m["images"]["dtype"]).reshape(m["images"]["shape"])
    lab = np.fromfile(path / m["labels"]["file"], dtype=m["labels"]["dtype"]).reshape(m["labels"]["shape"])
    spec = DomainSpec.from_dict(m["spec"]) if m.get("spec") else None
    return Dataset(img.astype(np.float32), lab.astype(np.int64), m["domain_id"], m["seed"], spec)
