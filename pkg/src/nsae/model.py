"""Conv4 encoder, mirrored deconvolutional decoder and linear head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .numerics.init import fan_in_uniform, ones, zeros


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    name: str
    image_size: int
    enc_channels: tuple[int, ...]
    dec_hidden: int
    dec_filters: tuple[int, ...]
    pooled: int  # spatial size after the last pool

    @property
    def feature_dim(self) -> int:
        return self.enc_channels[-1] * self.pooled * self.pooled

    @property
    def recon_size(self) -> int:
        return self.pooled * 2 ** len(self.dec_filters)


PROFILES = {
    # 84 -> 42 -> 21 -> 10 -> 5; decoder 5 -> 10 -> 20 -> 40 -> 80
    "paper84": Profile("paper84", 84, (64, 64, 64, 64), 512, (64, 64, 64, 3), 5),
    # 32 -> 16 -> 8 -> 4; decoder 4 -> 8 -> 16 -> 32
    "fast32": Profile("fast32", 32, (32, 32, 32), 256, (32, 32, 3), 4),
}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


class NsaeModel:
    """Parameters live in ``params`` (name -> Tensor); batch-norm running
    statistics in ``buffers`` (name -> ndarray)."""

    def __init__(self, profile: str | Profile = "fast32", num_classes: int = 8, seed: int = 0,
                 dtype=np.float32):
        self.profile = get_profile(profile) if isinstance(profile, str) else profile
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        p = self.profile

        c_in = 3
        for i, c in enumerate(p.enc_channels):
            self._add(f"enc{i}.conv.w", fan_in_uniform((c, c_in, 3, 3), c_in * 9, rng, self.dtype))
            self._add_bn(f"enc{i}.bn", c)
            c_in = c

        F, H = p.feature_dim, p.dec_hidden
        self._add("dec.fc1.w", fan_in_uniform((F, H), F, rng, self.dtype))
        self._add("dec.fc1.b", zeros((H,), self.dtype))
        self._add("dec.fc2.w", fan_in_uniform((H, F), H, rng, self.dtype))
        self._add("dec.fc2.b", zeros((F,), self.dtype))
        c_in = p.enc_channels[-1]
        for i, c in enumerate(p.dec_filters):
            self._add(f"dec.up{i}.w", fan_in_uniform((c_in, c, 2, 2), c_in, rng, self.dtype))
            self._add_bn(f"dec.up{i}.bn", c)
            c_in = c
        self._add("dec.out.w", fan_in_uniform((3, c_in, 3, 3), c_in * 9, rng, self.dtype))
        self._add_bn("dec.out.bn", 3)

        self.num_classes = 0
        self.reset_head(num_classes, rng)

    # -- construction helpers -------------------------------------------
    def _add(self, name: str, t: Tensor) -> None:
        t.name = name
        self.params[name] = t

    def _add_bn(self, name: str, c: int) -> None:
        self._add(f"{name}.gamma", ones((c,), self.dtype))
        self._add(f"{name}.beta", zeros((c,), self.dtype))
        self.buffers[f"{name}.mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.var"] = np.ones(c, dtype=self.dtype)

    def reset_head(self, num_classes: int, rng: np.random.Generator) -> None:
        """Fresh linear classifier with ``num_classes`` outputs."""
        F = self.profile.feature_dim
        self._add("head.w", fan_in_uniform((F, num_classes), F, rng, self.dtype))
        self._add("head.b", zeros((num_classes,), self.dtype))
        self.num_classes = num_classes

    # -- parameter groups -------------------------------------------------
    def encoder_params(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith("enc")]

    def decoder_params(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith("dec.")]

    def head_params(self) -> list[Tensor]:
        return [self.params["head.w"], self.params["head.b"]]

    def all_params(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward pieces --------------------------------------------------
    def _bn(self, name: str, x: Tensor, mode: str) -> Tensor:
        return nx.batchnorm_apply(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                                  self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"], mode)

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def encode(self, x, bn_mode: str = "train") -> Tensor:
        x = self._as_input(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"encode expects Bx3xHxW input, got {x.shape}")
        h = x
        for i in range(len(self.profile.enc_channels)):
            h = nx.conv2d(h, self.params[f"enc{i}.conv.w"], stride=1, padding=1)
            h = nx.relu(self._bn(f"enc{i}.bn", h, bn_mode))
            h = nx.maxpool2d(h, 2, 2)
        feat = nx.flatten(h)
        if feat.shape[1] != self.profile.feature_dim:
            raise DimensionError(
                f"input {x.shape[2]}x{x.shape[3]} yields {feat.shape[1]} features; profile "
                f"{self.profile.name!r} needs {self.profile.feature_dim}")
        return feat

    def decode(self, feat: Tensor, bn_mode: str = "train") -> Tensor:
        p = self.profile
        if feat.ndim != 2 or feat.shape[1] != p.feature_dim:
            raise DimensionError(f"decode expects Bx{p.feature_dim} features, got {feat.shape}")
        h = nx.relu(nx.linear_apply(feat, self.params["dec.fc1.w"], self.params["dec.fc1.b"]))
        h = nx.relu(nx.linear_apply(h, self.params["dec.fc2.w"], self.params["dec.fc2.b"]))
        h = h.reshape(feat.shape[0], p.enc_channels[-1], p.pooled, p.pooled)
        for i in range(len(p.dec_filters)):
            h = nx.conv_transpose2d(h, self.params[f"dec.up{i}.w"], stride=2, padding=0)
            h = nx.relu(self._bn(f"dec.up{i}.bn", h, bn_mode))
        h = nx.conv2d(h, self.params["dec.out.w"], stride=1, padding=1)
        return nx.sigmoid(self._bn("dec.out.bn", h, bn_mode))

    def classify(self, feat: Tensor, num_classes: int | None = None) -> Tensor:
        if num_classes is not None and num_classes != self.num_classes:
            raise ConfigurationError(
                f"classifier head has {self.num_classes} outputs, {num_classes} requested")
        return nx.linear_apply(feat, self.params["head.w"], self.params["head.b"])

    def nsae_forward(self, x, bn_mode: str = "train") -> dict[str, Tensor]:
        feat = self.encode(x, bn_mode)
        recon = self.decode(feat, bn_mode)
        feat_recon = self.encode(recon, bn_mode)
        return {
            "feat": feat,
            "recon": recon,
            "logits_orig": self.classify(feat),
            "feat_recon": feat_recon,
            "logits_recon": self.classify(feat_recon),
        }

    def recon_target(self, x: np.ndarray) -> np.ndarray:
        """Input images resized to the decoder's output resolution."""
        from .datasets import resize_bilinear

        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        return resize_bilinear(x.astype(self.dtype, copy=False), self.profile.recon_size)

    # -- state --------------------------------------------------------------
    def clone(self) -> "NsaeModel":
        new = object.__new__(NsaeModel)
        new.profile = self.profile
        new.dtype = self.dtype
        new.num_classes = self.num_classes
        new.params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        new.buffers = {n: b.copy() for n, b in self.buffers.items()}
        return new

    def astype(self, dtype) -> "NsaeModel":
        """Copy with every parameter and buffer cast to ``dtype``."""
        new = self.clone()
        new.dtype = np.dtype(dtype)
        new.params = {n: Tensor(t.data.astype(dtype), requires_grad=True, name=n) for n, t in new.params.items()}
        new.buffers = {n: b.astype(dtype) for n, b in new.buffers.items()}
        return new

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{n}": t.data for n, t in self.params.items()}
        out.update({f"buffer/{n}": b for n, b in self.buffers.items()})
        return out

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(model: NsaeModel, path, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian blob of all tensors."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / "tensors.bin", "wb") as fh:
        for name, arr in model.state_arrays().items():
            data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = data.tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": data.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": "nsae-checkpoint/1",
        "profile": model.profile.name,
        "profile_spec": asdict(model.profile),
        "num_classes": model.num_classes,
        "dtype": model.dtype.str,
        "tensors": entries,
        "meta": meta or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[NsaeModel, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "tensors.bin").read_bytes()
    prof = manifest["profile_spec"]
    profile = Profile(prof["name"], prof["image_size"], tuple(prof["enc_channels"]), prof["dec_hidden"],
                      tuple(prof["dec_filters"]), prof["pooled"])
    model = NsaeModel(profile, manifest["num_classes"], seed=0, dtype=np.dtype(manifest["dtype"]))
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).astype(model.dtype)
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            model.params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        else:
            model.buffers[name] = arr.copy()
    return model, manifest["meta"]
