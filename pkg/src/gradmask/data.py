"""Synthetic lesion-classification datasets with a planted corner confounder.

Non-healthy images carry an elliptical bright lesion (marked in ``seg``);
a small bright patch in a fixed corner co-occurs with the label with
probability ``rho`` per split.  At ``rho_train`` close to 1 the patch is a
shortcut the classifier can latch onto; at ``rho_test = 0.5`` it carries
no information.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, ValidationError
from .rng import Rng
from .tensor import Tensor

SPLITS = ("train", "valid", "test")
MANIFEST = "manifest.json"
FORMAT_TAG = "gradmask-dataset/1"


@dataclass(frozen=True)
class Sample:
    x: Tensor  # 1×H×W, values in [0, 1]
    y: int  # 0 healthy, 1 non-healthy
    seg: Tensor  # H×W binary lesion mask
    confounded: bool = False  # whether the corner patch was planted

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.y!r}")
        seg = self.seg.data
        if not np.isin(seg, (0, 1)).all():
            raise ValidationError("segmentation must be binary")
        if self.x.rank != 3 or self.x.shape[1:] != self.seg.shape:
            raise ValidationError(f"image {self.x.shape} and segmentation {self.seg.shape} disagree")
        if bool(seg.any()) != (self.y == 1):
            raise ValidationError("label must be 1 exactly when the segmentation is nonempty")


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    n_train: int = 128
    n_valid: int = 128
    n_test: int = 512
    lesion_axes: tuple = (3.0, 6.0)
    lesion_intensity: float = 0.35
    background: float = 0.3
    noise_sigma: float = 0.15
    patch_size: int = 3
    patch_intensity: float = 0.5
    rho_train: float = 0.95
    rho_test: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "lesion_axes", tuple(float(v) for v in self.lesion_axes))
        for name in ("n_train", "n_valid", "n_test"):
            n = getattr(self, name)
            if n < 2 or n % 2:
                raise ValidationError(f"{name}={n}: split sizes must be even and ≥ 2 for a 50/50 class balance")
        for name in ("rho_train", "rho_test"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        lo, hi = self.lesion_axes
        if not 0 < lo <= hi:
            raise ValidationError(f"bad lesion axis range {self.lesion_axes}")
        # lesion pixels lie within `hi` of a centre in the central half; the
        # patch must stay clear of that disc
        gap = min(self.height, self.width) / 4 - (self.patch_size - 0.5)
        if gap <= 0 or math.hypot(gap, gap) <= hi:
            raise ValidationError("image too small to keep lesion and confounder patch disjoint")
        T.resolve_dtype(self.dtype)

    def split_size(self, split):
        return getattr(self, f"n_{split}")

    def split_rho(self, split):
        # validation shares the training bias: model selection never sees the clean distribution
        return self.rho_test if split == "test" else self.rho_train

    def to_json(self):
        d = asdict(self)
        d["lesion_axes"] = list(self.lesion_axes)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class Dataset:
    config: SynthConfig
    corner: int  # 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name):
        return getattr(self, name)

    def splits(self):
        return {name: self.split(name) for name in SPLITS}

    def patch_slices(self):
        return patch_slices(self.config, self.corner)

    def patch_mask(self):
        m = np.zeros((self.config.height, self.config.width), dtype=bool)
        m[self.patch_slices()] = True
        return m


def patch_slices(cfg, corner):
    p = cfg.patch_size
    rows = slice(0, p) if corner in (0, 1) else slice(cfg.height - p, cfg.height)
    cols = slice(0, p) if corner in (0, 2) else slice(cfg.width - p, cfg.width)
    return rows, cols


def lesion_mask(h, w, cy, cx, a, b, angle):
    """Pixels whose centres fall inside the rotated ellipse."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = math.cos(angle), math.sin(angle)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return (u * u + v * v) <= 1.0


def _make_sample(cfg, r, y, rho, corner):
    h, w = cfg.height, cfg.width
    img = cfg.background + cfg.noise_sigma * r.normal_array(h * w).reshape(h, w)
    seg = np.zeros((h, w), dtype=bool)
    if y == 1:
        cy = r.uniform(h / 4, 3 * h / 4)
        cx = r.uniform(w / 4, 3 * w / 4)
        a = r.uniform(*cfg.lesion_axes)
        b = r.uniform(*cfg.lesion_axes)
        angle = r.uniform(0.0, math.pi)
        seg = lesion_mask(h, w, cy, cx, a, b, angle)
        img[seg] += cfg.lesion_intensity
    agree = r.random() < rho
    confounded = bool(y) if agree else not y
    if confounded:
        img[patch_slices(cfg, corner)] += cfg.patch_intensity
    img = np.clip(img, 0.0, 1.0)
    dtype = T.resolve_dtype(cfg.dtype)
    return Sample(
        x=Tensor(img[None], dtype=dtype),
        y=int(y),
        seg=Tensor(seg.astype(dtype)),
        confounded=confounded,
    )


def generate(cfg):
    """Deterministic train/valid/test splits for ``cfg.seed``."""
    root = Rng(cfg.seed)
    corner = int(root.substream("data/corner").integers(4))
    ds = Dataset(cfg, corner)
    for split in SPLITS:
        r = root.substream(f"data/{split}")
        n = cfg.split_size(split)
        labels = r.shuffle([0] * (n // 2) + [1] * (n // 2))
        rho = cfg.split_rho(split)
        ds.split(split).extend(_make_sample(cfg, r, y, rho, corner) for y in labels)
    return ds


# --- on-disk layout ----------------------------------------------------------

def write_dataset(directory, ds):
    """Write ``manifest.json`` plus ``x_<i>.gmt``/``seg_<i>.gmt`` per sample."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    i = 0
    for split in SPLITS:
        for s in ds.split(split):
            xf, sf = f"x_{i}.gmt", f"seg_{i}.gmt"
            T.save_tensor(d / xf, s.x)
            T.save_tensor(d / sf, s.seg)
            entries.append({"index": i, "split": split, "y": s.y, "confounded": s.confounded, "x": xf, "seg": sf})
            i += 1
    manifest = {
        "format": FORMAT_TAG,
        "config": ds.config.to_json(),
        "corner": ds.corner,
        "counts": {split: len(ds.split(split)) for split in SPLITS},
        "samples": entries,
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_dataset(directory):
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: no {MANIFEST}") from exc
    except ValueError as exc:
        raise FormatError(f"{d / MANIFEST}: invalid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise FormatError(f"{d / MANIFEST}: unknown format {manifest.get('format')!r}")
    try:
        cfg = SynthConfig.from_json(manifest["config"])
        ds = Dataset(cfg, int(manifest["corner"]))
        for e in manifest["samples"]:
            x = T.load_tensor(d / e["x"])
            seg = T.load_tensor(d / e["seg"])
            if x.shape != (1, cfg.height, cfg.width):
                raise FormatError(f"{e['x']}: shape {x.shape} disagrees with manifest config")
            ds.split(e["split"]).append(Sample(x, int(e["y"]), seg, bool(e["confounded"])))
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: missing sample file {exc.filename}") from exc
    except (KeyError, TypeError, AttributeError, ValidationError) as exc:
        raise FormatError(f"{d / MANIFEST}: manifest and tensors disagree: {exc}") from exc
    for split in SPLITS:
        if len(ds.split(split)) != manifest["counts"][split]:
            raise FormatError(f"{split}: manifest count {manifest['counts'][split]} but {len(ds.split(split))} samples")
    return ds
