"""Procedural texture classes, plus the image-directory dataset they are stored as.

The default set mixes orderless classes (power-law noise, blob fields) with
classes that carry layout cues (gratings, checkerboards, jittered stripes).
Every image gets a random two-colour palette drawn from the same distribution
for all classes, so colour alone never identifies a class.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .errors import ConfigError, DataError

KINDS = ("grating", "checkerboard", "noise", "blobs", "stripes", "composite")
SPLIT_CODES = {"train": 0, "test": 1}


@dataclass
class TextureSpec:
    class_id: int
    name: str
    kind: str
    params: dict = field(default_factory=dict)  # parameter name -> [lo, hi]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown texture kind {self.kind!r}")
        for key, (lo, hi) in self.params.items():
            if not lo <= hi:
                raise ConfigError(f"{self.name}: empty range for {key}: [{lo}, {hi}]")

    def signature(self):
        return (self.kind, tuple(sorted((k, tuple(v)) for k, v in self.params.items())))


def default_specs():
    return [
        TextureSpec(0, "grating", "grating", {"frequency": [0.10, 0.14], "orientation": [0.0, np.pi]}),
        TextureSpec(1, "checkerboard", "checkerboard", {"period": [9.0, 13.0], "orientation": [-0.3, 0.3]}),
        TextureSpec(2, "fine_noise", "noise", {"exponent": [0.5, 1.0]}),
        TextureSpec(3, "coarse_noise", "noise", {"exponent": [2.6, 3.2]}),
        TextureSpec(4, "blobs", "blobs", {"density": [8.0, 14.0], "radius": [2.5, 4.5]}),
        TextureSpec(5, "stripes", "stripes", {"min_width": [2.0, 3.0], "max_width": [6.0, 9.0], "orientation": [1.3, 1.84]}),
    ]


def _draw(rng, params):
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in sorted(params.items())}


def _grid(size, rng):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    off = rng.uniform(0, size, size=2)
    return x + off[0], y + off[1]


def _rotate(x, y, theta):
    return x * np.cos(theta) + y * np.sin(theta), -x * np.sin(theta) + y * np.cos(theta)


def _minmax(v):
    lo, hi = v.min(), v.max()
    return (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)


def _grating(size, p, rng):
    x, y = _grid(size, rng)
    u, _ = _rotate(x, y, p["orientation"])
    return 0.5 + 0.5 * np.sin(2 * np.pi * p["frequency"] * u + rng.uniform(0, 2 * np.pi))


def _checkerboard(size, p, rng):
    x, y = _grid(size, rng)
    u, v = _rotate(x, y, p["orientation"])
    return (np.floor(u / p["period"]) + np.floor(v / p["period"])) % 2


def _noise(size, p, rng):
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    k = np.sqrt(fx**2 + fy**2)
    k[0, 0] = 1.0
    amp = k ** (-p["exponent"] / 2.0)
    amp[0, 0] = 0.0
    return _minmax(np.real(np.fft.ifft2(np.fft.fft2(white) * amp)))


def _blobs(size, p, rng):
    count = rng.poisson(p["density"]) + 1
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    field_ = np.zeros((size, size))
    for _ in range(count):
        cx, cy = rng.uniform(0, size, size=2)
        r = p["radius"] * rng.uniform(0.8, 1.2)
        dx = np.minimum(np.abs(x - cx), size - np.abs(x - cx))
        dy = np.minimum(np.abs(y - cy), size - np.abs(y - cy))
        field_ += np.exp(-(dx**2 + dy**2) / (2 * r * r))
    return np.clip(field_, 0.0, 1.0)


def _stripes(size, p, rng):
    x, y = _grid(size, rng)
    u, _ = _rotate(x, y, p["orientation"])
    lo, hi = min(p["min_width"], p["max_width"]), max(p["min_width"], p["max_width"])
    span = 6 * size
    edges = np.cumsum(rng.uniform(lo, hi, size=int(span / lo) + 2)) - span / 2
    return (np.searchsorted(edges, u) % 2).astype(np.float64)


def _composite(size, p, rng):
    a = _grating(size, {"frequency": p.get("frequency", 0.12), "orientation": p.get("orientation", 0.0)}, rng)
    b = _noise(size, {"exponent": p.get("exponent", 2.0)}, rng)
    mask = (np.arange(size)[None, :] < size // 2).astype(np.float64)
    return mask * a + (1 - mask) * b


_GENERATORS = {
    "grating": _grating,
    "checkerboard": _checkerboard,
    "noise": _noise,
    "blobs": _blobs,
    "stripes": _stripes,
    "composite": _composite,
}


def render(spec: TextureSpec, size, rng):
    """One 3 x size x size image in [0, 1] and the parameters drawn for it."""
    params = _draw(rng, spec.params)
    v = _GENERATORS[spec.kind](size, params, rng)
    dark = rng.uniform(0.0, 0.45, size=3)
    contrast = rng.uniform(0.35, 0.55)
    light = np.clip(dark + contrast * rng.uniform(0.6, 1.0, size=3), 0.0, 1.0)
    img = dark[:, None, None] + v[None] * (light - dark)[:, None, None]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0), params


@dataclass
class Dataset:
    images: list
    labels: np.ndarray
    splits: np.ndarray
    ids: list
    class_names: list
    params: list = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def subset(self, split):
        idx = np.flatnonzero(self.splits == split)
        return Dataset(
            images=[self.images[i] for i in idx],
            labels=self.labels[idx],
            splits=self.splits[idx],
            ids=[self.ids[i] for i in idx],
            class_names=list(self.class_names),
            params=None if self.params is None else [self.params[i] for i in idx],
            meta=dict(self.meta),
        )

    def stacked(self):
        return np.stack(self.images)


def validate_specs(specs):
    ids = [s.class_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate class ids in {ids}")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate class names in {names}")
    sigs = [s.signature() for s in specs]
    if len(set(sigs)) != len(sigs):
        raise ConfigError("two classes share identical generator kind and parameter ranges")


def generate(specs=None, per_class=200, size=64, seed=0, train_fraction=0.8):
    """Deterministic, class-stratified dataset. Train and test draw from disjoint rng streams."""
    specs = default_specs() if specs is None else list(specs)
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    validate_specs(specs)
    specs = sorted(specs, key=lambda s: s.class_id)
    n_train = int(round(per_class * train_fraction))
    images, labels, splits, ids, params = [], [], [], [], []
    for label, spec in enumerate(specs):
        for split, count in (("train", n_train), ("test", per_class - n_train)):
            for k in range(count):
                rng = np.random.default_rng([seed, spec.class_id, SPLIT_CODES[split], k])
                img, drawn = render(spec, size, rng)
                images.append(img)
                labels.append(label)
                splits.append(split)
                ids.append(f"{spec.name}-{split}-{k:05d}")
                params.append(drawn)
    meta = {"seed": seed, "size": size, "per_class": per_class, "specs": [asdict(s) for s in specs]}
    return Dataset(images, np.array(labels), np.array(splits), ids, [s.name for s in specs], params, meta)


def save_dataset(ds: Dataset, root):
    """``root/<split>/<class_name>/<index>.ppm`` plus ``manifest.json``."""
    root = Path(root)
    counters = {}
    for img, label, split in zip(ds.images, ds.labels, ds.splits):
        name = ds.class_names[label]
        d = root / split / name
        d.mkdir(parents=True, exist_ok=True)
        k = counters.get((split, name), 0)
        counters[(split, name)] = k + 1
        imaging.write_ppm(d / f"{k:05d}.ppm", img)
    manifest = dict(ds.meta, class_names=list(ds.class_names))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_image_dir(root, splits=("train", "test")):
    """Read ``root/<split>/<class>/*.ppm``. Class order comes from the manifest, else sorted names."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset path {root} does not exist")
    manifest_path = root / "manifest.json"
    meta = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    class_names = meta.get("class_names")
    if class_names is None:
        class_names = sorted({p.name for s in splits if (root / s).is_dir() for p in (root / s).iterdir() if p.is_dir()})
    if not class_names:
        raise DataError(f"no class directories under {root}")
    images, labels, split_list, ids = [], [], [], []
    for split in splits:
        for label, name in enumerate(class_names):
            d = root / split / name
            if not d.is_dir():
                continue
            for path in sorted(d.glob("*.ppm")):
                images.append(imaging.read_ppm(path))
                labels.append(label)
                split_list.append(split)
                ids.append(f"{split}/{name}/{path.stem}")
    if not images:
        raise DataError(f"no .ppm images found under {root}")
    return Dataset(images, np.array(labels), np.array(split_list), ids, list(class_names), None, meta)
