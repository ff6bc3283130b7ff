"""Patch preparation, augmentation, SGD with momentum, evaluation and checkpoints.

All randomness is derived from ``(seed, epoch, sample index)`` so a run is
reproducible regardless of how samples are batched or resumed.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging, serialization
from . import tensor as T
from .errors import ConfigError, DataError, NumericalError, ParameterError
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

_SHUFFLE_STREAM = 0x5EED
_AUGMENT_STREAM = 0xA06


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    decay: float = 0.1
    decay_period: int = 10
    epochs: int = 30
    head_lr_mult: float = 10.0
    seed: int = 0
    scales: list = field(default_factory=lambda: [256, 384, 512])
    crop: int = 256
    train_input: int = 224
    eval_scale: int = 256
    eval_resize: str = "short_edge"
    augment: bool = True
    area_range: tuple = (0.8, 1.0)
    aspect_range: tuple = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    checkpoint_every: int = 0
    eval_every: int = 1  # 0: evaluate after the last epoch only

    def __post_init__(self):
        self.scales = [int(s) for s in self.scales]
        self.area_range = tuple(self.area_range)
        self.aspect_range = tuple(self.aspect_range)
        positive = dict(lr=self.lr, batch_size=self.batch_size, decay=self.decay, decay_period=self.decay_period,
                        epochs=self.epochs, head_lr_mult=self.head_lr_mult, crop=self.crop,
                        train_input=self.train_input, eval_scale=self.eval_scale)
        for key, value in positive.items():
            if not value > 0:
                raise ConfigError(f"train.{key} must be positive, got {value}")
        if self.momentum < 0:
            raise ConfigError(f"train.momentum must be non-negative, got {self.momentum}")
        if self.decay_period > self.epochs:
            raise ConfigError(f"train.decay_period ({self.decay_period}) exceeds train.epochs ({self.epochs})")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("train.eval_every and train.checkpoint_every must be non-negative")
        if not self.scales:
            raise ConfigError("train.scales must not be empty")
        if self.eval_resize not in ("square", "short_edge"):
            raise ConfigError(f"train.eval_resize must be 'square' or 'short_edge', got {self.eval_resize!r}")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- patches and augmentation


def multiscale_expand(image, scales, crop):
    """One centred ``crop x crop`` patch per square resize in ``scales``."""
    if not scales:
        raise ParameterError("multiscale_expand needs at least one scale")
    if min(image.shape[1:]) < 1:
        raise ParameterError(f"image has empty extent {image.shape}")
    return [imaging.center_crop(imaging.resize_bilinear(image, s, s), crop) for s in scales]


@dataclass
class AugmentParams:
    area: float = 1.0
    aspect: float = 1.0
    top_frac: float = 0.5
    left_frac: float = 0.5
    flip: bool = False


def sample_augment(rng, area_range=(0.8, 1.0), aspect_range=(3 / 4, 4 / 3), flip_prob=0.5, max_attempts=10, shape=None):
    """Draw crop fraction, aspect and flip. Infeasible aspects are redrawn, then fall back to a centred full crop."""
    h, w = shape if shape is not None else (1, 1)
    for _ in range(max_attempts):
        area = rng.uniform(*area_range)
        aspect = rng.uniform(*aspect_range)
        if math.sqrt(area * h * w * aspect) <= w and math.sqrt(area * h * w / aspect) <= h:
            params = AugmentParams(area, aspect, rng.uniform(), rng.uniform())
            break
    else:
        params = AugmentParams()
    params.flip = bool(rng.uniform() < flip_prob)
    return params


def apply_augment(patch, params: AugmentParams, out_size):
    c, h, w = patch.shape
    target = params.area * h * w
    cw = min(w, math.sqrt(target * params.aspect))
    ch = min(h, math.sqrt(target / params.aspect))
    top = params.top_frac * (h - ch)
    left = params.left_frac * (w - cw)
    out = imaging.resize_bilinear(patch, out_size, out_size, box=(top, left, ch, cw))
    return imaging.hflip(out) if params.flip else out


def augment(patch, rng, cfg: TrainConfig = None):
    cfg = cfg or TrainConfig()
    params = sample_augment(rng, cfg.area_range, cfg.aspect_range, cfg.flip_prob, shape=patch.shape[1:])
    return apply_augment(patch, params, cfg.train_input)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def compute(cls, patches):
        arr = np.asarray(patches)
        mean = arr.mean(axis=(0, 2, 3))
        std = arr.std(axis=(0, 2, 3))
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, x):
        return (x - self.mean.reshape(-1, 1, 1)) / self.std.reshape(-1, 1, 1)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


def prepare_train_patches(images, labels, cfg: TrainConfig):
    """Expand every training image offline into its multi-scale patches."""
    patches, out_labels = [], []
    for img, label in zip(images, labels):
        for p in multiscale_expand(img, cfg.scales, cfg.crop):
            patches.append(p)
            out_labels.append(label)
    return np.stack(patches), np.asarray(out_labels, dtype=np.int64)


def prepare_eval_inputs(images, cfg: TrainConfig, stats: ChannelStats):
    """Deterministic evaluation view: resize, centre crop, resize to the network input, standardize."""
    out = []
    for img in images:
        if cfg.eval_resize == "square":
            img = imaging.resize_bilinear(img, cfg.eval_scale, cfg.eval_scale)
        else:
            img = imaging.resize_short_edge(img, cfg.eval_scale)
        img = imaging.center_crop(img, cfg.crop)
        if cfg.crop != cfg.train_input:
            img = imaging.resize_bilinear(img, cfg.train_input, cfg.train_input)
        out.append(stats.apply(img))
    return np.stack(out)


# ---------------------------------------------------------------- optimizer


def lr_at(base, decay, period, epoch):
    return base * decay ** (epoch // period)


def sgd_step(groups, grads, state, cfg, epoch):
    """Heavy-ball update ``v <- mu v - lr g; p <- p + v`` for every named parameter.

    ``groups`` is a list of ``(lr multiplier, {name: Tensor})``; ``grads`` and
    ``state`` map names to arrays. Nothing is updated if any gradient is not finite.
    """
    for _, params in groups:
        for name in params:
            g = grads.get(name)
            if g is not None and not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name!r} at epoch {epoch}")
    base = lr_at(cfg.lr, cfg.decay, cfg.decay_period, epoch)
    for mult, params in groups:
        lr = base * mult
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if p.data.shape != g.shape:
                raise DataError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
            v = state.get(name)
            if v is None:
                v = state[name] = np.zeros_like(p.data)
            v *= cfg.momentum
            v -= lr * g
            p.data += v
    return groups, state


class SGD:
    def __init__(self, groups, cfg):
        """``groups``: list of ``(name, [(param name, Tensor)], lr multiplier)``."""
        self.groups = [(mult, dict(params)) for _, params, mult in groups]
        self.cfg = cfg
        self.state = {name: np.zeros_like(p.data) for _, params in self.groups for name, p in params.items()}

    def step(self, epoch):
        grads = {name: p.grad for _, params in self.groups for name, p in params.items() if p.grad is not None}
        sgd_step(self.groups, grads, self.state, self.cfg, epoch)

    def zero_grad(self):
        for _, params in self.groups:
            for p in params.values():
                p.grad = None


# ---------------------------------------------------------------- evaluation


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list

    @property
    def accuracy(self):
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def permuted(self, order):
        order = list(order)
        return ConfusionMatrix(self.counts[np.ix_(order, order)], [self.class_names[i] for i in order])

    def to_csv(self, path, config_hash=None):
        lines = []
        if config_hash:
            lines.append(f"# config_hash={config_hash}")
        lines.append(",".join(["true\\pred"] + list(self.class_names)))
        for name, row in zip(self.class_names, self.counts):
            lines.append(",".join([name] + [str(int(v)) for v in row]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        rows, config_hash = [], None
        for line in Path(path).read_text().splitlines():
            if line.startswith("# config_hash="):
                config_hash = line.split("=", 1)[1].strip()
            elif line and not line.startswith("#"):
                rows.append(line.split(","))
        if not rows:
            raise DataError(f"{path}: empty confusion matrix")
        names = rows[0][1:]
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
        if counts.shape != (len(names), len(names)) or [r[0] for r in rows[1:]] != names:
            raise DataError(f"{path}: malformed confusion matrix")
        cm = cls(counts, names)
        cm.config_hash = config_hash
        return cm


def predict(model, x, batch_size=256):
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(Tensor(x[i : i + batch_size])).data)
    return np.concatenate(out)


def evaluate(model, x, y, class_names=None, batch_size=256):
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DataError("evaluate needs a non-empty dataset")
    k = model.num_classes
    if y.min() < 0 or y.max() >= k:
        raise DataError(f"class ids must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    pred = predict(model, x, batch_size).argmax(axis=1)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y, pred), 1)
    cm = ConfusionMatrix(counts, list(class_names) if class_names is not None else [str(i) for i in range(k)])
    return cm.accuracy, cm


# ---------------------------------------------------------------- training loop


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch, _SHUFFLE_STREAM]).permutation(n)


def sample_rng(seed, epoch, index):
    return np.random.default_rng([seed, epoch, _AUGMENT_STREAM, index])


def make_batch(patches, idx, cfg, stats, epoch):
    samples = []
    for i in idx:
        p = patches[i]
        if cfg.augment:
            p = augment(p, sample_rng(cfg.seed, epoch, int(i)), cfg)
        elif p.shape[1] != cfg.train_input:
            p = imaging.resize_bilinear(p, cfg.train_input, cfg.train_input)
        samples.append(stats.apply(p))
    return np.stack(samples)


def train_epoch(model, opt, patches, labels, cfg, stats, epoch, loss_fn=None):
    loss_fn = loss_fn or T.cross_entropy_loss
    model.train()
    order = epoch_order(cfg.seed, epoch, len(patches))
    total, seen = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        if len(idx) < 2:
            continue  # batch statistics need two samples
        x = make_batch(patches, idx, cfg, stats, epoch)
        loss = loss_fn(model(Tensor(x)), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step(epoch)
        total += loss.item() * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


@dataclass
class RunState:
    epoch: int = 0
    history: list = field(default_factory=list)


def fit(model, patches, labels, cfg: TrainConfig, stats, eval_x=None, eval_y=None, opt=None, state=None,
        out_dir=None, config_hash="", meta=None):
    """Train from ``state.epoch`` to ``cfg.epochs``; append one metrics record per epoch."""
    opt = opt or SGD(model.param_groups(cfg.head_lr_mult), cfg)
    state = state or RunState()
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(state.epoch, cfg.epochs):
        loss = train_epoch(model, opt, patches, labels, cfg, stats, epoch)
        due = epoch == cfg.epochs - 1 or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)
        acc = evaluate(model, eval_x, eval_y)[0] if due and eval_x is not None and len(eval_x) else None
        record = {"epoch": epoch, "lr": lr_at(cfg.lr, cfg.decay, cfg.decay_period, epoch), "train_loss": loss, "eval_acc": acc}
        state.history.append(record)
        state.epoch = epoch + 1
        log.info("epoch %d lr %.5g loss %.4f acc %s", epoch, record["lr"], loss, acc)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoints" / f"epoch_{state.epoch:03d}", model, opt, state, cfg, config_hash, meta)
    return state


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(directory, model, opt, state, cfg, config_hash, meta=None):
    directory = Path(directory)
    tensors = dict(model.state_dict())
    if opt is not None:
        tensors.update({f"velocity.{k}": v for k, v in opt.state.items()})
    serialization.save_manifest(directory, tensors, meta={"config_hash": config_hash})
    sidecar = {
        "epoch": state.epoch,
        "rng": {"scheme": "derived(seed, epoch, index)", "seed": cfg.seed, "next_epoch": state.epoch},
        "config_hash": config_hash,
        "history": state.history,
        "meta": meta or {},
    }
    (directory / "state.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory, model, opt=None):
    directory = Path(directory)
    if not (directory / "state.json").exists():
        raise DataError(f"{directory} is not a checkpoint (no state.json)")
    tensors, _ = serialization.load_manifest(directory)
    velocity = {k[len("velocity."):]: v for k, v in tensors.items() if k.startswith("velocity.")}
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("velocity.")})
    if opt is not None:
        for name, v in velocity.items():
            opt.state[name][...] = v
    sidecar = json.loads((directory / "state.json").read_text())
    return RunState(epoch=sidecar["epoch"], history=sidecar["history"]), sidecar


def read_checkpoint_meta(directory):
    path = Path(directory) / "state.json"
    if not path.exists():
        raise DataError(f"{directory} is not a checkpoint (no state.json)")
    return json.loads(path.read_text())
