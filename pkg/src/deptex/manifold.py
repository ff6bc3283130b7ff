"""Parametric texture manifold: a feed-forward regressor from DEP features to
precomputed 2-D embedding coordinates, trained with an L2 objective.

Once trained it places unseen samples on the manifold with a single forward
pass, which the non-parametric embedding cannot do.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialization
from . import tensor as T
from .errors import DataError, DimensionError, ParameterError
from .nn import BatchNorm, Linear, Module
from .tensor import Tensor, no_grad
from .trainer import SGD, lr_at


@dataclass
class RegressorConfig:
    input_dim: int = 128
    hidden: list = field(default_factory=lambda: [500, 500, 2000])
    output_dim: int = 2
    batch_size: int = 2048
    lr: float = 0.01
    momentum: float = 0.9
    decay: float = 0.1
    decay_period: int = 30
    epochs: int = 80
    input_batchnorm: bool = True
    standardize_inputs: bool = True
    standardize_targets: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        if self.output_dim != 2:
            raise ParameterError(f"regressor.output_dim must be 2, got {self.output_dim}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ParameterError("regressor layer widths must be positive")

    def to_dict(self):
        return asdict(self)


def xavier_bound(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_xavier(shape, rng):
    """Uniform on +-sqrt(6 / (fan_in + fan_out)) for a (fan_in, fan_out) weight."""
    fan_in, fan_out = shape
    if fan_in < 1 or fan_out < 1:
        raise ParameterError(f"xavier init needs positive fan dims, got {shape}")
    b = xavier_bound(fan_in, fan_out)
    return rng.uniform(-b, b, size=(fan_in, fan_out))


class _Block(Module):
    """batchnorm -> relu -> linear."""

    def __init__(self, n_in, n_out, rng, norm=True):
        self.bn = BatchNorm(n_in) if norm else None
        self.fc = Linear(n_in, n_out, rng, init="xavier")

    def forward(self, x):
        if self.bn is not None:
            x = T.relu(self.bn(x))
        return self.fc(x)


class ManifoldModel(Module):
    def __init__(self, cfg: RegressorConfig, rng=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        dims = [cfg.input_dim] + cfg.hidden + [cfg.output_dim]
        self.layers = [_Block(dims[0], dims[1], rng, norm=cfg.input_batchnorm)]
        self.layers += [_Block(a, b, rng) for a, b in zip(dims[1:-1], dims[2:])]
        self.feature_mean = np.zeros(cfg.input_dim)
        self.feature_scale = np.ones(cfg.input_dim)
        self.target_mean = np.zeros(cfg.output_dim)
        self.target_scale = np.ones(1)
        self.initial_mse = self.final_mse = float("nan")
        self._cfg = cfg

    @property
    def config(self):
        return self._cfg

    def forward(self, x):
        """Normalized coordinates of raw features; :func:`embed` maps them back to target units."""
        if x.ndim != 2 or x.shape[1] != self._cfg.input_dim:
            raise DimensionError(f"manifold model expects n x {self._cfg.input_dim} features, got {x.shape}")
        x = T.mul(T.sub(x, Tensor(self.feature_mean)), Tensor(1.0 / self.feature_scale))
        for layer in self.layers:
            x = layer(x)
        return x

    def to_target_units(self, y):
        return y * self.target_scale[0] + self.target_mean

    def save(self, directory, meta=None):
        serialization.save_manifest(directory, self.state_dict(), meta=dict(meta or {}, config=self._cfg.to_dict()))

    @classmethod
    def load(cls, directory):
        tensors, meta = serialization.load_manifest(directory)
        model = cls(RegressorConfig(**meta["config"]))
        model.load_state_dict(tensors)
        return model


def _align(features, ids, targets):
    if ids is None:
        if len(features) != len(targets.ids):
            raise DataError(f"{len(features)} feature rows for {len(targets.ids)} targets")
        return np.asarray(targets.coords)
    index = {k: i for i, k in enumerate(targets.ids)}
    missing = [k for k in ids if k not in index]
    if missing:
        raise DataError(f"no embedding target for ids: {missing[:10]}{' ...' if len(missing) > 10 else ''}")
    return np.asarray(targets.coords)[[index[k] for k in ids]]


def train_regressor(features, targets, cfg: RegressorConfig = None, ids=None, history=None):
    """Fit the manifold network to t-SNE coordinates by minimizing mean squared error.

    Returns ``(model, final_mse)`` with the loss in the targets' own units.
    ``model.initial_mse`` holds the loss of the untrained network and
    ``history``, if a list, receives the per-epoch training loss.
    """
    cfg = cfg or RegressorConfig(input_dim=np.shape(features)[1])
    X = np.asarray(features, dtype=np.float64)
    Y = _align(X, ids, targets)
    if X.shape[1] != cfg.input_dim:
        raise DimensionError(f"features have {X.shape[1]} dims, regressor expects {cfg.input_dim}")
    model = ManifoldModel(cfg)
    if cfg.standardize_inputs:
        # matters when the first layer has no batchnorm: raw feature scale would set the step size
        std = X.std(axis=0)
        model.feature_mean[:] = X.mean(axis=0)
        model.feature_scale[:] = np.where(std > 0, std, 1.0)
    if cfg.standardize_targets:
        model.target_mean[:] = Y.mean(axis=0)
        scale = np.sqrt(((Y - Y.mean(axis=0)) ** 2).mean())
        model.target_scale[:] = scale if scale > 0 else 1.0
    Yn = (Y - model.target_mean) / model.target_scale[0]
    opt = SGD([("all", list(model.named_parameters()), 1.0)], cfg)
    n = len(X)
    unit = model.target_scale[0] ** 2
    model.initial_mse = _batch_stat_mse(model, X, Yn) * unit
    for epoch in range(cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss = T.mse_loss(model(Tensor(X[idx])), Yn[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(epoch)
            total += loss.item() * len(idx)
            seen += len(idx)
        if history is not None:
            history.append({"epoch": epoch, "lr": lr_at(cfg.lr, cfg.decay, cfg.decay_period, epoch), "loss": total / seen * unit})
    final = float(((embed(model, X) - Y) ** 2).mean())
    model.final_mse = final
    return model, final


def _batch_stat_mse(model, X, Yn):
    """Train-mode loss over the whole set, leaving the running statistics untouched."""
    saved = {k: v.copy() for k, v in model.named_buffers()}
    model.train()
    with no_grad():
        loss = T.mse_loss(model(Tensor(X)), Yn).item()
    for name, buf in model.named_buffers():
        buf[...] = saved[name]
    return loss


def _rowwise_forward(model, X):
    # one matrix-vector product per row: a blocked matmul rounds a row
    # differently depending on what else is in the batch.
    X = (X - model.feature_mean) * (1.0 / model.feature_scale)
    for layer in model.layers:
        if layer.bn is not None:
            X = np.maximum(layer.bn(Tensor(X)).data, 0.0)
        X = np.matmul(X[:, None, :], layer.fc.weight.data)[:, 0] + layer.fc.bias.data
    return X


def embed(model: ManifoldModel, features, batch_size=4096):
    """Eval-mode coordinates for any number of samples, one row each.

    Every row is computed independently, so a sample's coordinates never
    depend on the batch it arrives in.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise DimensionError(f"manifold model expects n x {model.config.input_dim} features, got {X.shape}")
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(X), batch_size):
            out.append(_rowwise_forward(model, X[start : start + batch_size]))
    return model.to_target_units(np.concatenate(out) if out else np.zeros((0, model.config.output_dim)))
