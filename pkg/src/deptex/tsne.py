"""PCA reduction and exact t-SNE.

The embedding fit here is the regression target the manifold network learns;
it is computed once over the training features and never sees test samples.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import serialization
from ._backend import kernels
from .errors import DataError, NumericalError, ParameterError
from .tensor import _accumulate, _node

P_FLOOR = 1e-12


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    pca_dims: int = 50
    output_dims: int = 2
    iterations: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    init_std: float = 1e-2
    min_gain: float = 0.01
    perplexity_tol: float = 1e-5
    search_iters: int = 50
    max_train: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 1:
            raise ParameterError(f"tsne.perplexity must exceed 1, got {self.perplexity}")
        if self.output_dims < 1 or self.pca_dims < 1 or self.iterations < 1:
            raise ParameterError("tsne.output_dims, tsne.pca_dims and tsne.iterations must be positive")
        if self.learning_rate <= 0 or self.min_gain <= 0 or self.max_train < 4:
            raise ParameterError("tsne.learning_rate and tsne.min_gain must be positive and tsne.max_train >= 4")

    def to_dict(self):
        return asdict(self)


@dataclass
class EmbeddedDistribution:
    ids: list
    coords: np.ndarray
    config: TsneConfig
    final_kl: float
    initial_kl: float = float("nan")
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.coords):
            raise DataError(f"{len(self.ids)} ids for {len(self.coords)} coordinates")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids must be unique")

    def save(self, stem):
        """``<stem>.csv`` (id,x,y), ``<stem>.json`` sidecar and ``<stem>.tnsr`` coords."""
        stem = Path(stem)
        lines = ["id,x,y"] + [f"{i},{x:.17g},{y:.17g}" for i, (x, y) in zip(self.ids, self.coords[:, :2])]
        stem.with_suffix(".csv").write_text("\n".join(lines) + "\n")
        sidecar = {"config": self.config.to_dict(), "final_kl": self.final_kl, "initial_kl": self.initial_kl, "n": len(self.ids)}
        stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        serialization.save(stem.with_suffix(".tnsr"), self.coords)

    @classmethod
    def load(cls, stem):
        stem = Path(stem)
        rows = [line.split(",") for line in stem.with_suffix(".csv").read_text().splitlines()[1:] if line]
        sidecar = json.loads(stem.with_suffix(".json").read_text())
        coords = np.array([[float(r[1]), float(r[2])] for r in rows])
        return cls([r[0] for r in rows], coords, TsneConfig(**sidecar["config"]), sidecar["final_kl"], sidecar["initial_kl"])


def pca_reduce(X, dims):
    """Project centred data onto its top ``dims`` principal directions.

    Each direction's largest-magnitude loading is made positive. Uses the
    covariance eigenproblem when D <= n and the Gram matrix otherwise.
    """
    X = np.asarray(X, dtype=np.float64)
    n, D = X.shape
    if n < 2:
        raise ParameterError(f"pca_reduce needs at least 2 samples, got {n}")
    if dims < 1 or dims > D:
        raise ParameterError(f"pca dims must be in [1, {D}], got {dims}")
    Xc = X - X.mean(axis=0)
    if D <= n:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc)
        order = np.argsort(evals)[::-1][:dims]
        V = evecs[:, order]
    else:
        evals, U = np.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(evals)[::-1][:dims]
        lam = evals[order]
        scale = np.where(lam > 1e-12 * max(lam.max(), 1e-300), 1.0 / np.sqrt(np.maximum(lam, 1e-300)), 0.0)
        V = (Xc.T @ U[:, order]) * scale
    pivot = np.abs(V).argmax(axis=0)
    signs = np.sign(V[pivot, np.arange(V.shape[1])])
    V = V * np.where(signs == 0, 1.0, signs)
    return Xc @ V


def squared_distances(X):
    X = np.asarray(X, dtype=np.float64)
    sq = (X * X).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    np.fill_diagonal(d2, 0.0)
    return d2


def calibrate_perplexity(d2, perplexity, tol=1e-5, max_iter=50):
    """Conditional neighbour distributions P_{j|i} with exp(H(P_i)) = perplexity."""
    d2 = np.ascontiguousarray(d2, dtype=np.float64)
    n = d2.shape[0]
    if d2.shape != (n, n):
        raise ParameterError(f"distance matrix must be square, got {d2.shape}")
    if n <= perplexity + 1:
        raise ParameterError(f"perplexity {perplexity} needs more than {perplexity + 1} points, got {n}")
    if (d2 < 0).any() or np.abs(np.diag(d2)).max() > 0:
        raise ParameterError("squared distances must be non-negative with a zero diagonal")
    P, _ = kernels.perplexity_search(d2, float(perplexity), float(tol), int(max_iter))
    return P


def row_perplexity(P):
    """exp of the Shannon entropy (nats) of each row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1)
    return np.exp(h)


def joint_probabilities(P_cond):
    """Symmetrize, floor and renormalize conditional affinities into joint p_ij."""
    n = P_cond.shape[0]
    P = (P_cond + P_cond.T) / (2.0 * n)
    P = np.maximum(P, P_FLOOR)
    np.fill_diagonal(P, 0.0)
    return P / P.sum()


def kl_and_grad(P, Y):
    return kernels.tsne_grad(np.ascontiguousarray(P), np.ascontiguousarray(Y, dtype=np.float64))


def kl_divergence(P, Y):
    return kl_and_grad(P, Y)[1]


def tsne_kl(P, Y):
    """KL(P || Q(Y)) as a differentiable scalar of the embedding tensor ``Y``."""
    grad, kl = kl_and_grad(P, Y.data)

    def backward(g):
        _accumulate(Y, g * grad)

    return _node(np.asarray(kl), (Y,), backward, "tsne_kl")


def tsne_fit(X, cfg: TsneConfig = None, ids=None):
    """PCA to ``cfg.pca_dims`` then exact t-SNE with early exaggeration, momentum and gains."""
    cfg = cfg or TsneConfig()
    X = np.asarray(X, dtype=np.float64)
    n, D = X.shape
    if n < 4:
        raise ParameterError(f"t-SNE needs at least 4 points, got {n}")
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    if D > cfg.pca_dims:
        X = pca_reduce(X, min(cfg.pca_dims, n))
    P = joint_probabilities(calibrate_perplexity(squared_distances(X), cfg.perplexity, cfg.perplexity_tol, cfg.search_iters))
    rng = np.random.default_rng(cfg.seed)
    Y = rng.normal(0.0, cfg.init_std, size=(n, cfg.output_dims))
    initial_kl = kl_divergence(P, Y)
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = []
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        grad, kl = kl_and_grad(P * exag, Y)
        if not (np.isfinite(kl) and np.isfinite(grad).all()):
            raise NumericalError(f"t-SNE diverged at iteration {it}; recent (iteration, KL): {trace[-5:]}")
        if it % 50 == 0 or it == cfg.iterations - 1:
            trace.append((it, float(kl)))
        gains = np.where(np.sign(grad) != np.sign(velocity), gains + 0.2, gains * 0.8)
        np.maximum(gains, cfg.min_gain, out=gains)
        velocity = mom * velocity - cfg.learning_rate * gains * grad
        Y = Y + velocity
        Y -= Y.mean(axis=0)
    final_kl = kl_divergence(P, Y)
    if not np.isfinite(final_kl):
        raise NumericalError(f"t-SNE produced a non-finite KL; trace: {trace[-5:]}")
    return EmbeddedDistribution(ids, Y, cfg, float(final_kl), float(initial_kl), trace)
