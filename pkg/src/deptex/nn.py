"""Parameter containers and the layers the networks are assembled from."""
import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError
from .tensor import Tensor


class Module:
    """Owns named parameters, buffers and submodules, in attribute order."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DataError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if p.data.shape != np.shape(state[name]):
                raise DimensionError(f"{name}: checkpoint shape {np.shape(state[name])} != {p.data.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Fully connected layer, weight stored as (in, out)."""

    def __init__(self, n_in, n_out, rng, init="fan_in", name="linear"):
        if init == "xavier":
            bound = np.sqrt(6.0 / (n_in + n_out))
        elif init == "kaiming":
            bound = np.sqrt(6.0 / n_in)
        else:
            bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(uniform(rng, (n_in, n_out), bound), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out) if init == "xavier" else uniform(rng, (n_out,), bound), requires_grad=True)
        self._name = name

    def forward(self, x):
        return T.linear(x, self.weight, self.bias, name=self._name)


class Conv2d(Module):
    """Square-kernel convolution, Kaiming fan-in uniform init."""

    def __init__(self, c_in, c_out, k, rng, stride=1, pad=0, bias=False):
        fan_in = c_in * k * k
        self.weight = Tensor(uniform(rng, (c_out, c_in, k, k), np.sqrt(6.0 / fan_in)), requires_grad=True)
        self.bias = Tensor(uniform(rng, (c_out,), 1.0 / np.sqrt(fan_in)), requires_grad=True) if bias else None
        self._stride = stride
        self._pad = pad

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)


class BatchNorm(Module):
    def __init__(self, n, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(n), requires_grad=True)
        self.beta = Tensor(np.zeros(n), requires_grad=True)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self._eps = eps
        self._momentum = momentum

    def forward(self, x):
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode="train" if self.training else "eval",
            eps=self._eps,
            momentum=self._momentum,
        )
