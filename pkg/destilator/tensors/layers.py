import numpy as np

from . import ops
from .autodiff import Tensor


class Module:
    """Osnova za sloje: zbira parametre in stanja normalizacije iz atributov."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor, ops.BatchNormState)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor, ops.BatchNormState)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        params = {}
        for name, value in self._children():
            if isinstance(value, Module):
                params.update(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, Tensor):
                params[f"{prefix}{name}"] = value
        return params

    def named_norm_states(self, prefix=""):
        states = {}
        for name, value in self._children():
            if isinstance(value, Module):
                states.update(value.named_norm_states(f"{prefix}{name}."))
            elif isinstance(value, ops.BatchNormState):
                states[f"{prefix}{name}"] = value
        return states

    def named_buffers(self):
        buffers = {}
        for name, state in self.named_norm_states().items():
            buffers[f"{name}.running_mean"] = state.running_mean
            buffers[f"{name}.running_var"] = state.running_var
        return buffers

    def load_buffers(self, buffers):
        for name, state in self.named_norm_states().items():
            state.running_mean = np.array(buffers[f"{name}.running_mean"], dtype=float)
            state.running_var = np.array(buffers[f"{name}.running_var"], dtype=float)

    def train(self, mode=True):
        for state in self.named_norm_states().values():
            state.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for param in self.named_parameters().values():
            param.requires_grad = False
        return self


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=0, bias=True):
        fan_in = in_channels * kernel * kernel
        self.weight = parameter(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel, kernel))
        )
        self.bias = parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.state = ops.BatchNormState(channels)

    def __call__(self, x, mask=None):
        return ops.batch_norm(x, self.gamma, self.beta, self.state, mask=mask)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, std=None):
        std = np.sqrt(1.0 / in_features) if std is None else std
        self.weight = parameter(rng.normal(0.0, std, (in_features, out_features)))
        self.bias = parameter(np.zeros(out_features))

    def __call__(self, x):
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)
