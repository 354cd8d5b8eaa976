"""Minimal module system: parameter containers and the layers the models use.

Layers take an explicit numpy Generator for initialization so that model
construction is reproducible bit-for-bit from a seed. Spectral normalization
is built into Linear/Conv2d behind `sn=True`: one power iteration updates the
persistent u vector per training-mode forward; eval-mode forwards recompute
sigma from the stored u without mutating it, keeping inference a pure
function of (weights, inputs).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .norms import SpectralState, spectral_normalize


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_states", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, SpectralState):
            self._states[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_states(self, prefix=""):
        """Non-trainable persistent arrays (spectral-norm u vectors)."""
        for name, s in self._states.items():
            yield prefix + name, s
        for name, m in self._modules.items():
            yield from m.named_states(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, flag=True):
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def param_hash(self):
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def lrelu_gain(slope=0.2):
    return float(np.sqrt(2.0 / (1.0 + slope * slope)))


class Linear(Module):
    def __init__(self, rng, in_features, out_features, bias=True, sn=False, gain=1.0, dtype=np.float32):
        super().__init__()
        std = gain / np.sqrt(in_features)
        self.weight = Parameter(rng.standard_normal((out_features, in_features)) * std, dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), dtype=dtype) if bias else None
        self.sn = sn
        if sn:
            self.sn_state = SpectralState.init(out_features, rng, dtype=dtype)

    def _weight(self):
        if not self.sn:
            return self.weight
        w_sn, state, _ = spectral_normalize(self.weight, self.sn_state, update=self.training)
        if self.training:
            self.sn_state.u = state.u
        return w_sn

    def forward(self, x):
        w = self._weight()
        out = ad.matmul(x, ad.transpose(w, (1, 0)))
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(self, rng, in_ch, out_ch, k, stride=1, padding=0, bias=True, sn=False, gain=1.0, dtype=np.float32):
        super().__init__()
        fan_in = in_ch * k * k
        std = gain / np.sqrt(fan_in)
        self.weight = Parameter(rng.standard_normal((out_ch, in_ch, k, k)) * std, dtype=dtype)
        self.bias = Parameter(np.zeros(out_ch), dtype=dtype) if bias else None
        self.stride = stride
        self.padding = padding
        self.sn = sn
        if sn:
            self.sn_state = SpectralState.init(out_ch, rng, dtype=dtype)

    def _weight(self):
        if not self.sn:
            return self.weight
        oc = self.weight.shape[0]
        w2d = ad.reshape(self.weight, (oc, -1))
        w_sn, state, _ = spectral_normalize(w2d, self.sn_state, update=self.training)
        if self.training:
            self.sn_state.u = state.u
        return ad.reshape(w_sn, self.weight.shape)

    def forward(self, x):
        return ad.conv2d(x, self._weight(), self.bias, stride=self.stride, padding=self.padding)


class Embedding(Module):
    def __init__(self, rng, num_embeddings, dim, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(rng.standard_normal((num_embeddings, dim)) * 0.1, dtype=dtype)

    def forward(self, ids):
        return ad.take_rows(self.weight, ids)


class Scalar(Module):
    """Single trainable scalar (gating weights)."""

    def __init__(self, value, dtype=np.float32):
        super().__init__()
        self.value = Parameter(np.asarray(value), dtype=dtype)

    def forward(self):
        return self.value


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        for i, m in enumerate(mods):
            setattr(self, f"m{i}", m)
        self._items = list(mods)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def converge_spectral_states(module, n_iters=50):
    """Run extra power iterations so every stored u is at its fixed point.

    At the fixed point sigma's treat-u-v-as-constant gradient equals the true
    gradient (envelope argument), which finite-difference checks require.
    """
    from .norms import _power_iterate

    for m in module.modules():
        if getattr(m, "sn", False):
            w = m.weight.data.reshape(m.weight.data.shape[0], -1)
            u, _ = _power_iterate(w, m.sn_state.u.astype(w.dtype), n_iters)
            m.sn_state.u = u
    return module


def state_arrays(module, prefix=""):
    """Flat dict of every parameter and spectral state array, by name."""
    out = {}
    for name, p in module.named_parameters(prefix):
        out[name] = p.data
    for name, s in module.named_states(prefix):
        out[name + ".u"] = s.u
    return out


def load_state_arrays(module, arrays, prefix=""):
    for name, p in module.named_parameters(prefix):
        src = arrays[name]
        if src.shape != p.data.shape:
            raise ValueError(f"parameter {name}: shape {src.shape} != {p.data.shape}")
        p.data = src.astype(p.data.dtype).copy()
    for name, s in module.named_states(prefix):
        s.u = arrays[name + ".u"].astype(s.u.dtype).copy()
