"""Parameter store, layers, normalization, and the AdamW optimizer.

Layers are thin wrappers that register named parameter tensors in a
ParamStore at construction and build autodiff graphs when called. The
naming is what the checkpoint format serializes, so it must stay stable.
"""
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Var

__all__ = ["ParamStore", "SparseConv", "Linear", "Norm", "AdamW",
           "global_grad_norm", "clip_global_grad_norm"]


class ParamStore:
    """Ordered registry of learnable parameters and non-learnable state
    tensors (e.g. normalization running statistics)."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self.params: dict[str, Var] = {}
        self.states: dict[str, np.ndarray] = {}

    def param(self, name, value) -> Var:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Var(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = v
        return v

    def state(self, name, value) -> np.ndarray:
        if name in self.states:
            raise ValueError(f"duplicate state name {name!r}")
        arr = np.asarray(value, dtype=self.dtype)
        self.states[name] = arr
        return arr

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint must carry, parameters then states."""
        out = {name: v.data for name, v in self.params.items()}
        out.update(self.states)
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]):
        missing = (set(self.params) | set(self.states)) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:5]} ...")
        for name, v in self.params.items():
            src = np.asarray(tensors[name], dtype=self.dtype)
            if src.shape != v.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {v.data.shape}")
            v.data = src.copy()
        for name in self.states:
            src = np.asarray(tensors[name], dtype=self.dtype)
            np.copyto(self.states[name], src)

    def n_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())


class SparseConv:
    """One sparse convolution's parameters; apply with a prebuilt kernel map."""

    def __init__(self, store, name, c_in, c_out, kernel_size, rng, bias=True, init="kaiming"):
        k3 = kernel_size ** 3
        if init == "zeros":
            kernel = np.zeros((k3, c_in, c_out))
        else:
            std = math.sqrt(2.0 / (k3 * c_in))
            kernel = rng.normal(0.0, std, size=(k3, c_in, c_out))
        self.kernel = store.param(f"{name}.kernel", kernel)
        self.bias = store.param(f"{name}.bias", np.zeros(c_out)) if bias else None
        self.kernel_size = kernel_size
        self.c_in, self.c_out = c_in, c_out

    def __call__(self, feats: Var, kmap) -> Var:
        return ad.sparse_conv(feats, self.kernel, self.bias, kmap)


class Linear:
    def __init__(self, store, name, c_in, c_out, rng, init="kaiming"):
        if init == "zeros":
            w = np.zeros((c_in, c_out))
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / c_in), size=(c_in, c_out))
        self.weight = store.param(f"{name}.weight", w)
        self.bias = store.param(f"{name}.bias", np.zeros(c_out))

    def __call__(self, x: Var) -> Var:
        return ad.matmul(x, self.weight) + self.bias


class Norm:
    """Per-feature affine normalization over voxel rows.

    mode "batch": training normalizes with the current rows and tracks
    running statistics; evaluation uses the frozen running statistics.
    mode "instance": always normalizes with the current rows.
    """

    def __init__(self, store, name, c, mode="batch", momentum=0.1, eps=1e-5):
        if mode not in ("batch", "instance"):
            raise ValueError(f"unknown norm mode {mode!r}")
        self.gamma = store.param(f"{name}.gamma", np.ones(c))
        self.beta = store.param(f"{name}.beta", np.zeros(c))
        self.mode = mode
        self.momentum = momentum
        self.eps = eps
        if mode == "batch":
            self.running_mean = store.state(f"{name}.running_mean", np.zeros(c))
            self.running_var = store.state(f"{name}.running_var", np.ones(c))

    def __call__(self, x: Var, training: bool) -> Var:
        if x.data.shape[0] == 0:
            return x * self.gamma + self.beta
        if self.mode == "batch" and not training:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv
        else:
            mu = x.mean(axis=0)
            var = ((x - mu) ** 2).mean(axis=0)
            if self.mode == "batch":
                m = self.momentum
                n = x.data.shape[0]
                unbiased = var.data * (n / max(n - 1, 1))
                self.running_mean *= 1 - m
                self.running_mean += m * mu.data
                self.running_var *= 1 - m
                self.running_var += m * unbiased
            xhat = (x - mu) / ad.sqrt(var + self.eps)
        return xhat * self.gamma + self.beta


def global_grad_norm(params) -> float:
    total = 0.0
    for v in params.values():
        if v.grad is not None:
            total += float((v.grad * v.grad).sum())
    return math.sqrt(total)


def clip_global_grad_norm(params, max_norm) -> float:
    """Scale all gradients so the global norm is at most max_norm.
    Returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for v in params.values():
            if v.grad is not None:
                v.grad *= scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Update per step t for each parameter p with gradient g:
        m <- b1 m + (1-b1) g        v <- b2 v + (1-b2) g^2
        m^ = m / (1 - b1^t)         v^ = v / (1 - b2^t)
        p <- p - lr * (m^ / (sqrt(v^) + eps) + wd * p)
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            g2 = g * g
            g2 *= 1 - self.b2
            v += g2
            # lr * mhat / (sqrt(vhat) + eps), reusing g2 as scratch
            np.sqrt(v, out=g2)
            g2 *= 1.0 / math.sqrt(bc2)
            g2 += self.eps
            np.divide(m, g2, out=g2)
            g2 *= self.lr / bc1
            p.data *= 1.0 - self.lr * self.wd
            p.data -= g2
