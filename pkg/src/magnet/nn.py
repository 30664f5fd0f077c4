"""Parameter containers, initializers and the Adam optimizer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def conv_param(rng, name: str, k: int, cin: int, cout: int) -> Parameter:
    return Parameter(he_normal(rng, (k, k, cin, cout), k * k * cin), name=name)


def zeros_param(name: str, *shape: int) -> Parameter:
    return Parameter(np.zeros(shape), name=name)


class Module:
    """Base class collecting ``Parameter`` attributes under dotted names.

    Child modules and lists of modules are walked recursively, in attribute
    insertion order, so names are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            yield from _walk(value, f"{prefix}{attr}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays into parameters; return the names that were loaded."""
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        loaded = []
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}")
            p.data = arr.copy()
            loaded.append(name)
        return loaded

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.frozen = frozen


def _walk(value, name: str):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Adam:
    """Adam with bias correction. Frozen parameters are left untouched."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            m, v = self.m[id(p)], self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """One Adam update over ``params``; pass the returned state back in to continue."""
    opt = state if state is not None else Adam(params, lr=lr, betas=betas, eps=eps)
    opt.lr = lr
    opt.step()
    return opt
