"""Tensor plumbing: checked ops, seeded RNG, gradient verification.

Autograd is torch's. This module adds the pieces the rest of the package
relies on: shape errors that name the op, finiteness checks, a portable
counter-based RNG, and a central-difference gradient checker.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

LAYER_NORM_EPS = 1e-5

_DTYPES = {"f32": torch.float32, "f64": torch.float64}
_state = {"dtype": torch.float32, "check_finite": True}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_precision(name: str) -> None:
    """Select the default float type for new tensors ("f32" or "f64")."""
    _state["dtype"] = _DTYPES[name]


def default_dtype() -> torch.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    old = _state["dtype"]
    _state["dtype"] = _DTYPES[name]
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-op finiteness checks (losses are always checked)."""
    old = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = old


def check_finite(x: Tensor, what: str) -> Tensor:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) in tensor of shape {tuple(x.shape)}")
    return x


def _run(name: str, fn: Callable[[], Tensor], *shapes) -> Tensor:
    try:
        out = fn()
    except RuntimeError as e:
        msg = " vs ".join(str(tuple(s)) for s in shapes)
        raise ShapeError(f"{name}: incompatible shapes {msg} ({e})") from None
    if _state["check_finite"]:
        check_finite(out, name)
    return out


def _shape(x) -> tuple:
    return tuple(x.shape) if isinstance(x, Tensor) else ()


# elementwise / scalar ---------------------------------------------------------

def add(a, b):
    return _run("add", lambda: a + b, _shape(a), _shape(b))


def sub(a, b):
    return _run("sub", lambda: a - b, _shape(a), _shape(b))


def mul(a, b):
    return _run("mul", lambda: a * b, _shape(a), _shape(b))


def div(a, b):
    return _run("div", lambda: a / b, _shape(a), _shape(b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    return _run("matmul", lambda: a @ b, a.shape, b.shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with w stored as (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {tuple(x.shape)} vs {tuple(w.shape)}")
    return _run("linear", lambda: F.linear(x, w.t(), b), x.shape, w.shape)


def transpose(x: Tensor, d0: int = -2, d1: int = -1) -> Tensor:
    return x.transpose(d0, d1)


def reshape(x: Tensor, *shape) -> Tensor:
    return _run("reshape", lambda: x.reshape(*shape), x.shape, shape)


def concat(xs: Sequence[Tensor], dim: int) -> Tensor:
    return _run("concat", lambda: torch.cat(list(xs), dim=dim), *[x.shape for x in xs])


def split(x: Tensor, sizes: Sequence[int], dim: int) -> list[Tensor]:
    if sum(sizes) != x.shape[dim]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to dim {dim} of {tuple(x.shape)}")
    return list(torch.split(x, list(sizes), dim=dim))


# nonlinearities / reductions --------------------------------------------------

def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return _run("softmax", lambda: torch.softmax(x, dim=dim), x.shape)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes (fused kernel)."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible shapes {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    return _run("attention", lambda: F.scaled_dot_product_attention(q, k, v), q.shape, k.shape, v.shape)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    # variance floor keeps constant rows (zero-init paths) finite
    return _run("layer_norm", lambda: F.layer_norm(x, x.shape[-1:], gain, bias, LAYER_NORM_EPS), x.shape)


def gelu(x: Tensor) -> Tensor:
    return _run("gelu", lambda: F.gelu(x), x.shape)


def mean(x: Tensor, dim=None) -> Tensor:
    return _run("mean", lambda: x.mean() if dim is None else x.mean(dim=dim), x.shape)


def sum_(x: Tensor, dim=None) -> Tensor:
    return _run("sum", lambda: x.sum() if dim is None else x.sum(dim=dim), x.shape)


def embedding(ids: Tensor, table: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside table of {table.shape[0]} rows")
    return _run("embedding", lambda: F.embedding(ids, table), ids.shape, table.shape)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    return check_finite(((a - b) ** 2).mean(), "mse")


def backward(loss: Tensor) -> None:
    """Populate .grad on every leaf reachable from a scalar loss (accumulating)."""
    if loss.dim() != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    loss.backward()


# named tensors ----------------------------------------------------------------

class NamedTensors(OrderedDict):
    """Insertion-ordered name -> tensor map."""

    def __setitem__(self, key, value):
        if not isinstance(key, str):
            raise TypeError("tensor names must be strings")
        super().__setitem__(key, value)

    def numel(self) -> int:
        return sum(t.numel() for t in self.values())

    def clone(self) -> "NamedTensors":
        return NamedTensors((k, v.detach().clone()) for k, v in self.items())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.values())).dtype

    def to(self, dtype: torch.dtype) -> "NamedTensors":
        out = NamedTensors()
        for k, v in self.items():
            out[k] = v.detach().to(dtype).requires_grad_(v.requires_grad)
        return out

    def subset(self, prefix: str) -> "NamedTensors":
        return NamedTensors((k, v) for k, v in self.items() if k.startswith(prefix))

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None


# RNG --------------------------------------------------------------------------

class Rng:
    """Philox-4x64 stream (numpy's counter-based bit generator).

    Child streams are keyed by strings/ints hashed into the seed sequence, so
    e.g. ``Rng(7).child("noise", 12)`` is fixed regardless of what other
    children were drawn from.
    """

    def __init__(self, seed: int, key: Iterable[int] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), *self.key])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *path) -> "Rng":
        key = list(self.key)
        for p in path:
            if isinstance(p, str):
                key.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little"))
            else:
                key.append(int(p))
        return Rng(self.seed, key)

    def normal(self, shape, std: float = 1.0, dtype: torch.dtype | None = None) -> Tensor:
        a = self._gen.standard_normal(size=tuple(shape))
        if std != 1.0:
            a = a * std
        return torch.from_numpy(a).to(dtype or default_dtype())

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers on the closed range [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# gradient verification --------------------------------------------------------

def finite_diff_check(
    f: Callable[[NamedTensors], Tensor],
    params: NamedTensors,
    step: float = 1e-3,
    samples: int = 20,
    rng: Rng | None = None,
    oracle_dtype: torch.dtype | None = None,
) -> float:
    """Worst per-tensor relative error between autograd and central differences.

    Autograd runs at the dtype of ``params``. The central differences run at
    ``oracle_dtype`` (default: same dtype), so an f32 backward can be checked
    against an f64 oracle; ``f`` must therefore build its inputs at
    ``params.dtype``. Up to ``samples`` coordinates per tensor are perturbed
    and each tensor scores ||a - c|| / (||a|| + ||c|| + 1e-12).
    """
    rng = rng or Rng(0)
    work = NamedTensors((k, v.detach().clone().requires_grad_(True)) for k, v in params.items())
    backward(f(work))
    probe = work.to(oracle_dtype) if oracle_dtype is not None else work
    worst = 0.0
    with torch.no_grad():
        for name, t in work.items():
            g = t.grad if t.grad is not None else torch.zeros_like(t)
            flat = probe[name].view(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= samples else rng.child(name).choice(n, size=samples, replace=False)
            a = np.array([g.view(-1)[int(i)].item() for i in idx])
            c = np.empty(len(idx))
            for j, i in enumerate(idx):
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + step
                fp = f(probe).item()
                flat[i] = orig - step
                fm = f(probe).item()
                flat[i] = orig
                c[j] = (fp - fm) / (2 * step)
            err = np.linalg.norm(a - c) / (np.linalg.norm(a) + np.linalg.norm(c) + 1e-12)
            worst = max(worst, float(err))
    if math.isnan(worst):
        raise NonFiniteError("finite_diff_check produced NaN")
    return worst
