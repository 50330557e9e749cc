"""Minimal reverse-mode autodiff on float64 numpy arrays.

Just enough machinery for the encoder/decoder stacks: a Tensor holding data,
grad and a backward closure, a handful of primitive ops, graph convolution,
Huber/MSE losses, Adam, and a cosine learning-rate schedule.  Everything is
deterministic given the seeds; no threads, no global state.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp


class NonFiniteLossError(ArithmeticError):
    """Raised when a training loss stops being finite."""


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse sweep from this (scalar) node."""
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward()

    def item(self) -> float:
        return float(self.data)


def _needs_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, backward, requires_grad):
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data
    rg = _needs_grad(a, b)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward, rg)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data
    rg = _needs_grad(a, b)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(out.grad, b.data.shape))

    out = _make(out_data, (a, b), backward, rg)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data
    rg = _needs_grad(a, b)

    def backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out = _make(out_data, (a, b), backward, rg)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * s)

    out = _make(out_data, (a,), backward, a.requires_grad)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data
    rg = _needs_grad(a, b)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out = _make(out_data, (a, b), backward, rg)
    return out


def transpose(a: Tensor) -> Tensor:
    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.T)

    out = _make(a.data.T, (a,), backward, a.requires_grad)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * mask)

    out = _make(a.data * mask, (a,), backward, a.requires_grad)
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward():
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(out.grad) / n))

    out = _make(a.data.mean(), (a,), backward, a.requires_grad)
    return out


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)

    out = _make(a.data[idx], (a,), backward, a.requires_grad)
    return out


def concat_cols(tensors: list) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    rg = _needs_grad(*tensors)
    widths = [t.data.shape[1] for t in tensors]

    def backward():
        ofs = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                t._accumulate(out.grad[:, ofs:ofs + w])
            ofs += w

    out = _make(out_data, tuple(tensors), backward, rg)
    return out


def spmm(matrix: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse constant matrix times dense tensor; used for neighbor means."""
    m = matrix.tocsr()
    mt = m.T.tocsr()

    def backward():
        if x.requires_grad:
            x._accumulate(mt @ out.grad)

    out = _make(m @ x.data, (x,), backward, x.requires_grad)
    return out


# --- losses -------------------------------------------------------------------

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    d = sub(pred, target)
    return mean(mul(d, d))


def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber loss: quadratic within |r| <= delta, linear beyond, with
    matching value and slope at the knee."""
    r = pred.data - target.data
    a = np.abs(r)
    vals = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = r.size
    rg = _needs_grad(pred, target)

    def backward():
        g = float(out.grad) * np.clip(r, -delta, delta) / n
        if pred.requires_grad:
            pred._accumulate(g)
        if target.requires_grad:
            target._accumulate(-g)

    out = _make(vals.mean(), (pred, target), backward, rg)
    return out


# --- layers -------------------------------------------------------------------

def he_normal(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    return rng.standard_normal((d_out, d_in)) * math.sqrt(2.0 / d_in)


class Linear:
    """Affine layer y = x W^T + b with weight shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.name = name
        self.w = Tensor(he_normal(rng, d_out, d_in), requires_grad=True)
        self.b = Tensor(np.zeros((1, d_out)), requires_grad=True)

    def __call__(self, x: Tensor, w_extra: Tensor | None = None) -> Tensor:
        w = self.w if w_extra is None else add(self.w, w_extra)
        return add(matmul(x, transpose(w)), self.b)

    def params(self) -> dict:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class GraphConvLayer:
    """h'_i = relu(W_self h_i + W_nbr mean_{j in N(i)} h_j + b); nodes without
    neighbors aggregate a zero vector."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str):
        self.name = name
        self.w_self = Tensor(he_normal(rng, d_out, d_in), requires_grad=True)
        self.w_nbr = Tensor(he_normal(rng, d_out, d_in), requires_grad=True)
        self.b = Tensor(np.zeros((1, d_out)), requires_grad=True)

    def __call__(self, h: Tensor, agg: sp.spmatrix,
                 self_extra: Tensor | None = None, nbr_extra: Tensor | None = None) -> Tensor:
        ws = self.w_self if self_extra is None else add(self.w_self, self_extra)
        wn = self.w_nbr if nbr_extra is None else add(self.w_nbr, nbr_extra)
        own = matmul(h, transpose(ws))
        nbr = matmul(spmm(agg, h), transpose(wn))
        return relu(add(add(own, nbr), self.b))

    def params(self) -> dict:
        return {f"{self.name}.w_self": self.w_self,
                f"{self.name}.w_nbr": self.w_nbr,
                f"{self.name}.b": self.b}


def neighbor_mean_matrix(neighbors: list, n_cols: int | None = None) -> sp.csr_matrix:
    """Row-normalized aggregation matrix from per-node neighbor index lists.
    Row i averages the states of ``neighbors[i]``; empty lists yield a zero
    row, so isolated nodes aggregate a zero vector."""
    n_rows = len(neighbors)
    n_cols = n_rows if n_cols is None else n_cols
    rows, cols, vals = [], [], []
    for i, nbrs in enumerate(neighbors):
        for j in nbrs:
            rows.append(i)
            cols.append(int(j))
            vals.append(1.0 / len(nbrs))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_cols))


def graph_conv(h: Tensor, neighbors: list, w_self: Tensor, w_nbr: Tensor,
               bias: Tensor) -> Tensor:
    """Functional one-shot graph convolution over neighbor index lists."""
    agg = neighbor_mean_matrix(neighbors, n_cols=h.data.shape[0])
    own = matmul(h, transpose(w_self))
    nbr = matmul(spmm(agg, h), transpose(w_nbr))
    return relu(add(add(own, nbr), bias))


# --- optimization ----------------------------------------------------------------

class CosineSchedule:
    """lr(t) = lr_end + 0.5 (lr_start - lr_end) (1 + cos(pi t / total));
    exactly lr_start at t=0 and lr_end at t=total."""

    def __init__(self, lr_start: float = 1e-4, lr_end: float = 1e-6, total_steps: int = 1):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.lr_start = float(lr_start)
        self.lr_end = float(lr_end)
        self.total_steps = int(total_steps)

    def lr(self, step: int) -> float:
        t = min(max(step, 0), self.total_steps)
        if t == 0:
            return self.lr_start
        if t == self.total_steps:
            return self.lr_end
        return self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (
            1.0 + math.cos(math.pi * t / self.total_steps))


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over a name->Tensor map."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / b1c
            v_hat = self.v[k] / b2c
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def check_finite(value: float, context: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLossError(f"{context}: loss became non-finite ({value})")
    return value
