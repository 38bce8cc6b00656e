"""Reverse-mode differentiation substrate.

Tensors are ``torch.Tensor`` objects and the reverse pass is torch autograd.
:class:`Tape` keeps the named leaves of one refinement instance, records
primitive applications for inspection, and :func:`backward` returns a
gradient for every leaf (zeros for leaves the loss does not touch).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .rasterizer import soft_rasterize


class ShapeError(ValueError):
    pass


def _min_argmin(x, dim=-1):
    # torch.argmin returns the first minimal index, i.e. lowest index on ties
    idx = torch.argmin(x, dim=dim, keepdim=True)
    return x.gather(dim, idx).squeeze(dim), idx.squeeze(dim)


def _gather_rows(x, index):
    return x.index_select(0, torch.as_tensor(index, dtype=torch.long))


def _scatter_add_rows(x, index, n):
    out = x.new_zeros((n,) + tuple(x.shape[1:]))
    return out.index_add(0, torch.as_tensor(index, dtype=torch.long), x)


def _bilinear_sample(feature_map, xy):
    """Sample ``(C, h, w)`` at normalized ``(P, 2)`` coordinates, border clamp."""
    grid = xy.reshape(1, 1, -1, 2).to(feature_map.dtype)
    out = F.grid_sample(feature_map[None], grid, mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[0, :, 0, :].T


PRIMITIVES = {
    "matmul": torch.matmul,
    "conv2d": F.conv2d,
    "add": torch.add,
    "mul": torch.mul,
    "sigmoid": torch.sigmoid,
    "relu": torch.relu,
    "log": torch.log,
    "square": torch.square,
    "sqrt": torch.sqrt,
    "sum": torch.sum,
    "mean": torch.mean,
    "min_argmin": _min_argmin,
    "gather": _gather_rows,
    "scatter_add": _scatter_add_rows,
    "bilinear_sample": _bilinear_sample,
    "rasterize": soft_rasterize,
}


@dataclass
class Node:
    op: str
    input_shapes: tuple
    output_shape: tuple


class Tape:
    """One instance's differentiation record.

    A tape is single threaded; build one per refinement instance.
    """

    def __init__(self):
        self.leaves: dict[str, torch.Tensor] = {}
        self.nodes: list[Node] = []

    def leaf(self, name: str, value, requires_grad: bool = True) -> torch.Tensor:
        t = value if isinstance(value, torch.Tensor) else torch.as_tensor(np.asarray(value))
        if requires_grad and not t.requires_grad:
            t = t.detach().clone().requires_grad_(True)
        self.leaves[name] = t
        return t

    def watch(self, named_parameters) -> None:
        for name, p in named_parameters:
            self.leaves[name] = p

    def record(self, op: str, *inputs, **attrs):
        if op not in PRIMITIVES:
            raise KeyError("unknown primitive %r" % op)
        try:
            out = PRIMITIVES[op](*inputs, **attrs)
        except RuntimeError as exc:
            shapes = [tuple(getattr(x, "shape", ())) for x in inputs]
            raise ShapeError("%s: incompatible inputs %s (%s)" % (op, shapes, exc)) from None
        first = out[0] if isinstance(out, tuple) else out
        self.nodes.append(Node(op, tuple(tuple(getattr(x, "shape", ())) for x in inputs),
                               tuple(first.shape)))
        return out


def backward(tape: Tape, loss: torch.Tensor) -> dict:
    """Gradients of a scalar ``loss`` for every leaf on the tape."""
    if loss.numel() != 1:
        raise ShapeError("loss must be a scalar, got shape %s" % (tuple(loss.shape),))
    names = [n for n, t in tape.leaves.items() if t.requires_grad]
    tensors = [tape.leaves[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: (torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState | None = None, lr: float = 7e-5,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update applied in place; returns ``(params, state)``."""
    state = AdamState() if state is None else state
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError("gradient for %s has shape %s, expected %s"
                                 % (name, tuple(g.shape), tuple(p.shape)))
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


def central_difference(fn, x: torch.Tensor, index, h: float) -> float:
    """Central finite difference of scalar ``fn()`` w.r.t. ``x.view(-1)[index]``."""
    flat = x.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + h
        fp = float(fn())
        flat[index] = orig - h
        fm = float(fn())
        flat[index] = orig
    return (fp - fm) / (2.0 * h)


def directional_difference(fn, tensors, directions, h: float) -> float:
    """Central difference of ``fn()`` along ``directions`` applied to ``tensors``."""
    with torch.no_grad():
        for t, d in zip(tensors, directions):
            t.data.add_(d, alpha=h)
        fp = float(fn())
        for t, d in zip(tensors, directions):
            t.data.add_(d, alpha=-2 * h)
        fm = float(fn())
        for t, d in zip(tensors, directions):
            t.data.add_(d, alpha=h)
    return (fp - fm) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 0.0) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    if denom == 0:
        return 0.0
    return abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    checked: int = 0
    failed: int = 0
    kinks: int = 0
    worst: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def kink_fraction(self) -> float:
        total = self.checked + self.kinks
        return self.kinks / total if total else 0.0

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        self.checked += other.checked
        self.failed += other.failed
        self.kinks += other.kinks
        self.worst = max(self.worst, other.worst)
        self.failures += other.failures
        return self


def _one_sided_kink(fn, x, index, h, kink_tol, floor) -> bool:
    flat = x.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        f0 = float(fn())
        flat[index] = orig + h
        fp = float(fn())
        flat[index] = orig - h
        fm = float(fn())
        flat[index] = orig
    return relative_error((fp - f0) / h, (f0 - fm) / h, floor) > kink_tol


def check_coordinates(fn, x: torch.Tensor, analytic: torch.Tensor, indices, h: float,
                      rtol: float, floor: float = 0.0, kink_tol: float = 0.05,
                      label: str = "") -> GradCheckReport:
    """Compare analytic gradient entries with central differences.

    A coordinate straddles a non-smooth point, such as a rasterizer edge
    switch, a nearest-neighbour change or a relu at exactly zero, when its
    central quotients at ``h`` and ``h/2`` disagree or its forward and
    backward quotients disagree by more than ``kink_tol`` (relative). Such
    coordinates are counted as kinks and excluded from the comparison.
    """
    rep = GradCheckReport()
    a_flat = analytic.reshape(-1)
    for i in indices:
        i = int(i)
        n1 = central_difference(fn, x, i, h)
        n2 = central_difference(fn, x, i, h / 2)
        if relative_error(n1, n2, floor) > kink_tol or _one_sided_kink(fn, x, i, h, kink_tol, floor):
            rep.kinks += 1
            continue
        a = float(a_flat[i])
        err = relative_error(a, n2, floor)
        rep.checked += 1
        rep.worst = max(rep.worst, err)
        if err > rtol:
            rep.failed += 1
            rep.failures.append((label, i, a, n2, err))
    return rep
