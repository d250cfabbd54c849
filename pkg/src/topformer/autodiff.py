"""Reverse-mode gradients over the tensor op set, plus finite-difference checks.

A :class:`Tape` is an ops backend (see ``model``): every method computes
the forward value with the array kernels and appends a node holding a
backward rule. Batch norm is differentiated in its frozen inference form.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from . import tensor as T
from .errors import GradcheckError, ShapeError
from .tensor import BN_EPS

KINK_MARGIN = 1e-3


class Var:
    """A value on the tape. Leaves carry a name."""

    __slots__ = ("value", "name", "id")

    def __init__(self, value, name=None, id_=None):
        self.value = value
        self.name = name
        self.id = id_

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or self.id}, {self.value.shape})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    output: Var
    backward: Callable  # grad_out -> tuple of grads aligned with inputs (None = no grad)


class Tape:
    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self.leaves = {}
        self._n = 0
        for name, v in (params or {}).items():
            self.leaf(name, v)

    def _new(self, value, name=None):
        self._n += 1
        return Var(value, name, self._n)

    def leaf(self, name, value) -> Var:
        v = self._new(np.array(value, dtype=self.dtype), name)
        self.leaves[name] = v
        return v

    def _rec(self, op, inputs, value, backward) -> Var:
        out = self._new(value)
        self.nodes.append(TapeNode(op, tuple(inputs), out, backward))
        return out

    # ---- ops backend interface

    def param(self, name):
        return self.leaves[name]

    def dims(self, x):
        return x.value.shape

    def conv2d(self, x, spec, w, b=None, name=None):
        xv, wv = x.value, w.value
        y = T._conv2d(xv, spec, wv, None if b is None else b.value)

        def back(g):
            gx, gw = _conv2d_backward(xv, wv, spec, g)
            return (gx, gw) + ((g.sum(axis=(0, 2, 3)),) if b is not None else ())
        return self._rec("conv2d", (x, w) + ((b,) if b is not None else ()), y, back)

    def batchnorm(self, x, gamma, beta, mean, var, name=None):
        xv, ga, mu, va = x.value, gamma.value, mean.value, var.value
        s = np.sqrt(va + BN_EPS)
        xhat = (xv - mu[None, :, None, None]) / s[None, :, None, None]
        y = xhat * ga[None, :, None, None] + beta.value[None, :, None, None]

        def back(g):
            gsum = g.sum(axis=(0, 2, 3))
            gx = g * (ga / s)[None, :, None, None]
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gmean = -gsum * ga / s
            gvar = -0.5 * ggamma * ga / (va + BN_EPS)
            return gx, ggamma, gsum, gmean, gvar
        return self._rec("batchnorm", (x, gamma, beta, mean, var), y, back)

    def relu6(self, x):
        xv = x.value
        # subgradient 0 at both kinks
        return self._rec("relu6", (x,), T._relu6(xv), lambda g: (g * ((xv > 0) & (xv < 6)),))

    def sigmoid(self, x):
        y = T._sigmoid(x.value)
        return self._rec("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))

    def softmax(self, x):
        y = T._softmax(x.value)
        return self._rec("softmax", (x,), y,
                         lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))

    def adaptive_avg_pool(self, x, oh, ow):
        h, w = x.value.shape[2:]
        ph, pw = T.pool_matrix(h, oh), T.pool_matrix(w, ow)
        return self._rec("adaptive_avg_pool", (x,), T._adaptive_avg_pool(x.value, oh, ow),
                         lambda g: (T._separable(g, ph.T, pw.T),))

    def upsample(self, x, oh, ow):
        h, w = x.value.shape[2:]
        ah, aw = T.interp_matrix(h, oh), T.interp_matrix(w, ow)
        return self._rec("bilinear_upsample", (x,), T._bilinear(x.value, oh, ow),
                         lambda g: (T._separable(g, ah.T, aw.T),))

    def add(self, a, b):
        T._same_dims("add", a.value, b.value)
        return self._rec("add", (a, b), a.value + b.value, lambda g: (g, g))

    def hadamard(self, a, b):
        av, bv = a.value, b.value
        T._same_dims("hadamard", av, bv)
        return self._rec("hadamard", (a, b), av * bv, lambda g: (g * bv, g * av))

    def concat(self, xs):
        xs = list(xs)
        bounds = T._split_bounds(sum(x.value.shape[1] for x in xs), [x.value.shape[1] for x in xs])
        y = T._concat([x.value for x in xs])
        return self._rec("concat_channels", xs, y, lambda g: tuple(g[:, lo:hi] for lo, hi in bounds))

    def split(self, x, sizes):
        xv = x.value
        outs = []
        for lo, hi in T._split_bounds(xv.shape[1], sizes):
            def back(g, lo=lo, hi=hi):
                gx = np.zeros_like(xv)
                gx[:, lo:hi] = g
                return (gx,)
            outs.append(self._rec("split_channels", (x,), xv[:, lo:hi].copy(), back))
        return outs

    def matmul(self, a, b, name=None):
        av, bv = a.value, b.value
        return self._rec("matmul_batched", (a, b), T._matmul(av, bv),
                         lambda g: (g @ np.swapaxes(bv, 2, 3), np.swapaxes(av, 2, 3) @ g))

    def reshape(self, x, dims):
        shp = x.value.shape
        if int(np.prod(dims)) != x.value.size:
            raise ShapeError(f"reshape: cannot view {shp} as {tuple(dims)}")
        return self._rec("reshape", (x,), x.value.reshape(dims), lambda g: (g.reshape(shp),))

    def transpose(self, x):
        return self._rec("transpose_last2", (x,), np.swapaxes(x.value, 2, 3).copy(),
                         lambda g: (np.swapaxes(g, 2, 3),))

    def scale(self, x, c):
        return self._rec("scale", (x,), x.value * c, lambda g: (g * c,))


def _conv2d_backward(x, w, spec, g):
    """Gradients of a (grouped) conv wrt its input and weight."""
    n, _, h, wd = x.shape
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    ho, wo = g.shape[2:]
    grp = spec.groups
    cin_g, cout_g = spec.in_ch // grp, spec.out_ch // grp
    xp = T._pad(x, ph, pw)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for gi in range(grp):
        xs = slice(gi * cin_g, (gi + 1) * cin_g)
        os_ = slice(gi * cout_g, (gi + 1) * cout_g)
        gg = g[:, os_].reshape(n, cout_g, ho * wo)
        cols = T._im2col(xp[:, xs], kh, kw, sh, sw, ho, wo)             # n, cin_g*kh*kw, P
        gw[os_] = np.einsum("nop,nkp->ok", gg, cols).reshape(cout_g, cin_g, kh, kw)
        gcols = np.einsum("ok,nop->nkp", w[os_].reshape(cout_g, -1), gg)
        gcols = gcols.reshape(n, cin_g, kh, kw, ho, wo)
        for dy in range(kh):
            for dx in range(kw):
                gxp[:, xs, dy : dy + (ho - 1) * sh + 1 : sh, dx : dx + (wo - 1) * sw + 1 : sw] += gcols[:, :, dy, dx]
    gx = gxp[:, :, ph : ph + h, pw : pw + wd]
    return gx, gw


def backward(tape: Tape, seed_grad, output: Optional[Var] = None) -> Dict[str, np.ndarray]:
    """Propagate ``seed_grad`` from ``output`` (default: last node) to every leaf."""
    if output is None:
        if not tape.nodes:
            raise ValueError("empty tape")
        output = tape.nodes[-1].output
    seed = np.asarray(seed_grad, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise ShapeError(f"seed gradient dims {seed.shape} differ from output dims {output.value.shape}")
    grads = {output.id: seed}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if gi.shape != inp.value.shape:
                raise ShapeError(f"{node.op}: gradient dims {gi.shape} != value dims {inp.value.shape}")
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    return {name: grads.get(v.id, np.zeros_like(v.value)) for name, v in tape.leaves.items()}


# --------------------------------------------------------------------------
# finite differences


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    passed: bool
    tol: float
    n_checked: int
    worst: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{self.max_rel_err:.3e}\t{self.tol:.0e}\t{self.n_checked}\t{status}"


def sample_inputs(shapes, seed=0, ranges=None):
    """Seeded uniform draws with ReLU6 kink rejection (|x|, |x-6| >= 1e-3)."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shp in shapes.items():
        lo, hi = (ranges or {}).get(name, (-1.0, 1.0))
        a = rng.uniform(lo, hi, shp)
        bad = (np.abs(a) < KINK_MARGIN) | (np.abs(a - 6) < KINK_MARGIN)
        while bad.any():
            a[bad] = rng.uniform(lo, hi, int(bad.sum()))
            bad = (np.abs(a) < KINK_MARGIN) | (np.abs(a - 6) < KINK_MARGIN)
        out[name] = a
    return out


def rel_err(a, n):
    return np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-8)


def fd_gradcheck(fn, input_shapes, seed=0, tol=1e-4, step=1e-5, ranges=None, name="op",
                 inputs=None, fd_dtype=np.longdouble) -> GradcheckReport:
    """Compare 64-bit tape gradients of ``fn`` against central differences.

    ``fn(tape, vars)`` builds the computation from the leaf dict and returns
    the output Var. The scalar being differentiated is ``sum(out * r)`` for
    a seeded random ``r``, which checks the full vector-Jacobian product.

    The finite-difference forwards run in ``fd_dtype`` (extended precision
    where the platform has it): gradients that vanish structurally, such as
    a key bias under softmax, otherwise drown in ~1e-10 rounding noise that
    the 1e-8 relative-error floor cannot absorb.
    """
    values = inputs if inputs is not None else sample_inputs(input_shapes, seed, ranges)

    tape = Tape(values)
    out = fn(tape, tape.leaves)
    r = np.random.default_rng(seed + 1).uniform(-1, 1, out.value.shape)
    grads = backward(tape, r, out)

    values = {k: np.array(v, dtype=fd_dtype) for k, v in values.items()}
    r_fd = r.astype(fd_dtype)

    def loss(vals):
        t = Tape(vals, dtype=fd_dtype)
        return (fn(t, t.leaves).value * r_fd).sum()

    worst, worst_at, count = 0.0, "", 0
    for lname, base in values.items():
        ga = grads[lname]
        if not np.all(np.isfinite(ga)):
            raise GradcheckError(f"{name}: non-finite analytic gradient for {lname}")
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss(values)
            flat[i] = orig - step
            fm = loss(values)
            flat[i] = orig
            num = float((fp - fm) / (2 * np.asarray(step, fd_dtype)))
            if not np.isfinite(num):
                raise GradcheckError(f"{name}: non-finite numeric gradient for {lname}[{i}]")
            e = float(rel_err(ga.reshape(-1)[i], num))
            count += 1
            if e > worst:
                worst, worst_at = e, f"{lname}[{i}] analytic={ga.reshape(-1)[i]:.6e} numeric={num:.6e}"
    return GradcheckReport(name, worst, worst <= tol, tol, count, worst_at)
