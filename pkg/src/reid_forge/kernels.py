"""Convolution kernels with two interchangeable backends.

The accelerated path compiles explicit loops with numba; the fallback is a
pure-numpy im2col formulation. The active backend is chosen once at import
from the REID_FORGE_BACKEND environment variable ("numba" or "numpy",
default "numba" when available) and can be overridden with set_backend.
Everything outside conv2d stays plain numpy regardless of backend.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, ShapeError

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install-time choice
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


def _check_conv_args(x, w, b, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.ndim}-d and {w.ndim}-d")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    h_out = (x.shape[2] + 2 * padding - w.shape[2]) // stride + 1
    w_out = (x.shape[3] + 2 * padding - w.shape[3]) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("kernel larger than padded input")
    return h_out, w_out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int):
    """View the padded input as (B, C, KH, KW, Hout, Wout) patches."""
    bs, cs, hs, ws = xp.strides
    shape = (xp.shape[0], xp.shape[1], kh, kw, h_out, w_out)
    strides = (bs, cs, hs, ws, hs * stride, ws * stride)
    return as_strided(xp, shape=shape, strides=strides)


def conv2d_forward_numpy(x, w, b, stride, padding):
    h_out, w_out = _check_conv_args(x, w, b, stride, padding)
    batch, _, _, _ = x.shape
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    cols = cols.reshape(batch, c_in * kh * kw, h_out * w_out)
    out = np.einsum("oc,bcp->bop", w.reshape(c_out, -1), cols, optimize=True)
    out = out.reshape(batch, c_out, h_out, w_out) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_numpy(x, w, grad_out, stride, padding):
    batch, c_in, h, wid = x.shape
    c_out, _, kh, kw = w.shape
    _, _, h_out, w_out = grad_out.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    cols = cols.reshape(batch, c_in * kh * kw, h_out * w_out)
    go = grad_out.reshape(batch, c_out, h_out * w_out)

    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.einsum("bop,bcp->oc", go, cols, optimize=True).reshape(w.shape)

    # Scatter w^T @ grad_out back through the patch layout (col2im).
    gcols = np.einsum("oc,bop->bcp", w.reshape(c_out, -1), go, optimize=True)
    gcols = gcols.reshape(batch, c_in, kh, kw, h_out, w_out)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + h_out * stride : stride, j : j + w_out * stride : stride] += gcols[
                :, :, i, j
            ]
    grad_x = gxp[:, :, padding : padding + h, padding : padding + wid]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


@njit(cache=True)
def _conv2d_forward_loops(xp, w, b, stride, h_out, w_out, out):  # pragma: no cover
    # Kernel-position-outer ordering: the innermost loop walks one output
    # row with a hoisted scalar weight, which LLVM can vectorize.
    batch = xp.shape[0]
    c_out, c_in, kh, kw = w.shape
    for n in range(batch):
        for co in range(c_out):
            o = out[n, co]
            for oh in range(h_out):
                for ow in range(w_out):
                    o[oh, ow] = b[co]
            for ci in range(c_in):
                xc = xp[n, ci]
                wc = w[co, ci]
                for i in range(kh):
                    for j in range(kw):
                        wv = wc[i, j]
                        for oh in range(h_out):
                            xr = xc[oh * stride + i]
                            orow = o[oh]
                            for ow in range(w_out):
                                orow[ow] += wv * xr[ow * stride + j]


@njit(cache=True)
def _conv2d_backward_loops(xp, w, go, stride, gxp, gw, gb):  # pragma: no cover
    # Accumulation order is fixed (no parallel reductions), so reruns are
    # bit-identical. Row-wise inner loops with hoisted scalars as above.
    batch = xp.shape[0]
    c_out, c_in, kh, kw = w.shape
    h_out = go.shape[2]
    w_out = go.shape[3]
    for n in range(batch):
        for co in range(c_out):
            gon = go[n, co]
            for ci in range(c_in):
                gxc = gxp[n, ci]
                wc = w[co, ci]
                for i in range(kh):
                    for j in range(kw):
                        wv = wc[i, j]
                        for oh in range(h_out):
                            grow = gon[oh]
                            gxr = gxc[oh * stride + i]
                            for ow in range(w_out):
                                gxr[ow * stride + j] += wv * grow[ow]
    for co in range(c_out):
        acc_b = 0.0
        for n in range(batch):
            gon = go[n, co]
            for oh in range(h_out):
                for ow in range(w_out):
                    acc_b += gon[oh, ow]
        gb[co] = acc_b
    for n in range(batch):
        for co in range(c_out):
            gon = go[n, co]
            for ci in range(c_in):
                xc = xp[n, ci]
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        for oh in range(h_out):
                            grow = gon[oh]
                            xr = xc[oh * stride + i]
                            for ow in range(w_out):
                                acc += grow[ow] * xr[ow * stride + j]
                        gw[co, ci, i, j] += acc


def conv2d_forward_numba(x, w, b, stride, padding):
    h_out, w_out = _check_conv_args(x, w, b, stride, padding)
    xp = np.ascontiguousarray(
        np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    )
    out = np.empty((x.shape[0], w.shape[0], h_out, w_out), dtype=np.float64)
    _conv2d_forward_loops(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, h_out, w_out, out)
    return out


def conv2d_backward_numba(x, w, grad_out, stride, padding):
    batch, c_in, h, wid = x.shape
    xp = np.ascontiguousarray(
        np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    )
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gb = np.zeros(w.shape[0], dtype=np.float64)
    _conv2d_backward_loops(
        xp, np.ascontiguousarray(w), np.ascontiguousarray(grad_out), stride, gxp, gw, gb
    )
    grad_x = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wid])
    return grad_x, gw, gb


_VALID_BACKENDS = ("numba", "numpy")
_backend = None


def set_backend(name: str) -> None:
    """Select the conv2d implementation: "numba" or "numpy"."""
    global _backend
    if name not in _VALID_BACKENDS:
        raise ConfigurationError(f"unknown backend {name!r}, expected one of {_VALID_BACKENDS}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ConfigurationError("numba backend requested but numba is not installed")
    _backend = name


def get_backend() -> str:
    return _backend


def conv2d_forward(x, w, b, stride=1, padding=0):
    if _backend == "numba":
        return conv2d_forward_numba(x, w, b, stride, padding)
    return conv2d_forward_numpy(x, w, b, stride, padding)


def conv2d_backward(x, w, grad_out, stride=1, padding=0):
    if _backend == "numba":
        return conv2d_backward_numba(x, w, grad_out, stride, padding)
    return conv2d_backward_numpy(x, w, grad_out, stride, padding)


_env_choice = os.environ.get("REID_FORGE_BACKEND", "").strip().lower()
if _env_choice:
    set_backend(_env_choice)
else:
    set_backend("numba" if _HAVE_NUMBA else "numpy")
