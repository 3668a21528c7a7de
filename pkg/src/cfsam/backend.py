"""Convolution kernel backend selection.

Two interchangeable implementations of the 2-D convolution hot loops:

* ``ext`` — the compiled Cython extension ``cfsam._ckernels``
* ``numpy`` — an im2col formulation on top of BLAS matmul

The active backend is chosen at import time: the extension when it built
successfully, the numpy fallback otherwise. ``CFSAM_BACKEND=numpy|ext``
overrides the choice (useful for the benchmark and for parity tests).

Both backends implement the same contract on HWC-layout arrays:
``forward(x, w, b, padding, stride)`` and
``backward(x, w, dout, padding, stride) -> (dx, dw, db)``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from cfsam import _ckernels

    _HAVE_EXT = True
except ImportError:
    _ckernels = None
    _HAVE_EXT = False


def _out_dim(n: int, k: int, padding: int, stride: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# -- numpy fallback ----------------------------------------------------------


def _im2col(x: np.ndarray, k: int, padding: int, stride: int) -> np.ndarray:
    """Unfold an H×W×Ci array into (Ho·Wo, k·k·Ci) patch columns."""
    H, W, Ci = x.shape
    Ho = _out_dim(H, k, padding, stride)
    Wo = _out_dim(W, k, padding, stride)
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    # windows: (Ho', Wo', Ci, k, k) -> strided view, then stride subsample
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]
    # reorder to (Ho, Wo, k, k, Ci) to match the k×k×Ci×Co kernel layout
    cols = win.transpose(0, 1, 3, 4, 2).reshape(Ho * Wo, k * k * Ci)
    return np.ascontiguousarray(cols)


def _np_forward(x, w, b, padding, stride):
    k = w.shape[0]
    Co = w.shape[3]
    H, W, _ = x.shape
    Ho = _out_dim(H, k, padding, stride)
    Wo = _out_dim(W, k, padding, stride)
    cols = _im2col(x, k, padding, stride)
    out = cols @ w.reshape(-1, Co) + b
    return out.reshape(Ho, Wo, Co)


def _np_backward(x, w, dout, padding, stride):
    k = w.shape[0]
    H, W, Ci = x.shape
    Ho, Wo, Co = dout.shape
    dout2 = dout.reshape(Ho * Wo, Co)

    cols = _im2col(x, k, padding, stride)
    dw = (cols.T @ dout2).reshape(w.shape)
    db = dout2.sum(axis=0)

    dcols = (dout2 @ w.reshape(-1, Co).T).reshape(Ho, Wo, k, k, Ci)
    dxp = np.zeros((H + 2 * padding, W + 2 * padding, Ci), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += dcols[
                :, :, di, dj, :
            ]
    if padding:
        dxp = dxp[padding : padding + H, padding : padding + W]
    return dxp, dw, db


# -- compiled extension ------------------------------------------------------


def _ext_forward(x, w, b, padding, stride):
    return _ckernels.conv2d_forward(x, w, b, padding, stride)


def _ext_backward(x, w, dout, padding, stride):
    H, W, _ = x.shape
    dx = _ckernels.conv2d_backward_input(w, np.ascontiguousarray(dout), H, W, padding, stride)
    dw = _ckernels.conv2d_backward_kernel(x, np.ascontiguousarray(dout), w.shape[0], padding, stride)
    db = dout.sum(axis=(0, 1))
    return dx, dw, db


_BACKENDS = {
    "numpy": (_np_forward, _np_backward),
    "ext": (_ext_forward, _ext_backward),
}


def available_backends() -> list[str]:
    return ["numpy", "ext"] if _HAVE_EXT else ["numpy"]


def get_backend(name: str):
    """Return (forward, backward) for an explicitly named backend."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "ext" and not _HAVE_EXT:
        raise RuntimeError("compiled extension cfsam._ckernels is not available")
    return _BACKENDS[name]


_requested = os.environ.get("CFSAM_BACKEND", "auto")
if _requested == "auto":
    ACTIVE_BACKEND = "ext" if _HAVE_EXT else "numpy"
else:
    if _requested == "ext" and not _HAVE_EXT:
        raise RuntimeError("CFSAM_BACKEND=ext but cfsam._ckernels failed to import")
    ACTIVE_BACKEND = _requested

conv2d_forward, conv2d_backward = _BACKENDS[ACTIVE_BACKEND]
