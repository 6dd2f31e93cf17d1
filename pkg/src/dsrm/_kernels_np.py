"""numpy fallback for the hot conv/pool kernels.

Same contracts as the compiled extension in _kernels.pyx: channels-last
float64, valid 3x3 convolution, 2x2 max-pool with floor semantics and
first-wins ties. Convolutions are evaluated as nine shifted GEMMs so the
heavy lifting still lands in BLAS.
"""

import numpy as np


def conv3x3_forward(x, w, b, relu=False):
    """x (B,H,W,Ci), w (3,3,Ci,Co), b (Co) -> (B,H-2,W-2,Co).

    relu=True clamps the output in place (the mask is recoverable as y > 0).
    """
    # windows (B,Ho,Wo,Ci,3,3) against w (3,3,Ci,Co), one GEMM per call
    windows = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
    out = np.tensordot(windows, w, axes=([3, 4, 5], [2, 0, 1]))
    out += b
    if relu:
        np.maximum(out, 0.0, out=out)
    return out


def conv3x3_backward(x, w, dy, want_dx=True):
    """Gradients (dx, dw, db) of conv3x3_forward."""
    bsz, h, wd, ci = x.shape
    co = w.shape[3]
    ho, wo = h - 2, wd - 2
    dy2 = dy.reshape(-1, co)
    windows = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
    dw = np.tensordot(windows, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dy2.sum(axis=0)
    dx = None
    if want_dx:
        dx = np.zeros_like(x)
        for di in range(3):
            for dj in range(3):
                dx[:, di:di + ho, dj:dj + wo, :] += (
                    (dy2 @ w[di, dj].T).reshape(bsz, ho, wo, ci))
    return dx, dw, db


def maxpool2_forward(x):
    """2x2 max-pool, stride 2, floor semantics. Returns (y, winner_index).

    winner_index encodes the in-window argmax as 2*di+dj; ties go to the
    first cell in scan order.
    """
    bsz, h, wd, c = x.shape
    ho, wo = h // 2, wd // 2
    xc = x[:, :ho * 2, :wo * 2, :].reshape(bsz, ho, 2, wo, 2, c)
    corners = xc.transpose(0, 1, 3, 5, 2, 4).reshape(bsz, ho, wo, c, 4)
    idx = corners.argmax(axis=4).astype(np.uint8)
    y = np.take_along_axis(corners, idx[..., None].astype(np.intp), axis=4)[..., 0]
    return y, idx


def maxpool2_backward(idx, dy, h, w, gate=None):
    """Scatter dy back to the pooling winners of an (B,h,w,C) input.

    gate (the relu output tensor) zeroes entries whose winning activation
    was clamped at zero.
    """
    bsz, ho, wo, c = dy.shape
    d4 = np.zeros((bsz, ho, wo, c, 4))
    np.put_along_axis(d4, idx[..., None].astype(np.intp), dy[..., None], axis=4)
    dx = np.zeros((bsz, h, w, c))
    dx[:, :ho * 2, :wo * 2, :] = (
        d4.reshape(bsz, ho, wo, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(bsz, ho * 2, wo * 2, c)
    )
    if gate is not None:
        dx *= gate > 0.0
    return dx
