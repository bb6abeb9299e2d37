"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: nested loops, explicit multiply
counters, and finite differences. None of it shares code with the package
under test, so agreement between the two is evidence, not tautology.
"""

from __future__ import annotations

import numpy as np


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int):
    """Direct six-loop cross-correlation.

    Returns (output, multiply_count). The counter increments once per
    kernel-times-input multiply, which is the MAdds convention the analytic
    cost model must match exactly.
    """
    batch, in_c, h, w = x.shape
    out_c, _, kh, kw = kernel.shape
    if padding > 0:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, out_c, out_h, out_w))
    mults = 0
    for b in range(batch):
        for o in range(out_c):
            for i in range(out_h):
                for j in range(out_w):
                    acc = 0.0
                    for c in range(in_c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[b, c, i * stride + ki, j * stride + kj] * kernel[o, c, ki, kj]
                                mults += 1
                    out[b, o, i, j] = acc
    return out, mults


def linear_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None):
    """Naive matrix multiply with a multiply counter (bias adds uncounted)."""
    b, f = x.shape
    _, o = weight.shape
    out = np.zeros((b, o))
    mults = 0
    for i in range(b):
        for j in range(o):
            acc = 0.0
            for k in range(f):
                acc += x[i, k] * weight[k, j]
                mults += 1
            out[i, j] = acc
    if bias is not None:
        out = out + bias[None, :]
    return out, mults


def synthesis_reference(coeff_rows: np.ndarray, kernel_banks):
    """Blend per-layer kernel banks with dense coefficient rows.

    ``kernel_banks`` is a list (one entry per coefficient row) of lists of
    equal-shaped kernels. Returns (blended kernels, multiply_count), counting
    one multiply per coefficient-times-parameter product with no sparsity
    shortcuts.
    """
    blended = []
    mults = 0
    for r, bank in enumerate(kernel_banks):
        acc = np.zeros_like(bank[0])
        for n, kern in enumerate(bank):
            flat = kern.reshape(-1)
            scaled = np.empty_like(flat)
            for p in range(flat.shape[0]):
                scaled[p] = coeff_rows[r, n] * flat[p]
                mults += 1
            acc += scaled.reshape(kern.shape)
        blended.append(acc)
    return blended, mults


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.shape[0]):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_mismatch(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / (1 + |n|), a scale-aware relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (1.0 + np.abs(n))))
