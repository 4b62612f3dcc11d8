"""Modified Bessel function of the second kind, order zero."""

import numpy as np

EULER_GAMMA = 0.57721566490153286061

_SERIES_TERMS = 30
_NODE_INDEX = np.arange(0, 28, dtype=np.float64)


def _k0_small(x: np.ndarray) -> np.ndarray:
    # Ascending series: K0 = -(ln(x/2) + gamma) I0(x) + sum_k (x^2/4)^k / (k!)^2 * H_k
    y = 0.25 * x * x
    term = np.ones_like(x)
    i0 = np.ones_like(x)
    tail = np.zeros_like(x)
    harmonic = 0.0
    for k in range(1, _SERIES_TERMS):
        term = term * y / (k * k)
        harmonic += 1.0 / k
        i0 += term
        tail += term * harmonic
    return -(np.log(0.5 * x) + EULER_GAMMA) * i0 + tail


def _k0_large(x: np.ndarray) -> np.ndarray:
    # K0(x) = int_0^inf exp(-x cosh t) dt.  The integrand is analytic and even, so
    # the trapezoid rule converges geometrically; the step shrinks like
    # 1/sqrt(x) to resolve the peak of width ~1/sqrt(x).
    h = np.minimum(0.25, 0.6 / np.sqrt(x))
    t = h[:, None] * _NODE_INDEX[None, :]
    f = np.exp(-x[:, None] * (np.cosh(t) - 1.0))
    scaled = h * (f.sum(axis=1) - 0.5 * f[:, 0])
    return np.exp(-x) * scaled


def k0(x):
    """K0(x) for ``x > 0``; accepts scalars or arrays.

    Absolute error is below 1e-14 on ``[1e-6, 50]``.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError("K0 is defined for x > 0 only")
    flat = arr.ravel()
    out = np.empty_like(flat)
    small = flat <= 2.0
    if small.any():
        out[small] = _k0_small(flat[small])
    if (~small).any():
        out[~small] = _k0_large(flat[~small])
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


bessel_k0 = k0
