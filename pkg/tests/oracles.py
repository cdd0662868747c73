"""Independent numerical oracles used across the test suite.

These deliberately know nothing about the package's tensor engine: they work
on plain numpy arrays and python callables, so an engine bug cannot leak into
its own verification. Finite differences are central, double precision,
h = 1e-5 unless a test overrides it.

Error metric (frozen): for analytic gradient a and numerical gradient n,

    relerr(a, n) = max|a - n| / (max|n| + 1e-12)

i.e. worst absolute deviation normalized by the gradient's own scale. This is
robust at coordinates where the true gradient is exactly zero (relu, pooling)
where a per-element quotient would blow up on finite-difference noise.
"""

import numpy as np

H_DEFAULT = 1e-5


def relerr(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.max(np.abs(numeric)) + 1e-12
    return float(np.max(np.abs(analytic - numeric)) / scale)


def fd_grad(f, x, h=H_DEFAULT):
    """Full central-difference gradient of scalar f at array x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(x))
        flat[i] = keep - h
        fm = float(f(x))
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def fd_grad_coords(f, x, coords, h=H_DEFAULT):
    """Central differences at selected flat coordinates only.

    For big parameter tensors a full fd_grad is unaffordable; spot-checking
    random coordinates still catches systematically wrong vjps.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.zeros(len(coords), dtype=np.float64)
    for k, i in enumerate(coords):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(x))
        flat[i] = keep - h
        fm = float(f(x))
        flat[i] = keep
        out[k] = (fp - fm) / (2.0 * h)
    return out


def conv2d_ref(x, w, bias, stride, padding):
    """Direct-loop NCHW convolution, the slow-but-obvious reference."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for y in range(Ho):
                for xx in range(Wo):
                    patch = xp[n, :, y * stride:y * stride + kh,
                               xx * stride:xx * stride + kw]
                    out[n, f, y, xx] = np.sum(patch * w[f]) + bias[f]
    return out


def maxpool2d_ref(x, window, stride):
    """Direct-loop NCHW max pooling with first-occurrence argmax."""
    x = np.asarray(x, dtype=np.float64)
    N, C, H, W = x.shape
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out = np.zeros((N, C, Ho, Wo))
    for n in range(N):
        for c in range(C):
            for y in range(Ho):
                for xx in range(Wo):
                    out[n, c, y, xx] = np.max(
                        x[n, c, y * stride:y * stride + window,
                          xx * stride:xx * stride + window])
    return out


def softmax_ref(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_ref(logits, labels):
    p = softmax_ref(logits)
    rows = -np.log(p[np.arange(len(labels)), labels])
    return float(rows.mean())


def pairing_sq_rows_ref(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return (d * d).sum(axis=1)


def guided_mask_ref(r):
    """Brute-force mask: keep exactly ceil(d/2) features, largest r first,
    lowest index first among ties."""
    r = np.asarray(r, dtype=np.float64)
    d = r.size
    keep = (d + 1) // 2
    order = np.lexsort((np.arange(d), -r))  # by -r, then by index
    mask = np.zeros(d)
    mask[order[:keep]] = 1.0
    return mask
