"""Hot inner loops for the tensor engine.

Everything here is layout-specific (NHWC) and shape-dumb on purpose: the
callers own validation. Each kernel has a numba-jitted variant and a plain
numpy fallback so the package still works (slowly) without numba. The two
variants agree to float rounding; col2im accumulation order differs between
them, so cross-variant comparisons are allclose, not bitwise.

This box is single-core and RAM-bandwidth-bound (~12 GB/s), so the shape of
these loops matters more than their flop count. Conv im2col/col2im run in
small batch chunks that stay cache-resident; see tensor.py.
"""

import ctypes
import sys

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on minimal installs
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


_HUGEPAGE = 2 * 1024 * 1024


def tune_allocator():
    """Keep big numpy buffers on the heap instead of mmap-churning them.

    Attack loops allocate ~30 MB of short-lived arrays per iteration; with
    glibc defaults those round-trip through mmap/munmap and every iteration
    pays page faults. Raising the thresholds makes free() keep the pages.
    Best effort: silently does nothing off glibc.
    """
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


def advise_hugepages(arr):
    """madvise(MADV_HUGEPAGE) the 2MB-aligned body of a large array."""
    if not sys.platform.startswith("linux") or arr.nbytes < 2 * _HUGEPAGE:
        return arr
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        addr = arr.ctypes.data
        start = (addr + _HUGEPAGE - 1) & ~(_HUGEPAGE - 1)
        length = arr.nbytes - (start - addr)
        if length >= _HUGEPAGE:
            libc.madvise(ctypes.c_void_p(start), ctypes.c_size_t(length), 14)
    except OSError:
        pass
    return arr


# ---------------------------------------------------------------- conv packing

@njit(cache=True)
def _im2col_chunk_jit(xp, cols, b0, kh, kw, stride):
    nb = cols.shape[0]
    Ho = cols.shape[1]
    Wo = cols.shape[2]
    C = xp.shape[3]
    for bb in range(nb):
        b = b0 + bb
        for y in range(Ho):
            for x in range(Wo):
                ys = y * stride
                xs = x * stride
                for i in range(kh):
                    for j in range(kw):
                        for c in range(C):
                            cols[bb, y, x, i, j, c] = xp[b, ys + i, xs + j, c]


def _im2col_chunk_np(xp, cols, b0, kh, kw, stride):
    nb, Ho, Wo = cols.shape[0], cols.shape[1], cols.shape[2]
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[
                b0:b0 + nb,
                i:i + (Ho - 1) * stride + 1:stride,
                j:j + (Wo - 1) * stride + 1:stride,
                :,
            ]


@njit(cache=True)
def _col2im_chunk_jit(dcols, dxp, b0, kh, kw, stride):
    nb = dcols.shape[0]
    Ho = dcols.shape[1]
    Wo = dcols.shape[2]
    C = dcols.shape[5]
    for bb in range(nb):
        b = b0 + bb
        for y in range(Ho):
            for x in range(Wo):
                ys = y * stride
                xs = x * stride
                for i in range(kh):
                    for j in range(kw):
                        for c in range(C):
                            dxp[b, ys + i, xs + j, c] += dcols[bb, y, x, i, j, c]


def _col2im_chunk_np(dcols, dxp, b0, kh, kw, stride):
    nb, Ho, Wo = dcols.shape[0], dcols.shape[1], dcols.shape[2]
    for i in range(kh):
        for j in range(kw):
            dxp[
                b0:b0 + nb,
                i:i + (Ho - 1) * stride + 1:stride,
                j:j + (Wo - 1) * stride + 1:stride,
                :,
            ] += dcols[:, :, :, i, j, :]


@njit(cache=True)
def _im2col_t1_jit(xs, colsT, kh, kw, stride):
    # single-channel fast path, columns stored transposed: [kh*kw, B, Ho, Wo]
    B = xs.shape[0]
    Ho = colsT.shape[2]
    Wo = colsT.shape[3]
    for i in range(kh):
        for j in range(kw):
            k = i * kw + j
            for b in range(B):
                for y in range(Ho):
                    ys = y * stride + i
                    for x in range(Wo):
                        colsT[k, b, y, x] = xs[b, ys, x * stride + j]


def _im2col_t1_np(xs, colsT, kh, kw, stride):
    Ho, Wo = colsT.shape[2], colsT.shape[3]
    for i in range(kh):
        for j in range(kw):
            colsT[i * kw + j] = xs[
                :,
                i:i + (Ho - 1) * stride + 1:stride,
                j:j + (Wo - 1) * stride + 1:stride,
            ]


@njit(cache=True)
def _col2im_t1_jit(dcolsT, dxs, kh, kw, stride):
    B = dxs.shape[0]
    Ho = dcolsT.shape[2]
    Wo = dcolsT.shape[3]
    dxs[:] = 0.0
    for i in range(kh):
        for j in range(kw):
            k = i * kw + j
            for b in range(B):
                for y in range(Ho):
                    ys = y * stride + i
                    for x in range(Wo):
                        dxs[b, ys, x * stride + j] += dcolsT[k, b, y, x]


def _col2im_t1_np(dcolsT, dxs, kh, kw, stride):
    dxs[:] = 0.0
    Ho, Wo = dcolsT.shape[2], dcolsT.shape[3]
    for i in range(kh):
        for j in range(kw):
            dxs[
                :,
                i:i + (Ho - 1) * stride + 1:stride,
                j:j + (Wo - 1) * stride + 1:stride,
            ] += dcolsT[i * kw + j]


# ------------------------------------------------------------------ pointwise

@njit(cache=True)
def _relu_fwd_jit(z, out):
    zf = z.ravel()
    of = out.ravel()
    for i in range(zf.size):
        v = zf[i]
        of[i] = v if v > 0.0 else 0.0


def _relu_fwd_np(z, out):
    np.maximum(z, 0.0, out=out)


@njit(cache=True)
def _relu_bwd_jit(z, dout, dz):
    zf = z.ravel()
    df = dout.ravel()
    gf = dz.ravel()
    for i in range(zf.size):
        gf[i] = df[i] if zf[i] > 0.0 else 0.0


def _relu_bwd_np(z, dout, dz):
    np.multiply(dout, z > 0.0, out=dz)


# -------------------------------------------------------------------- pooling

@njit(cache=True)
def _relu_maxpool2_jit(z, out, idx):
    # fused max(relu) over 2x2/2 windows; idx 0..3 = winner, 4 = all inputs <= 0
    B, H, W, C = z.shape
    Ho = H // 2
    Wo = W // 2
    for b in range(B):
        for y in range(Ho):
            for x in range(Wo):
                for c in range(C):
                    best = 0.0
                    k = 4
                    v = z[b, 2 * y, 2 * x, c]
                    if v > best:
                        best = v
                        k = 0
                    v = z[b, 2 * y, 2 * x + 1, c]
                    if v > best:
                        best = v
                        k = 1
                    v = z[b, 2 * y + 1, 2 * x, c]
                    if v > best:
                        best = v
                        k = 2
                    v = z[b, 2 * y + 1, 2 * x + 1, c]
                    if v > best:
                        best = v
                        k = 3
                    out[b, y, x, c] = best
                    idx[b, y, x, c] = k


def _relu_maxpool2_np(z, out, idx):
    B, H, W, C = z.shape
    w = z.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
    w = np.ascontiguousarray(w).reshape(B, H // 2, W // 2, 4, C)
    am = w.argmax(axis=3)  # first occurrence on ties, same as the jit scan
    best = np.take_along_axis(w, am[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    idx[:] = np.where(best > 0, am, 4).astype(idx.dtype)
    np.maximum(best, 0.0, out=out)


@njit(cache=True)
def _relu_maxpool2_bwd_jit(dout, idx, dz):
    B, Ho, Wo, C = dout.shape
    for b in range(B):
        for y in range(Ho):
            for x in range(Wo):
                for c in range(C):
                    k = idx[b, y, x, c]
                    g = dout[b, y, x, c]
                    dz[b, 2 * y, 2 * x, c] = g if k == 0 else 0.0
                    dz[b, 2 * y, 2 * x + 1, c] = g if k == 1 else 0.0
                    dz[b, 2 * y + 1, 2 * x, c] = g if k == 2 else 0.0
                    dz[b, 2 * y + 1, 2 * x + 1, c] = g if k == 3 else 0.0


def _relu_maxpool2_bwd_np(dout, idx, dz):
    B, Ho, Wo, C = dout.shape
    dz[:] = 0.0
    dw = dz.reshape(B, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 2, 4, 5)
    dw = dw.reshape(B, Ho, Wo, 4, C)
    sel = idx[:, :, :, None, :] == np.arange(4)[None, None, None, :, None]
    dw[:] = np.where(sel, dout[:, :, :, None, :], 0.0)


@njit(cache=True)
def _maxpool_jit(x, out, idx, win, stride):
    B, H, W, C = x.shape
    Ho = out.shape[1]
    Wo = out.shape[2]
    for b in range(B):
        for y in range(Ho):
            for x0 in range(Wo):
                for c in range(C):
                    best = x[b, y * stride, x0 * stride, c]
                    k = 0
                    for i in range(win):
                        for j in range(win):
                            v = x[b, y * stride + i, x0 * stride + j, c]
                            if v > best:
                                best = v
                                k = i * win + j
                    out[b, y, x0, c] = best
                    idx[b, y, x0, c] = k


def _maxpool_np(x, out, idx, win, stride):
    B = x.shape[0]
    C = x.shape[3]
    Ho, Wo = out.shape[1], out.shape[2]
    stacked = np.empty((Ho, Wo, win * win, B, C), x.dtype)
    for i in range(win):
        for j in range(win):
            sl = x[:, i:i + (Ho - 1) * stride + 1:stride,
                   j:j + (Wo - 1) * stride + 1:stride, :]
            stacked[:, :, i * win + j] = sl.transpose(1, 2, 0, 3)
    am = stacked.argmax(axis=2)
    best = np.take_along_axis(stacked, am[:, :, None], axis=2)[:, :, 0]
    out[:] = best.transpose(2, 0, 1, 3)
    idx[:] = am.transpose(2, 0, 1, 3).astype(idx.dtype)


@njit(cache=True)
def _maxpool_bwd_jit(dout, idx, dx, win, stride):
    B, Ho, Wo, C = dout.shape
    dx[:] = 0.0
    for b in range(B):
        for y in range(Ho):
            for x0 in range(Wo):
                for c in range(C):
                    k = idx[b, y, x0, c]
                    i = k // win
                    j = k - i * win
                    dx[b, y * stride + i, x0 * stride + j, c] += dout[b, y, x0, c]


def _maxpool_bwd_np(dout, idx, dx, win, stride):
    B, Ho, Wo, C = dout.shape
    dx[:] = 0.0
    ii = idx // win
    jj = idx - ii * win
    bb, yy, xx, cc = np.indices((B, Ho, Wo, C), sparse=False)
    np.add.at(dx, (bb, yy * stride + ii, xx * stride + jj, cc), dout)


if HAVE_NUMBA:
    im2col_chunk = _im2col_chunk_jit
    col2im_chunk = _col2im_chunk_jit
    im2col_t1 = _im2col_t1_jit
    col2im_t1 = _col2im_t1_jit
    relu_fwd = _relu_fwd_jit
    relu_bwd = _relu_bwd_jit
    relu_maxpool2 = _relu_maxpool2_jit
    relu_maxpool2_bwd = _relu_maxpool2_bwd_jit
    maxpool = _maxpool_jit
    maxpool_bwd = _maxpool_bwd_jit
else:  # pragma: no cover
    im2col_chunk = _im2col_chunk_np
    col2im_chunk = _col2im_chunk_np
    im2col_t1 = _im2col_t1_np
    col2im_t1 = _col2im_t1_np
    relu_fwd = _relu_fwd_np
    relu_bwd = _relu_bwd_np
    relu_maxpool2 = _relu_maxpool2_np
    relu_maxpool2_bwd = _relu_maxpool2_bwd_np
    maxpool = _maxpool_np
    maxpool_bwd = _maxpool_bwd_np

tune_allocator()
