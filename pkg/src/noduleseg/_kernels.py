"""Hot loops for the single-output-channel convolutions, jitted with numba.

The math is identical to the numpy strided-view path in net.py, which stays
as the fallback when numba is unavailable; these exist because a 1-channel
head convolution at full resolution is the busiest layer and numpy's
strided-view arithmetic leaves most of the machine idle.
"""

from __future__ import annotations

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - optional accelerator
    numba = None
    HAVE_NUMBA = False


def _conv1_fwd(xp, w, bias, stride, out):
    b_n, c_n = xp.shape[0], xp.shape[1]
    od, oh, ow = out.shape[1:]
    for b in range(b_n):
        for z in range(od):
            for y in range(oh):
                row = out[b, z, y]
                row[:] = bias
                for c in range(c_n):
                    for kz in range(3):
                        for ky in range(3):
                            xrow = xp[b, c, z * stride + kz, y * stride + ky]
                            for kx in range(3):
                                wv = w[c, kz, ky, kx]
                                for x in range(ow):
                                    row[x] += wv * xrow[x * stride + kx]


def _conv1_bwd(xp, w, dy, stride, dxp, dw):
    b_n, c_n = xp.shape[0], xp.shape[1]
    od, oh, ow = dy.shape[1:]
    for b in range(b_n):
        for z in range(od):
            for y in range(oh):
                drow = dy[b, z, y]
                for c in range(c_n):
                    for kz in range(3):
                        for ky in range(3):
                            xrow = xp[b, c, z * stride + kz, y * stride + ky]
                            dxrow = dxp[b, c, z * stride + kz, y * stride + ky]
                            for kx in range(3):
                                wv = w[c, kz, ky, kx]
                                acc = 0.0
                                for x in range(ow):
                                    g = drow[x]
                                    acc += g * xrow[x * stride + kx]
                                    dxrow[x * stride + kx] += wv * g
                                dw[c, kz, ky, kx] += acc


def _vol2col(xp, stride, col):
    """col shape (B, C, 27, oD, oH, oW); xp is the padded input."""
    b_n, c_n = xp.shape[0], xp.shape[1]
    od, oh, ow = col.shape[3:]
    for b in range(b_n):
        for c in range(c_n):
            for kz in range(3):
                for ky in range(3):
                    for kx in range(3):
                        k = kz * 9 + ky * 3 + kx
                        for z in range(od):
                            for y in range(oh):
                                src = xp[b, c, z * stride + kz, y * stride + ky]
                                dst = col[b, c, k, z, y]
                                for x in range(ow):
                                    dst[x] = src[x * stride + kx]


def _col2im(dcol, stride, dxp):
    b_n, c_n = dxp.shape[0], dxp.shape[1]
    od, oh, ow = dcol.shape[3:]
    for b in range(b_n):
        for c in range(c_n):
            for kz in range(3):
                for ky in range(3):
                    for kx in range(3):
                        k = kz * 9 + ky * 3 + kx
                        for z in range(od):
                            for y in range(oh):
                                dst = dxp[b, c, z * stride + kz, y * stride + ky]
                                src = dcol[b, c, k, z, y]
                                for x in range(ow):
                                    dst[x * stride + kx] += src[x]


if HAVE_NUMBA:
    conv1_fwd = numba.njit(cache=True)(_conv1_fwd)
    conv1_bwd = numba.njit(cache=True)(_conv1_bwd)
    vol2col = numba.njit(cache=True)(_vol2col)
    col2im = numba.njit(cache=True)(_col2im)
else:  # pragma: no cover
    conv1_fwd = None
    conv1_bwd = None
    vol2col = None
    col2im = None
