"""Compiled inner loops: ray marching with analytic backward pass, sparse Adam.

Everything here works on flat arrays so the Python layer stays thin.  The
flattened raw index is ``((t*nh + h)*nw + w)*nd + d``.
"""

import math

import numba as nb
import numpy as np

# the system TBB is often too old for numba; prefer layers that are always usable
nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@nb.njit(cache=True, inline="always")
def _softplus(x):
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


@nb.njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@nb.njit(cache=True, inline="always")
def _axis(c, lo, pitch, n):
    if n == 1:
        return 0, 0, 0.0
    u = (c - lo) / pitch - 0.5
    if u < 0.0:
        u = 0.0
    elif u > n - 1.0:
        u = n - 1.0
    i0 = int(math.floor(u))
    if i0 > n - 2:
        i0 = n - 2
    return i0, i0 + 1, u - i0


@nb.njit(cache=True, inline="always")
def _time(t, nt):
    if nt == 1:
        return 0, 0, 0.0
    if t < 0.0:
        t = 0.0
    elif t > 1.0:
        t = 1.0
    s = t * (nt - 1)
    k0 = int(math.floor(s))
    if k0 > nt - 2:
        k0 = nt - 2
    return k0, k0 + 1, s - k0


@nb.njit(cache=True, inline="always")
def _interp(raw, dims, lo, hi, pitch, outside, k0, k1, ft, x, y, z):
    """Raw value at (x, y, z) for the time pair (k0, k1, ft)."""
    if x < lo[0] or y < lo[1] or z < lo[2] or x > hi[0] or y > hi[1] or z > hi[2]:
        return outside
    nh, nw, nd = dims[1], dims[2], dims[3]
    h0, h1, fh = _axis(x, lo[0], pitch[0], nh)
    w0, w1, fw = _axis(y, lo[1], pitch[1], nw)
    d0, d1, fd = _axis(z, lo[2], pitch[2], nd)
    acc = 0.0
    for ct in range(2):
        wt = ft if ct else 1.0 - ft
        if wt == 0.0:
            continue
        kt = k1 if ct else k0
        for ch in range(2):
            wh = fh if ch else 1.0 - fh
            hh = h1 if ch else h0
            for cw in range(2):
                ww = fw if cw else 1.0 - fw
                wi = w1 if cw else w0
                base = ((kt * nh + hh) * nw + wi) * nd
                acc += wt * wh * ww * ((1.0 - fd) * raw[base + d0] + fd * raw[base + d1])
    return acc


@nb.njit(cache=True, inline="always")
def _scatter(grad, coef, dims, lo, hi, pitch, k0, k1, ft, x, y, z):
    if x < lo[0] or y < lo[1] or z < lo[2] or x > hi[0] or y > hi[1] or z > hi[2]:
        return
    nh, nw, nd = dims[1], dims[2], dims[3]
    h0, h1, fh = _axis(x, lo[0], pitch[0], nh)
    w0, w1, fw = _axis(y, lo[1], pitch[1], nw)
    d0, d1, fd = _axis(z, lo[2], pitch[2], nd)
    for ct in range(2):
        wt = ft if ct else 1.0 - ft
        if wt == 0.0:
            continue
        kt = k1 if ct else k0
        for ch in range(2):
            wh = fh if ch else 1.0 - fh
            hh = h1 if ch else h0
            for cw in range(2):
                ww = fw if cw else 1.0 - fw
                wi = w1 if cw else w0
                base = ((kt * nh + hh) * nw + wi) * nd
                c = coef * wt * wh * ww
                grad[base + d0] += c * (1.0 - fd)
                grad[base + d1] += c * fd


@nb.njit(cache=True, inline="always")
def _masked_out(mask, mdims, lo, inv_mpitch, x, y, z):
    i = int(math.floor((x - lo[0]) * inv_mpitch[0]))
    j = int(math.floor((y - lo[1]) * inv_mpitch[1]))
    k = int(math.floor((z - lo[2]) * inv_mpitch[2]))
    if i < 0 or j < 0 or k < 0 or i >= mdims[0] or j >= mdims[1] or k >= mdims[2]:
        return True
    return mask[(i * mdims[1] + j) * mdims[2] + k] == 0


@nb.njit(cache=True, inline="always")
def segment_count(chord, step):
    if chord <= 0.0:
        return 0
    return max(1, int(math.ceil(chord / step - 1e-9)))


@nb.njit(cache=True)
def _march_range(start, stop, raw, dims, lo, hi, pitch, bias, outside,
                 origins, dirs, tnear, tfar, hit, times, step,
                 mask, mdims, mpitch, use_mask, line_integral,
                 pixels, grad_scale, targets, use_residual, grad, want_grad):
    inv_mpitch = 1.0 / mpitch
    longest = 0
    for r in range(start, stop):
        if hit[r]:
            longest = max(longest, segment_count(tfar[r] - tnear[r], step))
    # forward-pass cache of the samples that were not skipped
    kept = np.empty(longest, np.int64)
    kept_pre = np.empty(longest)
    for r in range(start, stop):
        if not hit[r]:
            pixels[r] = 0.0
            continue
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        k0, k1, ft = _time(times[r], dims[0])
        chord = tfar[r] - tnear[r]
        nseg = segment_count(chord, step)
        last = chord - (nseg - 1) * step
        total = 0.0
        n_kept = 0
        for k in range(nseg):
            delta = step if k < nseg - 1 else last
            tm = tnear[r] + k * step + 0.5 * delta
            x, y, z = ox + tm * dx, oy + tm * dy, oz + tm * dz
            if use_mask and _masked_out(mask, mdims, lo, inv_mpitch, x, y, z):
                continue
            pre = _interp(raw, dims, lo, hi, pitch, outside, k0, k1, ft, x, y, z) + bias
            total += _softplus(pre) * delta
            kept[n_kept] = k
            kept_pre[n_kept] = pre
            n_kept += 1
        if line_integral:
            pixels[r] = total
            dpdl = 1.0
        else:
            pixels[r] = -math.expm1(-total)
            dpdl = math.exp(-total)
        if not want_grad:
            continue
        g = grad_scale[r] * dpdl
        if use_residual:
            g *= pixels[r] - targets[r]
        if g == 0.0:
            continue
        for j in range(n_kept):
            k = kept[j]
            delta = step if k < nseg - 1 else last
            tm = tnear[r] + k * step + 0.5 * delta
            x, y, z = ox + tm * dx, oy + tm * dy, oz + tm * dz
            _scatter(grad, g * delta * _sigmoid(kept_pre[j]), dims, lo, hi, pitch, k0, k1, ft, x, y, z)


@nb.njit(cache=True)
def march(raw, dims, lo, hi, pitch, bias, outside, origins, dirs, tnear, tfar, hit, times,
          step, mask, mdims, mpitch, use_mask, line_integral, pixels, grad_scale, targets,
          use_residual, grad, want_grad):
    _march_range(0, len(tnear), raw, dims, lo, hi, pitch, bias, outside, origins, dirs, tnear,
                 tfar, hit, times, step, mask, mdims, mpitch, use_mask, line_integral, pixels,
                 grad_scale, targets, use_residual, grad, want_grad)


@nb.njit(cache=True, parallel=True)
def march_chunked(raw, dims, lo, hi, pitch, bias, outside, origins, dirs, tnear, tfar, hit, times,
                  step, mask, mdims, mpitch, use_mask, line_integral, pixels, grad_scale, targets,
                  use_residual, grads, want_grad):
    """Rays split into ``grads.shape[0]`` contiguous chunks, one gradient buffer each."""
    n = len(tnear)
    nchunks = grads.shape[0]
    for c in nb.prange(nchunks):
        start = (n * c) // nchunks
        stop = (n * (c + 1)) // nchunks
        _march_range(start, stop, raw, dims, lo, hi, pitch, bias, outside, origins, dirs, tnear,
                     tfar, hit, times, step, mask, mdims, mpitch, use_mask, line_integral, pixels,
                     grad_scale, targets, use_residual, grads[c], want_grad)


@nb.njit(cache=True)
def adam_sparse(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2):
    """In-place Adam step restricted to entries with a nonzero gradient."""
    n_updated = 0
    for i in range(param.size):
        g = grad[i]
        if g == 0.0:
            continue
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        param[i] -= lr * (m[i] / bias1) / (math.sqrt(v[i] / bias2) + eps)
        n_updated += 1
    return n_updated
