"""Independent reference implementations used as test oracles only:
straightforward float64 forward passes (deliberately unoptimized loops,
no im2col/gemm machinery) and a dense-grid trapezoid integrator for the
mixture martingale."""

import numpy as np


def log_mix_trapezoid(p_window, steps=10**6):
    """Trapezoid-rule mixture martingale on a uniform grid, shifted log domain."""
    p = np.asarray(p_window, dtype=np.float64)
    k = p.size
    total = np.sum(np.log(p))
    eps = np.linspace(0.0, 1.0, steps + 1)
    with np.errstate(divide="ignore"):
        g = k * np.log(np.maximum(eps, 1e-320)) + (eps - 1.0) * total
    g[0] = -np.inf
    shift = g[np.isfinite(g)].max()
    f = np.where(np.isfinite(g), np.exp(g - shift), 0.0)
    return shift + np.log(np.trapezoid(f, eps))


def naive_conv2d(x, w, b, stride, pad):
    n, ic, h, width = x.shape
    oc, _, k, _ = w.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (width + 2 * pad - k) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = w.astype(np.float64)
    out = np.zeros((n, oc, oh, ow))
    for ni in range(n):
        for oi in range(oc):
            for yy in range(oh):
                for xx in range(ow):
                    patch = xp[ni, :, yy * stride:yy * stride + k,
                               xx * stride:xx * stride + k]
                    out[ni, oi, yy, xx] = np.sum(patch * w[oi]) + b[oi]
    return out


def naive_conv_transpose2d(x, w, b, stride, pad):
    n, ic, ih, iw = x.shape
    _, oc, k, _ = w.shape
    oh = (ih - 1) * stride - 2 * pad + k
    ow = (iw - 1) * stride - 2 * pad + k
    x = x.astype(np.float64)
    w = w.astype(np.float64)
    full = np.zeros((n, oc, oh + 2 * pad, ow + 2 * pad))
    for ni in range(n):
        for ci in range(ic):
            for yy in range(ih):
                for xx in range(iw):
                    full[ni, :, yy * stride:yy * stride + k,
                         xx * stride:xx * stride + k] += w[ci] * x[ni, ci, yy, xx]
    out = full[:, :, pad:pad + oh, pad:pad + ow] if pad else full
    return out + np.asarray(b, dtype=np.float64)[None, :, None, None]


def naive_encode(weights, flow):
    """Reference encoder: returns (mu, logvar, last_conv_activations)."""
    arch = weights.arch
    t = {k: v.astype(np.float64) for k, v in weights.tensors.items()}
    h = flow.astype(np.float64)[None]
    for i in range(4):
        h = naive_conv2d(h, t[f"enc{i}_w"], t[f"enc{i}_b"], arch.stride, arch.padding)
        h = np.maximum(h, 0.0)
    acts = h[0]
    flat = h.reshape(1, -1)
    mu = flat @ t["mu_w"].T + t["mu_b"]
    logvar = np.clip(flat @ t["logvar_w"].T + t["logvar_b"], -10.0, 10.0)
    return mu[0], logvar[0], acts


def naive_decode(weights, z):
    """Reference decoder: returns the (2, S, S) reconstruction."""
    arch = weights.arch
    t = {k: v.astype(np.float64) for k, v in weights.tensors.items()}
    h = np.maximum(np.asarray(z, dtype=np.float64)[None] @ t["dec_w"].T + t["dec_b"], 0.0)
    h = h.reshape(1, arch.conv_channels[-1], arch.grid_size, arch.grid_size)
    for i in range(4):
        h = naive_conv_transpose2d(h, t[f"tdec{i}_w"], t[f"tdec{i}_b"],
                                   arch.stride, arch.padding)
        if i < 3:
            h = np.maximum(h, 0.0)
    return h[0]
