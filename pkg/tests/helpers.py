"""Shared test oracles: finite differences and brute-force reference ops."""

from __future__ import annotations

import numpy as np

from edic.tensor import Tensor


def fd_gradcheck(make_loss, params, rng, h=1e-4, rtol=1e-4, samples=12):
    """Compare analytic gradients of a scalar loss against central differences.

    `make_loss()` rebuilds the loss Tensor from the current `params` data
    (so perturbations are visible).  For each parameter a random subset of
    coordinates is probed.  Returns the worst relative error seen.
    """
    for p in params:
        p.grad = None
    loss = make_loss()
    loss.backward()
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.size
        idx = range(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = make_loss().item()
            flat[i] = orig - h
            lm = make_loss().item()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            ana = gflat[i]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            worst = max(worst, rel)
            assert rel < rtol, (
                f"gradient mismatch at coord {i}: analytic={ana!r} fd={num!r} rel={rel:.3g}"
            )
    return worst


def conv2d_direct(x, kernel, bias=None, stride=1, pad=0):
    """Brute-force convolution sum, nested loops, for small shapes only."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ci, i * stride + u, j * stride + v] * kernel[co, ci, u, v]
                    out[bi, co, i, j] = acc + (bias[co] if bias is not None else 0.0)
    return out


def matmul_direct(x, w):
    """Triple-loop (B, Cin) @ (Cout, Cin)^T."""
    b, cin = x.shape
    cout = w.shape[0]
    out = np.zeros((b, cout))
    for bi in range(b):
        for co in range(cout):
            for ci in range(cin):
                out[bi, co] += x[bi, ci] * w[co, ci]
    return out


def leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
