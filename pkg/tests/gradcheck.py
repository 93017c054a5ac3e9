"""Finite-difference gradient checking helpers shared by the test modules."""

import numpy as np

import perfnet.tensor as tc


def analytic_grads(forward, tensors):
    """Run forward() once on a fresh tape and return each tensor's gradient."""
    tc.clear_tape()
    for t in tensors:
        t.grad = None
    loss = forward()
    tc.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data)
            for t in tensors]


def fd_grads(forward, tensors, h_scale=1e-5, sample=None, rng=None):
    """Central-difference gradients of forward() wrt each tensor.

    Mutates tensor data in place and restores it. With ``sample`` set, only
    that many randomly chosen components per tensor are evaluated; the rest
    stay NaN so callers can mask them out.
    """
    grads = []
    with tc.no_grad():
        for t in tensors:
            flat = t.data.reshape(-1)
            g = np.full(flat.size, np.nan)
            if sample is not None and sample < flat.size:
                idx = rng.choice(flat.size, size=sample, replace=False)
            else:
                idx = range(flat.size)
            for i in idx:
                orig = flat[i]
                h = h_scale * max(1.0, abs(orig))
                flat[i] = orig + h
                fp = forward().item()
                flat[i] = orig - h
                fm = forward().item()
                flat[i] = orig
                g[i] = (fp - fm) / (2.0 * h)
            grads.append(g.reshape(t.data.shape))
    return grads


def assert_grads_match(forward, tensors, rtol=1e-4, atol=1e-8,
                       h_scale=1e-5, sample=None, rng=None):
    ana = analytic_grads(forward, tensors)
    num = fd_grads(forward, tensors, h_scale=h_scale, sample=sample, rng=rng)
    for a, n in zip(ana, num):
        mask = ~np.isnan(n)
        np.testing.assert_allclose(a[mask], n[mask], rtol=rtol, atol=atol)


def naive_conv1d(x, w, b, stride=1, pad=0):
    """Direct triple-loop convolution used as an independent oracle."""
    bsz, cin, t = x.shape
    cout, _, kernel = w.shape
    tp = t + 2 * pad
    xp = np.zeros((bsz, cin, tp), dtype=x.dtype)
    xp[:, :, pad:pad + t] = x
    t_out = (tp - kernel) // stride + 1
    y = np.zeros((bsz, cout, t_out), dtype=x.dtype)
    for bi in range(bsz):
        for o in range(cout):
            for ti in range(t_out):
                acc = b[o]
                for c in range(cin):
                    for k in range(kernel):
                        acc += w[o, c, k] * xp[bi, c, ti * stride + k]
                y[bi, o, ti] = acc
    return y
