"""Central finite-difference oracle for gradient checks."""

import torch


def directional_check(fn, params, n_dirs=3, h=1e-5, generator=None):
    """Compare autograd directional derivatives of scalar ``fn()`` with central differences.

    Returns the worst relative error over ``n_dirs`` random unit directions in the
    joint parameter space.
    """
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, dtype=p.dtype, generator=generator) for p in params]
        norm = torch.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            up = float(fn())
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            down = float(fn())
            for p, d in zip(params, dirs):
                p.add_(h * d)
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst
