"""Central finite-difference gradient audit, independent of autograd's own checker."""

import torch


def fd_check(fn, tensors, n_samples=200, step=1e-4, floor=1e-6, generator=None):
    """Compare autograd gradients of ``fn()`` with central differences.

    ``tensors`` are float64 leaves (parameters and inputs). Coordinates are spread
    across tensors, ``n_samples`` in total. Returns the list of relative
    errors |a - n| / max(|a|, |n|, floor).
    """
    gen = generator or torch.Generator().manual_seed(0)
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    grads = [t.grad.detach().clone() for t in tensors]

    # spread the budget evenly, handing what small tensors cannot use to the larger ones
    quota = [0] * len(tensors)
    left = min(n_samples, sum(t.numel() for t in tensors))
    while left:
        open_ = [i for i, t in enumerate(tensors) if quota[i] < t.numel()]
        share = max(1, left // len(open_))
        for i in open_:
            take = min(share, tensors[i].numel() - quota[i], left)
            quota[i] += take
            left -= take
    errors = []
    with torch.no_grad():
        for t, g, k in zip(tensors, grads, quota):
            flat = t.view(-1)
            idx = torch.randperm(flat.numel(), generator=gen)[:k]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = g.view(-1)[i].item()
                errors.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    return errors


def pass_fraction(errors, rtol):
    return sum(e <= rtol for e in errors) / len(errors)


def randomize_(module, std=0.3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
    return module
