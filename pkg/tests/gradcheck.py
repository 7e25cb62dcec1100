"""Autograd-vs-central-difference comparison over every tensor of a ParamStore."""
from __future__ import annotations

import torch

from tryonkit.numerics import ParamStore, finite_diff_grad, relative_error, value_and_grad

# gradients that vanish analytically (e.g. key biases under softmax shift
# invariance) only need to vanish numerically too
ABS_FLOOR = 1e-8


def check_gradients(loss, store: ParamStore, names=None, max_elems=16, h=1e-5, rtol=1e-4, seed=0) -> dict[str, float]:
    """Return the relative error per tensor; raises AssertionError on mismatch.

    At most ``max_elems`` randomly chosen elements per tensor are checked.
    """
    names = list(store) if names is None else list(names)
    _, grads = value_and_grad(loss, store, names)
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for name in names:
        n = store[name].numel()
        idx = torch.randperm(n, generator=gen)[: min(n, max_elems)].tolist()

        def f(x, name=name):
            s = ParamStore(store)
            s[name] = x
            return loss(s).item()

        fd = finite_diff_grad(f, store[name], h=h, indices=idx)
        an = grads[name].reshape(-1)[idx]
        if max(an.norm().item(), fd.norm().item()) < ABS_FLOOR:
            errors[name] = 0.0
            continue
        err = relative_error(an, fd)
        errors[name] = err
        assert err < rtol, f"{name}: relative error {err:.3g}"
    return errors
