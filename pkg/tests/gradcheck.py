"""Central finite-difference gradient checks for the tape."""

import numpy as np

from lagrangian_da.nn import autodiff as ad


def directional_errors(fn, arrays, n_dirs=20, h=1e-5, seed=0):
    """Relative errors between tape and finite-difference directional derivatives.

    ``fn`` maps tensors built from ``arrays`` to a scalar tensor.  Each
    direction perturbs every input at once.
    """
    params = [ad.parameter(a) for a in arrays]
    loss = fn(*params)
    ad.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(np.shape(a)) for a in arrays]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        with ad.no_graph():
            plus = fn(*[ad.tensor(a + h * d) for a, d in zip(arrays, dirs)]).value
            minus = fn(*[ad.tensor(a - h * d) for a, d in zip(arrays, dirs)]).value
        numeric = float((plus - minus) / (2 * h))
        scale = max(abs(analytic), abs(numeric), 1e-8)
        errs.append(abs(analytic - numeric) / scale)
    return np.array(errs)


def module_errors(module, loss_fn, n_dirs=20, h=1e-5, seed=0):
    """Finite-difference check over every parameter of a module, perturbed jointly."""
    params = module.parameters()
    for p in params.values():
        p.grad = None
    ad.backward(loss_fn())
    grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    base = {k: p.value.copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    errs = []
    try:
        for _ in range(n_dirs):
            dirs = {k: rng.standard_normal(v.shape) for k, v in base.items()}
            analytic = sum(float(np.sum(grads[k] * dirs[k])) for k in base)
            vals = []
            for sgn in (1, -1):
                for k, p in params.items():
                    p.value = base[k] + sgn * h * dirs[k]
                with ad.no_graph():
                    vals.append(float(loss_fn().value))
            numeric = (vals[0] - vals[1]) / (2 * h)
            errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    finally:
        for k, p in params.items():
            p.value = base[k]
    return np.array(errs)
