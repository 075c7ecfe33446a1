"""Finite-difference gradient checks over autodiff ops (float64 only)."""

import numpy as np

from gradmask import autodiff as ad
from gradmask.tensor import Tensor

from oracles import central_difference, rel_err

STEP = 1e-5
# Below this magnitude a gradient entry is compared absolutely: central
# differences at step 1e-5 carry ~1e-10 of rounding noise.
FLOOR = 1e-3


def _random_inputs(rs, shapes, kind):
    arrays = []
    for shape in shapes:
        a = rs.normal(size=shape)
        if kind == "positive":
            a = np.abs(a) + 0.5
        elif kind == "away_from_zero":
            a = np.sign(a) * (np.abs(a) + 0.1)
        arrays.append(a)
    return arrays


def scalarize(fn, weights):
    """Wrap ``fn`` so it returns sum(fn(*nodes) * weights), a scalar node."""

    def f(*nodes):
        out = fn(*nodes)
        if out.shape == ():
            return out
        return ad.sum(ad.mul(out, ad.constant(Tensor(weights))))

    return f


def check_first_order(fn, arrays, rs):
    """Max elementwise relative error of grad() against central differences."""
    nodes = [ad.lift(Tensor(a), requires_grad=True) for a in arrays]
    with ad.no_grad():
        probe = fn(*[ad.constant(Tensor(a)) for a in arrays])
    weights = rs.normal(size=probe.shape) if probe.shape != () else None
    f = scalarize(fn, weights)
    analytic = ad.grad(f(*nodes), nodes)
    worst = 0.0
    for i, a in enumerate(arrays):

        def value(v, i=i):
            args = [ad.constant(Tensor(v if j == i else arrays[j])) for j in range(len(arrays))]
            with ad.no_grad():
                return f(*args).item()

        numeric = central_difference(value, a, STEP)
        worst = max(worst, float(np.max(rel_err(analytic[i].numpy(), numeric, FLOOR), initial=0.0)))
    return worst


def random_inputs(rs, shapes, kind="normal"):
    return _random_inputs(rs, shapes, kind)


def check_params(model, objective, step=STEP, floor=FLOOR):
    """Worst relative error of d objective(model)/d params against central differences.

    ``objective`` builds a scalar node from the model's current parameters; it
    may itself call ``grad`` (a saliency penalty), so no ``no_grad`` here.
    """
    analytic = ad.grad(objective(model), model.params)
    worst = 0.0
    for k, p in enumerate(model.params):
        base = p.value

        def value(v, p=p):
            p.value = Tensor(v)
            return objective(model).item()

        numeric = central_difference(value, base.numpy(), step)
        p.value = base
        worst = max(worst, float(np.max(rel_err(analytic[k].numpy(), numeric, floor))))
    return worst
