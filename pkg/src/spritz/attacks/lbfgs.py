"""Box-constrained L-BFGS attack with a search over the tradeoff scalar."""
import math

import numpy as np
from scipy.optimize import minimize

from ..models import H0, H1
from .base import NO_FLIP, Clock, already_evading, finish

C_START = 1.0
C_MIN = 1e-6
C_MAX = 1e8
BRACKET_RATIO = 1.5


def lbfgs_solve(target, x0, c, config):
    """Minimise ``||(x - I) / span||^2 - c * J(x, H1)`` over the valid box.

    ``J`` is the target's training loss for the malicious label, so a larger
    ``c`` buys a stronger push away from H1 at the price of distortion.
    Starts from ``I`` and uses L-BFGS-B with ``lbfgs_memory`` correction pairs.
    """
    lo, hi = target.valid_range
    span = hi - lo
    shape = x0.shape
    ref = x0.reshape(-1)

    def objective(flat):
        x = flat.reshape(shape)
        j, g, _ = target.loss_grad(x, H1)
        r = (flat - ref) / span
        value = float(r @ r) - c * j
        grad = 2.0 * r / span - c * g.reshape(-1)
        return value, grad

    res = minimize(objective, ref.copy(), jac=True, method="L-BFGS-B",
                   bounds=[(lo, hi)] * ref.size,
                   options={"maxcor": config.lbfgs_memory, "maxiter": config.lbfgs_maxiter})
    return np.clip(res.x.reshape(shape), lo, hi), int(res.nfev)


def lbfgs(target, example, config):
    """Find the smallest tradeoff scalar whose minimiser flips the verdict.

    The scalar is scaled by 10 until the flip status changes, then the
    bracket is bisected geometrically until its ratio is at most 1.5. At
    most ``config.cap`` inner solves are run. The returned example is the
    minimiser at the smallest flipping scalar found.
    """
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    solves = 0
    evals = 0
    tried = {}

    def attempt(c):
        nonlocal solves, evals
        adv, n = lbfgs_solve(target, x0, c, config)
        solves += 1
        evals += n
        ok = target.label(adv) == H0
        tried[c] = ok
        return adv, ok

    c = C_START
    adv, ok = attempt(c)
    good = (c, adv) if ok else None
    bad = None if ok else c
    # expand until the bracket is closed
    while solves < config.cap:
        if good is None:
            if c >= C_MAX:
                break
            c = c * 10.0
            adv, ok = attempt(c)
            if ok:
                good = (c, adv)
            else:
                bad = c
        elif bad is None:
            if c <= C_MIN:
                break
            c = c / 10.0
            adv, ok = attempt(c)
            if ok:
                good = (c, adv)
            else:
                bad = c
        else:
            break
    # bisect in log space
    while good is not None and bad is not None and good[0] / bad > BRACKET_RATIO and solves < config.cap:
        mid = math.sqrt(good[0] * bad)
        adv, ok = attempt(mid)
        if ok:
            good = (mid, adv)
        else:
            bad = mid
    extras = {"solves": solves, "evaluations": evals, "tried": {repr(k): v for k, v in sorted(tried.items())}}
    if good is None:
        return finish(target, x0, adv, clock, solves, status=NO_FLIP, extras=extras)
    extras["c"] = good[0]
    return finish(target, x0, good[1], clock, solves, extras=extras)
