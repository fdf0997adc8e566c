"""Carlini-Wagner L2 attack with the tanh change of variable."""
import numpy as np

from ..models import H0, H1
from .base import NO_FLIP, Clock, already_evading, finish

_BOX_SQUEEZE = 1.0 - 1e-6


def decode(w, lo=0.0, hi=255.0):
    """Map an unconstrained ``w`` into ``[lo, hi]``: ``lo + (hi - lo) * (tanh(w) + 1) / 2``.

    The result is clipped as well, which only matters when ``tanh``
    saturates to exactly +-1 in floating point.
    """
    return np.clip(lo + (hi - lo) * 0.5 * (np.tanh(w) + 1.0), lo, hi)


def encode(x, lo=0.0, hi=255.0):
    u = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * 2.0 - 1.0
    return np.arctanh(np.clip(u, -_BOX_SQUEEZE, _BOX_SQUEEZE))


def cw(target, example, config):
    """Minimise ``||x - I||^2 + c * f(x)`` over ``w`` with ``x = decode(w)``.

    Distances are measured on the unit scale (``x / (hi - lo)``), ``c`` is
    ``config.cw_const`` and ``f(x) = max(Q_H1 - Q_H0, -P)`` with the target
    class H0 and ``P = config.confidence``. Adam runs for up to
    ``config.cap`` steps and the lowest-distortion iterate that flips the
    verdict is returned. ``P`` shapes the path (the margin term keeps
    pulling until the H0 logit leads by ``P``), but success is the flip
    itself, as for every other attack; ``extras["best_margin"]`` records
    the largest H0 lead reached. With ``abort_early`` the run stops once
    the loss has not improved by 1e-4 relative over a tenth of the step
    budget.
    """
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    lo, hi = target.valid_range
    span = hi - lo
    P = float(config.confidence)
    c = float(config.cw_const)
    lr = float(config.learning_rate)
    b1, b2, eps = 0.9, 0.999, 1e-8
    w = encode(x0, lo, hi)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    best, best_d = None, np.inf
    best_margin = -np.inf
    window = max(1, config.cap // 10)
    prev_check = np.inf
    x = decode(w, lo, hi)
    iterates = [] if config.record_iterates else None
    used = 0
    for used in range(1, config.cap + 1):
        x = decode(w, lo, hi)
        if iterates is not None:
            iterates.append(x.copy())
        q, g_margin = target.score_grad(x, np.array([-1.0, 1.0]))
        margin = q[0, H1] - q[0, H0]
        d = float(np.sum(((x - x0) / span) ** 2))
        active = margin > -P
        loss = d + c * max(margin, -P)
        best_margin = max(best_margin, -margin)
        if margin < 0 and d < best_d:
            best, best_d = x.copy(), d
        # gradient in x, then through decode
        gx = 2.0 * (x - x0) / span ** 2
        if active:
            gx = gx + c * g_margin
        t = np.tanh(w)
        gw = gx * span * 0.5 * (1.0 - t * t)
        m = b1 * m + (1 - b1) * gw
        v = b2 * v + (1 - b2) * gw * gw
        mh = m / (1 - b1 ** used)
        vh = v / (1 - b2 ** used)
        w = w - lr * mh / (np.sqrt(vh) + eps)
        if config.abort_early and used % window == 0:
            if loss > prev_check * (1 - 1e-4):
                break
            prev_check = loss
    extras = {"best_margin": float(best_margin)}
    if iterates is not None:
        extras["iterates"] = iterates
    if best is not None:
        extras["l2_unit"] = float(np.sqrt(best_d))
        return finish(target, x0, best, clock, used, extras=extras)
    x = decode(w, lo, hi)
    status = None if target.label(x) == H0 else NO_FLIP
    return finish(target, x0, x, clock, used, status=status, extras=extras)
