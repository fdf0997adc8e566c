"""DeepFool for a two-class target (minimal L2 perturbation by linearization)."""
import numpy as np

from ..models import H0
from .base import DEGENERATE, NO_FLIP, Clock, already_evading, finish

_MARGIN_WEIGHTS = np.array([-1.0, 1.0])  # d(Q_H1 - Q_H0)


def deepfool(target, example, config):
    """Iterate ``r_i = -m / ||grad m||^2 * grad m`` on the margin
    ``m = Q_H1 - Q_H0`` and evaluate at ``I + (1 + overshoot) * sum(r_i)``
    until the verdict flips or the iteration cap is reached."""
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    lo, hi = target.valid_range
    factor = 1.0 + config.overshoot
    r_total = np.zeros_like(x0)
    x = x0.copy()
    for i in range(1, config.cap + 1):
        q, g = target.score_grad(x, _MARGIN_WEIGHTS)
        m = q[0, 1] - q[0, 0]
        norm2 = float(np.sum(g * g))
        if norm2 == 0.0:
            return finish(target, x0, x, clock, i, status=DEGENERATE if i == 1 else NO_FLIP)
        r_total = r_total - (m / norm2) * g
        x = np.clip(x0 + factor * r_total, lo, hi)
        if target.label(x) == H0:
            return finish(target, x0, x, clock, i, extras={"r_norm": float(np.linalg.norm(r_total))})
    return finish(target, x0, x, clock, config.cap, status=NO_FLIP)
