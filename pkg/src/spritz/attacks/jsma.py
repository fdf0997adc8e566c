"""Single-coordinate greedy saliency-map attack (L0)."""
import numpy as np

from ..models import H0
from .base import DEGENERATE, NO_FLIP, Clock, already_evading, finish, value_range


def saliency(target, x):
    """``d p(H0) / dx`` for a two-class target.

    With ``p = softmax(Q)``, ``dp0/dQ0 = p0 p1`` and ``dp0/dQ1 = -p0 p1``.
    """
    q = target.scores(x)[0]
    z = q - q.max()
    p = np.exp(z) / np.exp(z).sum()
    k = p[0] * p[1]
    _, g = target.score_grad(x, np.array([k, -k]))
    return g


def jsma(target, example, config):
    """Greedy L0 attack.

    Each iteration recomputes the saliency map, picks the not-yet-modified
    coordinate with the largest ``|saliency|`` whose move is not blocked by
    the box, and shifts it by ``theta * (max(I) - min(I))`` in the direction
    that raises ``p(H0)``. Runs until the verdict flips or ``max_l0``
    coordinates have been changed.
    """
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    lo, hi = target.valid_range
    delta = config.theta * value_range(x0)
    x = x0.copy()
    flat = x.reshape(-1)
    used = np.zeros(flat.size, dtype=bool)
    changed = 0
    iterations = 0
    while changed < config.max_l0:
        iterations += 1
        s = saliency(target, x).reshape(-1)
        if iterations == 1 and not s.any():
            return finish(target, x0, x0, clock, 1, status=DEGENERATE)
        movable = ~used & (((s > 0) & (flat < hi)) | ((s < 0) & (flat > lo)))
        if not movable.any():
            break
        score = np.where(movable, np.abs(s), -1.0)
        i = int(np.argmax(score))
        flat[i] = np.clip(flat[i] + np.sign(s[i]) * delta, lo, hi)
        used[i] = True
        changed += 1
        if target.label(x) == H0:
            return finish(target, x0, x, clock, iterations, extras={"l0": changed})
    return finish(target, x0, x, clock, iterations, status=NO_FLIP, extras={"l0": changed})
