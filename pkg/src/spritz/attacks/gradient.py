"""Gradient-sign attacks: FGSM, I-FGSM, BIM and PGD.

All four step along ``sign(grad_x J)`` where ``J`` is the target's training
loss against the true label H1, so each step raises the loss of the
malicious verdict.
"""
import numpy as np

from ..models import H0, H1
from .base import DEGENERATE, Clock, already_evading, finish, value_range


def _loss_sign(target, x):
    _, g, _ = target.loss_grad(x, H1)
    return np.sign(g)


def fgsm(target, example, config):
    """One step of size ``epsilon * (max(I) - min(I))``, clipped to the valid range."""
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    s = _loss_sign(target, x0)
    if not s.any():
        return finish(target, x0, x0, clock, 1, status=DEGENERATE)
    adv = np.clip(x0 + config.epsilon * value_range(x0) * s, *target.valid_range)
    return finish(target, x0, adv, clock, 1)


def ifgsm(target, example, config):
    """``steps`` FGSM updates, each clipped to the valid range; stops at the first flip."""
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    step = config.epsilon * value_range(x0)
    x = x0.copy()
    iterates = [x.copy()] if config.record_iterates else None
    used = 0
    for used in range(1, config.cap + 1):
        s = _loss_sign(target, x)
        if not s.any():
            return finish(target, x0, x, clock, used, status=DEGENERATE if used == 1 else None)
        x = np.clip(x + step * s, *target.valid_range)
        if iterates is not None:
            iterates.append(x.copy())
        if target.label(x) == H0:
            break
    extras = {"iterates": iterates, "step": step} if iterates is not None else {}
    return finish(target, x0, x, clock, used, extras=extras)


def bim(target, example, config):
    """Basic iterative method: fixed absolute ``step_size`` per iteration,
    every iterate clipped back into the valid range."""
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    x = x0.copy()
    iterates = [x.copy()] if config.record_iterates else None
    used = 0
    for used in range(1, config.cap + 1):
        s = _loss_sign(target, x)
        if not s.any():
            return finish(target, x0, x, clock, used, status=DEGENERATE if used == 1 else None)
        x = np.clip(x + config.step_size * s, *target.valid_range)
        if iterates is not None:
            iterates.append(x.copy())
        if target.label(x) == H0:
            break
    return finish(target, x0, x, clock, used, extras={"iterates": iterates} if iterates else {})


def project_linf(x, center, radius, lo, hi):
    """Clip ``x`` into the L-infinity ball around ``center`` and the box ``[lo, hi]``.

    Rounding in ``center +/- radius`` can leave ``|x - center|`` one ulp
    above ``radius``; such cells are nudged inward until the bound holds
    exactly in floating point.
    """
    x = np.clip(np.clip(x, center - radius, center + radius), lo, hi)
    for _ in range(8):
        over = (x - center) > radius
        under = (center - x) > radius
        if not (over.any() or under.any()):
            break
        x = np.where(over, np.nextafter(x, -np.inf), x)
        x = np.where(under, np.nextafter(x, np.inf), x)
    return x


def pgd(target, example, config):
    """Signed steps of ``step_size`` projected onto the ``alpha`` ball after each step."""
    clock = Clock()
    x0 = np.asarray(example, dtype=np.float64)
    if target.label(x0) == H0:
        return already_evading(target, x0, clock)
    lo, hi = target.valid_range
    x = x0.copy()
    used = 0
    for used in range(1, config.cap + 1):
        s = _loss_sign(target, x)
        if not s.any():
            return finish(target, x0, x, clock, used, status=DEGENERATE if used == 1 else None)
        x = project_linf(x + config.step_size * s, x0, config.alpha, lo, hi)
        if target.label(x) == H0:
            break
    return finish(target, x0, x, clock, used)
