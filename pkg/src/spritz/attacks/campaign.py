"""Running one attack configuration over a batch of examples."""
import numpy as np

from ..metrics import aggregate
from ..models import H1
from .base import AttackConfig, Clock, make_target
from .cw import cw
from .deepfool import deepfool
from .gradient import bim, fgsm, ifgsm, pgd
from .jsma import jsma
from .lbfgs import lbfgs

ATTACKS = {
    "fgsm": fgsm,
    "ifgsm": ifgsm,
    "bim": bim,
    "pgd": pgd,
    "jsma": jsma,
    "lbfgs": lbfgs,
    "deepfool": deepfool,
    "cw": cw,
}


def run_attack(target, example, config):
    if isinstance(config, dict):
        config = AttackConfig.from_dict(config)
    return ATTACKS[config.family](make_target(target), example, config)


def eligible(target, examples, labels=None):
    """Indices of examples labelled H1 (if labels are given) that the target also calls H1."""
    target = make_target(target)
    x = np.asarray(examples, dtype=np.float64)
    keep = target.predict(x) == H1
    if labels is not None:
        keep &= np.asarray(labels) == H1
    return np.flatnonzero(keep)


def attack_batch(target, examples, config, progress=None):
    """Attack every example independently and summarise the campaign.

    Returns ``(outcomes, report)``. Distortion means in the report run over
    all attempted examples; a campaign without a single success reports
    ``Fails``.
    """
    if isinstance(config, dict):
        config = AttackConfig.from_dict(config)
    target = make_target(target)
    x = np.asarray(examples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty attack batch")
    clock = Clock()
    outcomes = []
    for i, ex in enumerate(x):
        outcomes.append(ATTACKS[config.family](target, ex, config))
        if progress:
            progress(i + 1, len(x))
    report = aggregate(
        config.name,
        np.stack([o.original for o in outcomes]),
        np.stack([o.adversarial for o in outcomes]),
        [o.success for o in outcomes],
        clock.elapsed,
        params=config.as_dict(),
    )
    return outcomes, report
