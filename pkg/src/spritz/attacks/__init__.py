"""Evasion attacks against the 2C network or the full ensemble."""
from .base import (DEGENERATE, FAMILIES, GRADIENT_SIGN_FAMILIES, NO_FLIP, SUCCESS, AttackConfig,
                   AttackConfigError, AttackOutcome, Cnn2cTarget, DifferentiableTarget,
                   EnsembleTarget, LinearTarget, make_target)
from .campaign import ATTACKS, attack_batch, eligible, run_attack
from .cw import cw, decode, encode
from .deepfool import deepfool
from .gradient import bim, fgsm, ifgsm, pgd, project_linf
from .jsma import jsma, saliency
from .lbfgs import lbfgs, lbfgs_solve

__all__ = [
    "ATTACKS", "AttackConfig", "AttackConfigError", "AttackOutcome", "Cnn2cTarget", "DEGENERATE",
    "DifferentiableTarget", "EnsembleTarget", "FAMILIES", "GRADIENT_SIGN_FAMILIES", "LinearTarget",
    "NO_FLIP", "SUCCESS", "attack_batch", "bim", "cw", "decode", "deepfool", "eligible", "encode",
    "fgsm", "ifgsm", "jsma", "lbfgs", "lbfgs_solve", "make_target", "pgd", "project_linf",
    "run_attack", "saliency",
]
