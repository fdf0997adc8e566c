"""Distortion metrics and per-campaign aggregation.

All distances are measured in 0-255 grid units.
"""
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PEAK = 255.0
REPORT_COLUMNS = ("attack", "psnr", "l1", "max", "asr", "time")


def _diff(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def psnr(original, adversarial):
    """Peak signal-to-noise ratio in dB with peak 255; identical inputs give ``inf``."""
    mse = float(np.mean(_diff(original, adversarial) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def l1_mean(original, adversarial):
    """Mean absolute per-cell perturbation."""
    return float(np.mean(np.abs(_diff(original, adversarial))))


def max_abs(original, adversarial):
    """Largest absolute per-cell perturbation (L-infinity)."""
    return float(np.max(np.abs(_diff(original, adversarial))))


def l0(original, adversarial):
    return int(np.count_nonzero(_diff(original, adversarial)))


@dataclass
class CampaignReport:
    """One row of an attack table.

    Distortion means run over every attempted example (failed attempts
    included) so a campaign is summarised by what the attacker actually
    emitted. ``failed`` marks campaigns with no successful example, which
    the tables print as ``Fails``.
    """

    attack: str
    psnr: float
    l1: float
    max: float
    asr: float
    time: float
    n_attempted: int
    n_success: int
    params: dict = field(default_factory=dict)

    @property
    def failed(self):
        return self.n_success == 0

    def row(self):
        if self.failed:
            return {"attack": self.attack, "psnr": "Fails", "l1": "Fails", "max": "Fails",
                    "asr": "Fails", "time": _fmt(self.time)}
        return {"attack": self.attack, "psnr": _fmt(self.psnr), "l1": _fmt(self.l1),
                "max": _fmt(self.max), "asr": _fmt(self.asr), "time": _fmt(self.time)}

    def as_dict(self):
        d = {"attack": self.attack, "psnr": _json_float(self.psnr), "l1": self.l1, "max": self.max,
             "asr": self.asr, "time": self.time, "n_attempted": self.n_attempted,
             "n_success": self.n_success, "failed": self.failed, "params": self.params}
        return d


def _fmt(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return f"{x:.6f}"


def _json_float(x):
    return "inf" if math.isinf(x) else x


def aggregate(attack, originals, adversarials, success, elapsed, params=None):
    """Summarise one campaign: mean PSNR (over finite values), mean L1, mean
    max-abs, attack success rate and wall-clock time."""
    success = np.asarray(success, dtype=bool).reshape(-1)
    n = success.size
    if n == 0:
        raise ValueError("no attempted examples")
    originals = np.asarray(originals, dtype=np.float64).reshape(n, -1)
    adversarials = np.asarray(adversarials, dtype=np.float64).reshape(n, -1)
    p = np.array([psnr(o, a) for o, a in zip(originals, adversarials)])
    finite = p[np.isfinite(p)]
    mean_psnr = float(finite.mean()) if finite.size else math.inf
    return CampaignReport(
        attack=attack,
        psnr=mean_psnr,
        l1=float(np.mean(np.abs(adversarials - originals).mean(axis=1))),
        max=float(np.mean(np.abs(adversarials - originals).max(axis=1))),
        asr=float(success.mean()),
        time=float(elapsed),
        n_attempted=n,
        n_success=int(success.sum()),
        params=dict(params or {}),
    )


def write_report_csv(reports, path, include_time=True):
    cols = REPORT_COLUMNS if include_time else REPORT_COLUMNS[:-1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            row = r.row()
            w.writerow([row[c] for c in cols])


def write_report_json(reports, path, meta=None):
    doc = {"meta": meta or {}, "rows": [r.as_dict() for r in reports]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
