"""Reverse-mode vs central-difference gradient comparison."""
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_excluded: int
    n_resolution_limited: int = 0
    worst: tuple = None
    per_group: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_error < self.tolerance

    def as_dict(self):
        return {
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "n_checked": self.n_checked,
            "n_excluded": self.n_excluded,
            "n_resolution_limited": self.n_resolution_limited,
            "passed": self.passed,
            "worst": list(self.worst) if self.worst else None,
            "per_group": self.per_group,
        }


def _signature(record, row):
    return [r[1][row] for r in record]


def _same(sig_a, sig_b):
    return all(np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def _rel_errors(analytic, numeric, floor_frac, resolution, tolerance):
    """Relative errors plus the count of entries judged against the resolution floor."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-300)
    floor = max(floor_frac * scale, resolution / tolerance)
    size = np.maximum(np.abs(analytic), np.abs(numeric))
    denom = np.maximum(size, floor)
    return np.abs(analytic - numeric) / denom, int(np.count_nonzero(size < floor))


def grad_check(graph, x, tolerance=1e-4, h=1e-5, loss_weights=None, param_samples=3,
               input_coords=None, chunk=64, seed=0, floor_frac=1e-6, input_scale=1.0):
    """Compare backprop gradients to central differences.

    The scalar probed is ``sum(output * W)`` for a fixed random ``W`` (or
    ``loss_weights``). Every input coordinate (or the ``input_coords``
    subset) is checked, plus ``param_samples`` random entries of each
    parameter tensor. A coordinate is excluded when either probe point
    changes a relu mask or a maxpool winner relative to the base point,
    since the function is not differentiable across such a switch.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. ``floor`` is the
    larger of ``floor_frac`` times the largest gradient magnitude in the
    group and ``resolution / tolerance``, where ``resolution = u * S / step``
    bounds the rounding error of the difference quotient (``u`` the float64
    unit roundoff, ``S = sum |output * W|`` at the base point). Derivatives
    smaller than that floor cannot be resolved to ``tolerance`` relative
    accuracy, so for them the check becomes ``|a - n| <= resolution``; the
    report counts them in ``n_resolution_limited``.

    Input coordinates are stepped by ``h * input_scale``, so ``h`` can be
    read relative to the input's natural range (255 for a grid in 0..255)
    while parameters, which live on a unit scale, are stepped by ``h``.
    """
    rng = np.random.default_rng(seed)
    base = graph.prepare(np.asarray(x, dtype=np.float64)).data[:1]
    xt = Tensor(base.copy(), requires_grad=True)
    base_rec = []
    for t in graph.parameters().values():
        t.grad = None
    out = graph.forward(xt, record=base_rec)
    if loss_weights is None:
        loss_weights = rng.normal(size=out.shape[1:])
    w = np.asarray(loss_weights, dtype=np.float64)
    ops.dot(out, w[None]).backward()
    f_roundoff = 0.5 * np.finfo(np.float64).eps * float(np.abs(out.data * w[None]).sum())
    base_sig = _signature(base_rec, 0)
    analytic_input = xt.grad.reshape(-1)
    param_grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                   for k, t in graph.parameters().items()}

    def batch_values(batch):
        rec = []
        o = graph.forward(Tensor(batch), record=rec)
        vals = (o.data * w[None]).reshape(o.shape[0], -1).sum(axis=1)
        return vals, rec

    checked = excluded = limited = 0
    worst = (0.0, None, None)
    per_group = {}

    flat = xt.data.reshape(-1)
    coords = np.arange(flat.size) if input_coords is None else np.asarray(input_coords)
    hx = h * input_scale
    an_list, nu_list, idx_list = [], [], []
    for lo in range(0, coords.size, chunk):
        cs = coords[lo:lo + chunk]
        k = cs.size
        batch = np.repeat(flat[None], 2 * k, axis=0)
        batch[np.arange(k), cs] += hx
        batch[k + np.arange(k), cs] -= hx
        vals, rec = batch_values(batch.reshape((2 * k,) + xt.shape[1:]))
        for j, c in enumerate(cs):
            if not (_same(_signature(rec, j), base_sig) and _same(_signature(rec, k + j), base_sig)):
                excluded += 1
                continue
            an_list.append(analytic_input[c])
            nu_list.append((vals[j] - vals[k + j]) / (2 * hx))
            idx_list.append(int(c))
    if an_list:
        rel, n_lim = _rel_errors(np.array(an_list), np.array(nu_list), floor_frac, f_roundoff / hx, tolerance)
        limited += n_lim
        checked += rel.size
        per_group["input"] = float(rel.max())
        i = int(np.argmax(rel))
        if rel[i] > worst[0]:
            worst = (float(rel[i]), "input", idx_list[i])

    for name, t in graph.parameters().items():
        picks = rng.choice(t.size, size=min(param_samples, t.size), replace=False)
        an, nu, ids = [], [], []
        for p in picks:
            flat_p = t.data.reshape(-1)
            orig = flat_p[p]
            vals, sigs = [], []
            for delta in (h, -h):
                flat_p[p] = orig + delta
                rec = []
                o = graph.forward(Tensor(xt.data), record=rec)
                vals.append(float((o.data * w[None]).sum()))
                sigs.append(_signature(rec, 0))
            flat_p[p] = orig
            if not all(_same(s, base_sig) for s in sigs):
                excluded += 1
                continue
            an.append(param_grads[name].reshape(-1)[p])
            nu.append((vals[0] - vals[1]) / (2 * h))
            ids.append(int(p))
        if an:
            rel, n_lim = _rel_errors(np.array(an), np.array(nu), floor_frac, f_roundoff / h, tolerance)
            limited += n_lim
            checked += rel.size
            per_group[name] = float(rel.max())
            i = int(np.argmax(rel))
            if rel[i] > worst[0]:
                worst = (float(rel[i]), name, ids[i])

    for t in graph.parameters().values():
        t.grad = None
    return GradCheckReport(
        max_rel_error=float(worst[0]),
        tolerance=tolerance,
        n_checked=checked,
        n_excluded=excluded,
        n_resolution_limited=limited,
        worst=worst if worst[1] is not None else None,
        per_group=per_group,
    )
