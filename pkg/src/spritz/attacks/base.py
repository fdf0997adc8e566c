"""Attack configuration, per-example outcomes and differentiable targets.

Every target exposes two class scores ``Q = (Q_H0, Q_H1)`` and decides H1
when ``Q_H1 >= Q_H0``. The 2C network's single logit ``z`` is presented as
``Q = (0, z)``, which makes ``Q_H1 - Q_H0 = z`` and agrees with the
``sigmoid(z) >= 0.5`` rule.
"""
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..metrics import l1_mean, max_abs, psnr
from ..models import H0, H1, EnsembleModel, frozen
from ..tensor import Tensor, ops
from ..tensor.tensor import make_result

FAMILIES = ("fgsm", "ifgsm", "bim", "pgd", "jsma", "lbfgs", "deepfool", "cw")
GRADIENT_SIGN_FAMILIES = ("fgsm", "ifgsm", "bim", "pgd")

SUCCESS = "success"
NO_FLIP = "no-flip"
DEGENERATE = "fails-degenerate"

# iteration caps used when ``AttackConfig.iterations`` is left unset
DEFAULT_ITERATIONS = {"bim": 10, "pgd": 40, "deepfool": 50, "cw": 200, "lbfgs": 20}


class AttackConfigError(ValueError):
    pass


@dataclass
class AttackConfig:
    """Parameters for one attack run; unused fields are ignored by a family.

    ``epsilon`` is the FGSM/I-FGSM strength relative to the example's own
    value range. ``step_size`` and ``alpha`` are absolute grey levels
    (BIM/PGD step, PGD ball radius). ``confidence`` is the C&W margin P and
    ``cw_const`` the C&W tradeoff constant.
    """

    family: str
    epsilon: float = 0.1
    steps: int = 10
    theta: float = 0.1
    alpha: float = 16.0
    step_size: float = 2.0
    confidence: float = 0.0
    cw_const: float = 10.0
    learning_rate: float = 0.05
    max_l0: int = 200
    iterations: int = None
    overshoot: float = 0.02
    lbfgs_memory: int = 10
    lbfgs_maxiter: int = 30
    abort_early: bool = True
    record_iterates: bool = False
    label: str = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackConfigError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be >= 0")
        if not 0 < self.theta < 1:
            raise AttackConfigError("theta must lie in (0, 1)")
        if not self.alpha > 0:
            raise AttackConfigError("alpha must be > 0")
        if self.steps < 1:
            raise AttackConfigError("steps must be >= 1")
        if self.max_l0 < 0:
            raise AttackConfigError("max_l0 must be >= 0")
        if self.step_size <= 0:
            raise AttackConfigError("step_size must be > 0")
        if self.family == "pgd" and self.step_size >= self.alpha:
            raise AttackConfigError("PGD needs step_size < alpha")
        if self.iterations is not None and self.iterations < 1:
            raise AttackConfigError("iterations must be >= 1")

    @property
    def cap(self):
        if self.iterations is not None:
            return self.iterations
        if self.family == "ifgsm":
            return self.steps
        if self.family == "jsma":
            return self.max_l0
        return DEFAULT_ITERATIONS.get(self.family, 1)

    @property
    def name(self):
        if self.label:
            return self.label
        if self.family in ("fgsm", "ifgsm"):
            return f"{self.family.upper().replace('IFGSM', 'I-FGSM')}, eps={self.epsilon:g}"
        if self.family == "jsma":
            return f"JSMA, theta={self.theta:g}"
        if self.family == "cw":
            return f"C&W, c={self.confidence:g}"
        pretty = {"bim": "BIM", "pgd": "PGD", "lbfgs": "LBFGS", "deepfool": "DeepFool"}
        return f"{pretty[self.family]}, default"

    def as_dict(self):
        return {k: v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise AttackConfigError(f"unknown attack config keys: {sorted(extra)}")
        return cls(**raw)


@dataclass
class AttackOutcome:
    original: np.ndarray
    adversarial: np.ndarray
    success: bool
    status: str
    iterations: int
    elapsed: float
    extras: dict = field(default_factory=dict)

    @property
    def psnr(self):
        return psnr(self.original, self.adversarial)

    @property
    def l1(self):
        return l1_mean(self.original, self.adversarial)

    @property
    def max_abs(self):
        return max_abs(self.original, self.adversarial)


def value_range(x):
    return float(np.max(x) - np.min(x))


# ----------------------------------------------------------------------- targets

class DifferentiableTarget:
    """Wraps a model as class scores plus input gradients.

    Subclasses implement ``_output`` (tape-enabled forward on a batch tensor),
    ``_scores`` (output data to ``(n, 2)`` scores), ``_weighted`` (scalar
    ``sum(weights * Q)``) and ``_loss`` (the training loss, summed so each
    example's input gradient is exactly its own).
    """

    name = "target"
    valid_range = (0.0, 255.0)
    input_shape = (64, 64)

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None]
        return x

    def _frozen(self):
        return frozen(self.model)

    def scores(self, x):
        xb = self._batch(x)
        with self._frozen():
            return self._scores(self._output(Tensor(xb)).data)

    def predict(self, x):
        q = self.scores(x)
        return np.where(q[:, H1] >= q[:, H0], H1, H0)

    def label(self, x):
        return int(self.predict(x)[0])

    def margin(self, x):
        """``Q_H1 - Q_H0``: nonnegative means H1."""
        q = self.scores(x)
        return q[:, H1] - q[:, H0]

    def _grad(self, x, build):
        xb = self._batch(x)
        xt = Tensor(xb.copy(), requires_grad=True)
        with self._frozen():
            out = self._output(xt)
            obj = build(out)
            obj.backward()
        grad = xt.grad if xt.grad is not None else np.zeros_like(xb)
        return self._scores(out.data), float(obj.data), grad.reshape(np.shape(x))

    def score_grad(self, x, weights):
        """Scores and the input gradient of ``sum(weights * Q)``."""
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(self._batch(x)), 2))
        q, _, g = self._grad(x, lambda out: self._weighted(out, w))
        return q, g

    def loss_grad(self, x, labels):
        """Training loss ``J`` (summed over the batch) and its input gradient."""
        labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
        q, value, g = self._grad(x, lambda out: self._loss(out, labels))
        return value, g, q


class Cnn2cTarget(DifferentiableTarget):
    """The 2C network; loss is binary cross-entropy on its logit."""

    name = "2C"

    def __init__(self, cnn2c):
        self.model = cnn2c

    def _output(self, xt):
        self.model.forward(xt, until="logit")
        return self.model.taps["logit"]

    def _scores(self, out):
        z = out.reshape(-1)
        return np.stack([np.zeros_like(z), z], axis=1)

    def _weighted(self, out, w):
        return ops.dot(out, w[:, H1:H1 + 1])

    def _loss(self, out, labels):
        return ops.binary_cross_entropy(out, labels, reduction="sum")


class EnsembleTarget(DifferentiableTarget):
    """SPRITZ-1.5C end to end: gradients flow through the combiner into the
    2C flatten branch and both auto-encoder latent branches."""

    name = "SPRITZ-1.5C"

    def __init__(self, ensemble):
        if not isinstance(ensemble, EnsembleModel):
            raise TypeError("EnsembleTarget wraps an EnsembleModel")
        self.model = ensemble

    def _output(self, xt):
        return self.model.forward(xt)

    def _scores(self, out):
        return np.asarray(out).reshape(-1, 2)

    def _weighted(self, out, w):
        return ops.dot(out, w)

    def _loss(self, out, labels):
        return ops.softmax_cross_entropy(out, labels, reduction="sum")


class LinearTarget(DifferentiableTarget):
    """Affine binary classifier ``z = <w, x> + b`` presented as ``Q = (0, z)``.

    Handy as an analytic reference: its decision boundary is a hyperplane.
    """

    name = "linear"

    def __init__(self, w, b=0.0, valid_range=(0.0, 255.0)):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.input_shape = self.w.shape
        self.valid_range = tuple(valid_range)

    def _frozen(self):
        return _Null()

    def _output(self, xt):
        w = self.w.reshape(-1)
        n = xt.shape[0]
        flat = xt.data.reshape(n, -1)
        z = flat @ w + self.b

        def backward(g):
            xt._accumulate((g.reshape(n, 1) * w[None]).reshape(xt.shape))

        return make_result(z.reshape(n, 1), (xt,), backward)

    _scores = Cnn2cTarget._scores
    _weighted = Cnn2cTarget._weighted
    _loss = Cnn2cTarget._loss


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def make_target(model):
    if isinstance(model, DifferentiableTarget):
        return model
    if isinstance(model, EnsembleModel):
        return EnsembleTarget(model)
    if "logit" in getattr(model, "tap_names", lambda: [])():
        return Cnn2cTarget(model)
    raise TypeError(f"cannot wrap {type(model).__name__} as an attack target")


class Clock:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start


def finish(target, original, adversarial, clock, iterations, status=None, extras=None):
    """Build an outcome; success is re-derived from the target's decision."""
    adversarial = np.clip(adversarial, *target.valid_range)
    flipped = target.label(original) == H1 and target.label(adversarial) == H0
    if status is None:
        status = SUCCESS if flipped else NO_FLIP
    elif status == SUCCESS and not flipped:
        status = NO_FLIP
    return AttackOutcome(np.array(original, copy=True), adversarial, bool(flipped and status == SUCCESS),
                         status, int(iterations), clock.elapsed, dict(extras or {}))


def already_evading(target, original, clock):
    """Outcome for an input the target already labels H0: nothing to do."""
    x = np.array(original, dtype=np.float64, copy=True)
    return AttackOutcome(x, x.copy(), True, SUCCESS, 0, clock.elapsed, {"already_h0": True})
