"""Network definitions: the 2C CNN, the one-class auto-encoders, the combiner,
and the SPRITZ-1.5C ensemble that ties them together.

Labels follow the detector convention: ``H0 = 0`` (pristine) and
``H1 = 1`` (malicious).
"""
from dataclasses import dataclass

import numpy as np

from .tensor import ModelGraph, OpNode, Tensor, ops

H0 = 0
H1 = 1
GRID = 64
FLATTEN_WIDTH = 1728
LATENT_WIDTH = 512
COMBINER_WIDTH = FLATTEN_WIDTH + 2 * LATENT_WIDTH  # 2752

# (channels out, pool after?) for the nine stride-1 convs of the 2C net.
# Three pools take 64x64 to 8x8; 8 * 8 * 27 = 1728.
CNN2C_PLAN = (
    (4, False), (4, True),
    (12, False), (12, True),
    (24, False), (24, True),
    (27, False), (27, False), (27, False),
)
# encoder widths, each a stride-2 conv: 64 -> 32 -> 16 -> 8 -> 4; 4 * 4 * 32 = 512
AE_ENCODER = (8, 16, 32, 32)
AE_DECODER = (32, 16, 8, 4)
OUTPUT_GAIN = 0.01


class UntrainedModelError(RuntimeError):
    pass


def _he(rng, fan_in, shape):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def _xavier(rng, fan_in, fan_out, shape):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape))


def _conv(rng, c_in, c_out, stride=1, output=False, gain=1.0):
    w = _xavier(rng, 9 * c_in, 9 * c_out, (3, 3, c_in, c_out)) if output else _he(rng, 9 * c_in, (3, 3, c_in, c_out))
    w.data *= gain
    return OpNode("conv2d", {"w": w, "b": Tensor(np.zeros(c_out))}, {"stride": stride})


def _tconv(rng, c_in, c_out):
    return OpNode("tconv2d", {"w": _he(rng, 9 * c_in, (3, 3, c_out, c_in)), "b": Tensor(np.zeros(c_out))},
                  {"stride": 2})


def _dense(rng, d_in, d_out, output=False, tap=None):
    w = _xavier(rng, d_in, d_out, (d_in, d_out)) if output else _he(rng, d_in, (d_in, d_out))
    return OpNode("dense", {"w": w, "b": Tensor(np.zeros(d_out))}, tap=tap)


def _bn(c):
    return OpNode("batchnorm", {"gamma": Tensor(np.ones(c)), "beta": Tensor(np.zeros(c))},
                  state={"mean": np.zeros(c), "var": np.ones(c)})


def build_cnn2c(seed=0):
    """Two-class CNN: nine 3x3 stride-1 convs with 2x2 pooling, one dense
    layer and a sigmoid. Taps: ``flatten`` (1728), ``logit``, ``prob``."""
    rng = np.random.default_rng(seed)
    nodes = [OpNode("scale", attrs={"factor": 1.0 / 255.0})]
    c_in = 1
    for c_out, pool in CNN2C_PLAN:
        nodes.append(_conv(rng, c_in, c_out))
        nodes.append(OpNode("relu"))
        if pool:
            nodes.append(OpNode("maxpool2x2"))
        c_in = c_out
    nodes.append(OpNode("flatten", tap="flatten"))
    nodes.append(_dense(rng, FLATTEN_WIDTH, 1, output=True, tap="logit"))
    nodes.append(OpNode("sigmoid", tap="prob"))
    return ModelGraph("cnn2c", (GRID, GRID, 1), nodes)


def build_autoencoder(seed=0, name="autoencoder"):
    """Convolutional auto-encoder with a 512-wide dense ``latent`` tap.

    Input is centred to [-1, 1] and the output mapped back to the same
    0-255 units, so an untrained network already sits at mid-grey.
    """
    rng = np.random.default_rng(seed)
    nodes = [OpNode("scale", attrs={"factor": 1.0 / 127.5, "offset": -1.0})]
    c_in = 1
    for c_out in AE_ENCODER:
        nodes += [_conv(rng, c_in, c_out, stride=2), _bn(c_out), OpNode("relu")]
        c_in = c_out
    nodes.append(OpNode("flatten"))
    nodes.append(_dense(rng, LATENT_WIDTH, LATENT_WIDTH))
    nodes.append(OpNode("relu", tap="latent"))
    nodes.append(_dense(rng, LATENT_WIDTH, LATENT_WIDTH))
    nodes.append(OpNode("relu"))
    nodes.append(OpNode("reshape", attrs={"shape": (4, 4, AE_ENCODER[-1])}))
    for c_out in AE_DECODER:
        nodes += [_tconv(rng, c_in, c_out), _bn(c_out), OpNode("relu")]
        c_in = c_out
    # batchnorm hands the output conv unit-variance features; a small gain
    # keeps the initial reconstruction near mid-grey instead of +-60 noise
    nodes.append(_conv(rng, c_in, 1, output=True, gain=OUTPUT_GAIN))
    nodes.append(OpNode("scale", attrs={"factor": 127.5, "offset": 127.5}, tap="reconstruction"))
    return ModelGraph(name, (GRID, GRID, 1), nodes)


def build_combiner(seed=0):
    """Dense 2752 -> 128 -> 2 producing softmax-ready ``logits``."""
    rng = np.random.default_rng(seed)
    nodes = [
        _dense(rng, COMBINER_WIDTH, 128),
        OpNode("relu"),
        _dense(rng, 128, 2, output=True, tap="logits"),
    ]
    return ModelGraph("combiner", (COMBINER_WIDTH,), nodes)


@dataclass
class EnsembleModel:
    """SPRITZ-1.5C: 2C flatten + 1C-Leg latent + 1C-Mal latent -> combiner."""

    cnn2c: ModelGraph
    leg: ModelGraph
    mal: ModelGraph
    combiner: ModelGraph
    leg_threshold: float = None
    mal_threshold: float = None
    combiner_trained: bool = False

    name = "spritz15c"
    input_shape = (GRID, GRID, 1)

    def __post_init__(self):
        for t in (self.leg_threshold, self.mal_threshold):
            if t is not None and t < 0:
                raise ValueError("thresholds must be nonnegative")

    def graphs(self):
        return {"cnn2c": self.cnn2c, "leg": self.leg, "mal": self.mal, "combiner": self.combiner}

    def parameters(self):
        out = {}
        for prefix, g in self.graphs().items():
            for k, t in g.parameters().items():
                out[f"{prefix}/{k}"] = t
        return out

    def prepare(self, x):
        return self.cnn2c.prepare(x)

    def features(self, x, record=None):
        """Tape-enabled 2752-wide feature vector, in flatten/leg/mal order."""
        x = self.prepare(x)
        parts = [
            self.cnn2c.forward(x, until="flatten", record=record),
            self.leg.forward(x, until="latent", record=record),
            self.mal.forward(x, until="latent", record=record),
        ]
        return ops.concat(parts, axis=1)

    def forward(self, x, record=None):
        """Combiner logits for ``x`` with gradients flowing into all branches."""
        return self.combiner.forward(self.features(x, record=record), record=record)

    def predict_proba(self, x):
        if not self.combiner_trained:
            raise UntrainedModelError("combiner has not been trained")
        with frozen(self):
            return ops.softmax(self.forward(np.asarray(x, dtype=np.float64)).data)

    def predict(self, x):
        return decide_from_proba(self.predict_proba(x))

    def descriptor(self):
        return {k: g.descriptor() for k, g in self.graphs().items()}


class frozen:
    """Context manager that disables parameter gradients on a graph or ensemble."""

    def __init__(self, model):
        self.tensors = list(model.parameters().values())

    def __enter__(self):
        self.saved = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self.tensors, self.saved):
            t.requires_grad = flag
        return False


def decide_from_proba(proba):
    """argmax over {H0, H1}; an exact tie goes to H1 (fail closed)."""
    proba = np.atleast_2d(proba)
    return np.where(proba[:, H1] >= proba[:, H0], H1, H0)


def cnn2c_predict(cnn2c, x):
    """2C labels: sigmoid >= 0.5 is H1."""
    p = cnn2c.predict(x).reshape(-1)
    return np.where(p >= 0.5, H1, H0)


def ensemble_features(model, example):
    with frozen(model):
        return model.features(np.asarray(example, dtype=np.float64)).data


def ensemble_predict(model, example):
    """Return ``(labels, class probabilities)`` for one example or a batch."""
    proba = model.predict_proba(example)
    return decide_from_proba(proba), proba


def reconstruction_error(autoencoder, example):
    """Per-example mean squared error between input and reconstruction (0-255 units)."""
    x = autoencoder.prepare(np.asarray(example, dtype=np.float64)).data
    recon = autoencoder.predict(x)
    err = ((recon - x) ** 2).reshape(x.shape[0], -1).mean(axis=1)
    return float(err[0]) if np.asarray(example).ndim == 2 else err


def oneclass_decide(autoencoder, threshold, example):
    """Accept (True) iff the reconstruction error is <= ``threshold``."""
    return np.asarray(reconstruction_error(autoencoder, example)) <= threshold
