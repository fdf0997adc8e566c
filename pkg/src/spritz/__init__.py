"""SPRITZ-1.5C ensemble detector and an evasion attack harness.

Subpackages and modules:

* ``spritz.tensor``      float64 reverse-mode autodiff, conv/pool kernels, grad_check
* ``spritz.models``      the 2C CNN, the two auto-encoders and the combiner
* ``spritz.training``    Adam training, early stopping, threshold calibration
* ``spritz.attacks``     FGSM, I-FGSM, BIM, PGD, JSMA, L-BFGS, DeepFool, C&W
* ``spritz.metrics``     PSNR, L1, max-abs and campaign aggregation
* ``spritz.dataio``      grids, CSV manifests, synthetic data, checkpoints
* ``spritz.experiment``  config-driven train / attack / report pipeline
"""
from .models import H0, H1, EnsembleModel

__version__ = "0.1.0"

__all__ = ["H0", "H1", "EnsembleModel", "__version__"]
