"""advlab: an adversarial-robustness laboratory on a from-scratch autodiff engine.

Subpackages cover the training regimes (standard, adversarial, logits pairing,
and pairing with guided dropout plus adaptive sample weighting), white-box
attacks, model diagnostics, dataset and checkpoint tooling, and a CLI.
"""

__version__ = "0.1.0"
