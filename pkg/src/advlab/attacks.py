"""White-box L-infinity attacks: FGSM, PGD, and margin-loss (CW-style) PGD.

All three share one ascent step and one projection helper, so the contract
"PGD with one iteration, step = epsilon, no random start equals FGSM" holds
bit for bit. Attacks are pure: the input array is never mutated, model
parameters are read-only (the backward pass prunes their gradient work), and
with random_start off the output is a function of (net, x, y, cfg) alone.

Every call machine-checks its own projection: L-inf distance <= epsilon and
values inside the clamp range, or it raises.
"""

import dataclasses

import numpy as np

from . import nn
from . import tensor as T

_MICRO_BATCH = 128


@dataclasses.dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    iterations: int
    random_start: bool = False
    loss_kind: str = "cross-entropy"
    clamp: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.loss_kind not in ("cross-entropy", "cw-margin"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if not (self.clamp[0] < self.clamp[1]):
            raise ValueError("clamp range must be increasing")


PRESETS = {
    "mnist": AttackConfig(epsilon=0.3, step_size=0.01, iterations=40),
    "svhn": AttackConfig(epsilon=12 / 255, step_size=3 / 255, iterations=10),
    "cifar": AttackConfig(epsilon=8 / 255, step_size=2 / 255, iterations=7),
}


def _attack_loss(net, xt, y, loss_kind):
    logits, _ = nn.forward(net, xt)
    if loss_kind == "cross-entropy":
        return T.cross_entropy(logits, y)
    # CW: push the true-class margin max(z_y - max_other, 0) downward
    return T.scale(T.mean_all(T.relu(T.margin_rows(logits, y))), -1.0)


def _grad_sign(net, x_arr, y, loss_kind):
    """sign of d(attack loss)/dx at x_arr; raises on non-finite gradient."""
    with T.Tape() as tp:
        xt = T.tensor(x_arr, requires_grad=True)
        loss = _attack_loss(net, xt, y, loss_kind)
        g = T.grad_of(loss, xt).data
        tp.close()
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("attack gradient is non-finite")
    return np.sign(g)


def _project(x_new, x0, eps, clamp):
    lo = np.maximum(x0 - x0.dtype.type(eps), x0.dtype.type(clamp[0]))
    hi = np.minimum(x0 + x0.dtype.type(eps), x0.dtype.type(clamp[1]))
    return np.clip(x_new, lo, hi)


def _check_projection(x_adv, x0, cfg):
    if len(x0) == 0:
        return
    gap = float(np.max(np.abs(x_adv - x0)))
    if gap > cfg.epsilon + 1e-6:
        raise AssertionError(f"projection violated: L-inf {gap} > "
                             f"{cfg.epsilon}")
    if float(x_adv.min()) < cfg.clamp[0] or float(x_adv.max()) > cfg.clamp[1]:
        raise AssertionError("projection violated: clamp range")


def _as_array(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, np.float32)


def _wrap_like(x_adv, x):
    return T.Tensor(x_adv) if isinstance(x, T.Tensor) else x_adv


def _pgd_batch(net, x0, y, cfg, rng):
    x = x0.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start attack needs an rng")
        x = _project(
            x + rng.uniform(-cfg.epsilon, cfg.epsilon,
                            size=x.shape).astype(x.dtype),
            x0, cfg.epsilon, cfg.clamp)
    for _ in range(cfg.iterations):
        s = _grad_sign(net, x, y, cfg.loss_kind)
        x = _project(x + x.dtype.type(cfg.step_size) * s,
                     x0, cfg.epsilon, cfg.clamp)
    return x


def pgd(net, x, y, cfg, rng=None):
    """Projected gradient ascent in the L-inf ball around x."""
    x0 = _as_array(x)
    y = np.asarray(y)
    out = np.empty_like(x0)
    for s in range(0, len(x0), _MICRO_BATCH):
        sl = slice(s, s + _MICRO_BATCH)
        out[sl] = _pgd_batch(net, x0[sl], y[sl], cfg, rng)
    _check_projection(out, x0, cfg)
    return _wrap_like(out, x)


def fgsm(net, x, y, cfg):
    """Single signed-gradient step of size epsilon."""
    one_shot = dataclasses.replace(cfg, step_size=max(cfg.epsilon, 1e-12),
                                   iterations=1, random_start=False,
                                   loss_kind="cross-entropy")
    return pgd(net, x, y, one_shot)


def cw_pgd(net, x, y, cfg, rng=None):
    """PGD iteration scheme driving the CW margin loss (kappa = 0)."""
    return pgd(net, x, y, dataclasses.replace(cfg, loss_kind="cw-margin"),
               rng=rng)


def craft(net, x, y, cfg, rng=None):
    """Dispatch on cfg.loss_kind; the generic entry used by training/eval."""
    return pgd(net, x, y, cfg, rng=rng)
