"""Training regimes: standard, adversarial, logits pairing, and the adaptive
variant (guided feature dropout + confidence-weighted pairing), plus a
KL-consistency baseline. One optimizer loop serves every regime.

Reduction guarantees (tested bit-for-bit): the adaptive regime with both of
its flags off takes exactly the steps plain pairing takes, because unit
weights go through the same weighted-mean reduction; pairing with alpha = 0
takes exactly the adversarial-only steps, because adding a zero-scaled term
is an exact float no-op for the loss and contributes exact zeros to every
gradient.
"""

import dataclasses

import numpy as np

from . import attacks as A
from . import nn, seeds
from . import tensor as T

KINDS = ("RAW", "ADV", "ALP", "AALP", "TRADES")
TRADES_BETA = 6.0


@dataclasses.dataclass(frozen=True)
class RegimeConfig:
    kind: str
    guided_dropout: bool = None
    adaptive_weighting: bool = None
    alpha: float = 1.0
    keep_fraction: float = 0.5
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    attack: A.AttackConfig = None
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regime kind {self.kind!r}")
        gd, sw = self.guided_dropout, self.adaptive_weighting
        if self.kind == "AALP":
            # both on by default; flags stay free for ablations and for the
            # reduction identity with plain pairing
            gd = True if gd is None else gd
            sw = True if sw is None else sw
        else:
            if gd or sw:
                raise ValueError(f"kind={self.kind} does not take "
                                 "guided_dropout/adaptive_weighting")
            gd, sw = False, False
        object.__setattr__(self, "guided_dropout", bool(gd))
        object.__setattr__(self, "adaptive_weighting", bool(sw))
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.keep_fraction != 0.5:
            raise ValueError("keep_fraction is fixed at 0.5")
        if self.optimizer != "adam":
            raise ValueError("only adam is provided")
        if self.kind != "RAW" and self.attack is None:
            raise ValueError(f"kind={self.kind} needs a training attack")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch_size")


@dataclasses.dataclass
class BatchTrace:
    class_loss: float
    alp_loss: float
    total_loss: float
    weights: np.ndarray       # None unless adaptive weighting was active
    mask: np.ndarray          # None unless guided dropout was active
    clean_confidence: np.ndarray


# ------------------------------------------------------------ loss operators

def alp_loss(logits_clean, logits_adv):
    """Batch mean of squared L2 distance between logits rows."""
    rows = T.sq_dist_rows(logits_clean, logits_adv)
    return T.weighted_mean(rows, np.ones(rows.data.shape[0],
                                         rows.data.dtype))


def clean_confidence(logits_clean, labels):
    """softmax(logits)[label] per sample, as a graph-free constant."""
    z = logits_clean.data if isinstance(logits_clean, T.Tensor) \
        else np.asarray(logits_clean)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("label out of range")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e[np.arange(len(labels)), labels] / e.sum(axis=1)
    return T.Tensor(probs.astype(z.dtype))


def adaptive_alp_loss(probs_clean, per_sample_alp):
    """Batch mean of probs[i] * alp[i]; never exceeds the unweighted mean."""
    w = probs_clean.data if isinstance(probs_clean, T.Tensor) \
        else np.asarray(probs_clean)
    if w.min() < 0:
        raise ValueError("negative confidence weights")
    if w.max() > 1:
        raise ValueError("confidence weights must lie in [0,1]")
    return T.weighted_mean(per_sample_alp, w)


def total_loss(ce_clean, ce_adv, adaptive_alp, alpha):
    """(ce_clean + ce_adv)/2 + alpha * adaptive_alp."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    cls = T.scale(T.add(ce_clean, ce_adv), 0.5)
    return T.add(cls, T.scale(adaptive_alp, float(alpha)))


def r_loss(grad_afc, a_fc):
    """Per-feature mean over the batch of |grad * activation|."""
    g = grad_afc.data if isinstance(grad_afc, T.Tensor) else np.asarray(grad_afc)
    a = a_fc.data if isinstance(a_fc, T.Tensor) else np.asarray(a_fc)
    if g.shape != a.shape or g.ndim != 2:
        raise ValueError("r_loss expects matching [B,d] arrays")
    return T.Tensor(np.abs(g * a).mean(axis=0))


def guided_dropout_mask(r):
    """{0,1} mask keeping exactly ceil(d/2) features: the largest r values,
    lowest index first among ties."""
    rv = r.data if isinstance(r, T.Tensor) else np.asarray(r)
    d = rv.size
    if d < 2:
        raise ValueError("mask needs at least 2 features")
    keep = (d + 1) // 2
    order = np.lexsort((np.arange(d), -rv))
    mask = np.zeros(d, np.float32)
    mask[order[:keep]] = 1.0
    return T.Tensor(mask)


def kl_divergence(logits_p, logits_q):
    """Batch mean KL(softmax(p) || softmax(q)), differentiable in both."""
    p = T.softmax(logits_p)
    diff = T.sub(T.log_softmax(logits_p), T.log_softmax(logits_q))
    return T.mean_all(T.sum_rows(T.mul(p, diff)))


# --------------------------------------------------------------- optimizer

class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        out = {"t": np.array([self.t], np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out


# ------------------------------------------------------------ training loop

def _forward_ce(net, x_arr, y, mask=None):
    xt = T.tensor(x_arr)
    logits, a_fc = nn.forward(net, xt, mask=mask)
    return logits, a_fc, T.cross_entropy(logits, y)


def train_step(net, batch, regime, opt, attack_rng=None):
    """One optimizer step. Order: craft adversary (maskless net), maskless
    clean forward, optional mask from the feature-contribution scores plus
    masked recompute of both forwards, loss assembly, parameter update."""
    x, y = batch
    x = np.ascontiguousarray(x, np.float32)
    y = np.asarray(y)

    x_adv = None
    if regime.kind != "RAW":
        x_adv = A.craft(net, x, y, regime.attack, rng=attack_rng)

    mask_arr = None
    weights = None
    with T.Tape() as tp:
        logits_c, a_fc, ce_c = _forward_ce(net, x, y)

        if regime.guided_dropout:
            g_afc = T.grad_of(ce_c, a_fc)
            r = r_loss(g_afc, a_fc)
            mask_arr = guided_dropout_mask(r).data
            logits_c, a_fc, ce_c = _forward_ce(net, x, y, mask=mask_arr)

        conf = clean_confidence(logits_c, y).data

        if regime.kind == "RAW":
            loss = ce_c
            class_val = float(ce_c.data)
            alp_val = 0.0
        else:
            logits_a, _, ce_a = _forward_ce(net, x_adv, y, mask=mask_arr)
            if regime.kind == "TRADES":
                loss = T.add(ce_c, T.scale(kl_divergence(logits_c, logits_a),
                                           TRADES_BETA))
                class_val = float(ce_c.data)
            elif regime.kind == "ADV":
                loss = T.scale(T.add(ce_c, ce_a), 0.5)
                class_val = float(loss.data)
            else:
                rows = T.sq_dist_rows(logits_c, logits_a)
                if regime.kind == "ALP":
                    pair = T.weighted_mean(rows, np.ones(len(y), np.float32))
                else:  # AALP
                    weights = conf if regime.adaptive_weighting \
                        else np.ones(len(y), np.float32)
                    pair = T.weighted_mean(rows, weights)
                loss = total_loss(ce_c, ce_a, pair, regime.alpha)
                class_val = float(T.scale(T.add(ce_c, ce_a), 0.5).data)
            with T.no_grad():
                alp_val = float(alp_loss(logits_c.detach(),
                                         logits_a.detach()).data)

        total_val = float(loss.data)
        if not np.isfinite(total_val):
            raise RuntimeError(
                f"non-finite loss {total_val} (kind={regime.kind}, "
                f"class={class_val}, alp={alp_val})")

        net.zero_grads()
        T.backward(loss)
        tp.close()
    opt.step()

    return BatchTrace(class_loss=class_val, alp_loss=alp_val,
                      total_loss=total_val, weights=weights, mask=mask_arr,
                      clean_confidence=conf)


def _pairing_snapshot(net, x, y, attack_cfg):
    """Frozen-net per-sample diagnostics on a probe subset: ground-truth
    confidence on clean and adversarial inputs, correctness flags, and the
    per-sample pairing distance."""
    x_adv = A.craft(net, x, y, attack_cfg) if attack_cfg is not None else x
    with T.no_grad():
        with T.Tape() as tp:
            lc, _ = nn.forward(net, T.tensor(x))
            la, _ = nn.forward(net, T.tensor(x_adv))
            p_clean = clean_confidence(lc, y).data.copy()
            p_adv = clean_confidence(la, y).data.copy()
            rows = ((lc.data - la.data) ** 2).sum(axis=1).copy()
            pred_c = lc.data.argmax(axis=1).copy()
            pred_a = la.data.argmax(axis=1).copy()
            tp.close()
    return {"p_clean": p_clean, "p_adv": p_adv, "alp_rows": rows,
            "clean_correct": pred_c == y, "adv_correct": pred_a == y}


def train(net, dataset, regime, test_dataset=None, snapshot_n=200,
          progress=None, adv_probe="every"):
    """Run the regime. Returns (net, history).

    history["epochs"][e] records mean loss components, full-test clean
    accuracy, adversarial accuracy on a fixed probe subset (the first
    snapshot_n test samples), and that subset's per-sample pairing snapshot.
    Adversarial evaluation reuses the training attack with random_start off.
    adv_probe="final" crafts the probe adversaries only after the last
    epoch (the snapshot and adv_acc keys are then absent earlier), which
    drops the main per-epoch evaluation cost for long sweeps; "none" skips
    the probe entirely for callers that evaluate separately afterwards.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if adv_probe not in ("every", "final", "none"):
        raise ValueError("adv_probe must be 'every', 'final', or 'none'")
    opt = Adam(net.parameters(), lr=regime.learning_rate)
    history = {"epochs": []}
    n = len(dataset)
    eval_cfg = None
    if regime.attack is not None:
        eval_cfg = dataclasses.replace(regime.attack, random_start=False)

    for epoch in range(regime.epochs):
        perm = seeds.stream_rng(regime.seed, "shuffle", epoch).permutation(n)
        sums = np.zeros(3)
        steps = 0
        for step, s in enumerate(range(0, n, regime.batch_size)):
            idx = perm[s:s + regime.batch_size]
            rng = seeds.stream_rng(regime.seed, "attack", epoch, step) \
                if (regime.attack is not None and regime.attack.random_start) \
                else None
            trace = train_step(net, (dataset.images[idx], dataset.labels[idx]),
                               regime, opt, attack_rng=rng)
            sums += (trace.class_loss, trace.alp_loss, trace.total_loss)
            steps += 1
        entry = {"epoch": epoch,
                 "class_loss": sums[0] / steps,
                 "alp_loss": sums[1] / steps,
                 "total_loss": sums[2] / steps}
        if test_dataset is not None and len(test_dataset):
            xt, yt = test_dataset.images, test_dataset.labels
            entry["clean_acc"] = nn.accuracy(net, xt, yt)
            if adv_probe == "every" or (adv_probe == "final"
                                        and epoch == regime.epochs - 1):
                k = min(snapshot_n, len(test_dataset))
                snap = _pairing_snapshot(net, xt[:k], yt[:k], eval_cfg)
                entry["snapshot"] = snap
                # adversarial accuracy on the fixed probe subset; the
                # full-set number is a final-evaluation concern, not a
                # per-epoch one
                entry["adv_acc"] = float(snap["adv_correct"].mean())
        history["epochs"].append(entry)
        if progress is not None:
            progress(epoch, entry)
    return net, history
