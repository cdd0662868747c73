"""Diagnostics over a frozen network: per-feature contribution profiles,
input-space saliency heatmaps, the consistent/inconsistent partition of the
test set with its summary statistics, confidence scatter data, and pairing
curves extracted from training history.

Everything here is read-only over the network and deterministically
aggregated, so repeated runs produce identical artifacts.
"""

import dataclasses

import numpy as np

from . import attacks as A
from . import nn
from . import tensor as T

CONTRIB_THRESHOLD = 1e-3
HIST_BINS = 50
_BATCH = 256

SET_CONSISTENT = "consistent"
SET_INCONSISTENT = "inconsistent"
SET_CLEAN_WRONG = "clean_wrong"


@dataclasses.dataclass
class ContributionProfile:
    c: np.ndarray            # [d] nonnegative per-feature contribution
    hist_edges: np.ndarray   # 51 edges, 0 .. max(c)
    hist_counts: np.ndarray  # 50 counts, sum == d
    max_c: float
    count_above: int         # features with c > CONTRIB_THRESHOLD


@dataclasses.dataclass
class SetStats:
    size: int
    avg_clean_conf: float
    avg_adv_conf: float
    avg_class_loss: float    # CE on the adversarial inputs
    avg_alp_loss: float      # per-sample squared logit distance


@dataclasses.dataclass
class SetPartition:
    consistent: np.ndarray
    inconsistent: np.ndarray
    clean_wrong: np.ndarray
    stats: dict              # set name -> SetStats
    n: int
    consistent_prop_all: float          # |C| / N
    consistent_prop_clean_correct: float  # |C| / (|C| + |I|)


@dataclasses.dataclass
class Heatmap:
    values: np.ndarray       # [h,w] nonnegative
    source_index: int
    class_c: int


def _hist(c, max_c=None):
    top = float(np.max(c)) if max_c is None else float(max_c)
    if top <= 0:
        top = 1.0
    edges = np.linspace(0.0, top, HIST_BINS + 1)
    counts, _ = np.histogram(c, bins=edges)
    # values exactly at the top edge belong to the last bin already;
    # anything above a shared max (other model's scale) is clipped in
    counts[-1] += int(np.sum(c > top))
    return edges, counts


def profile_from_values(c):
    """ContributionProfile from a raw contribution vector."""
    c = np.asarray(c, np.float64)
    if c.ndim != 1 or len(c) == 0:
        raise ValueError("contribution vector must be 1-d and non-empty")
    edges, counts = _hist(c)
    return ContributionProfile(c=c, hist_edges=edges, hist_counts=counts,
                               max_c=float(c.max()),
                               count_above=int(np.sum(c > CONTRIB_THRESHOLD)))


def feature_contribution(net, x_arr, y_arr, batch_size=_BATCH):
    """Mean over samples of |d CE / d a_fc| per feature."""
    if len(x_arr) == 0:
        raise ValueError("empty input")
    d = net.a_fc_dim
    total = np.zeros(d, np.float64)
    count = 0
    for s in range(0, len(x_arr), batch_size):
        xb = x_arr[s:s + batch_size]
        yb = y_arr[s:s + batch_size]
        with T.Tape() as tp:
            logits, a_fc = nn.forward(net, T.tensor(xb))
            ce = T.cross_entropy(logits, yb)
            g = T.grad_of(ce, a_fc).data
            # cross_entropy is a batch mean; scaling by B recovers the
            # per-sample gradient rows
            total += np.abs(g * np.float32(len(xb))).sum(axis=0)
            tp.close()
        count += len(xb)
    return profile_from_values(total / count)


def shared_histograms(profiles):
    """Re-bin several profiles over one shared 0..global-max axis so counts
    are comparable across models."""
    top = max(p.max_c for p in profiles)
    out = []
    for p in profiles:
        edges, counts = _hist(p.c, max_c=top)
        out.append((edges, counts))
    return out


def gradcam(net, x_arr, index, class_c, layer="conv_last"):
    """relu(channel-sum(d CE_c / d act * act)) at the last conv block's
    spatial resolution, for one sample."""
    if layer != "conv_last":
        raise ValueError(f"layer {layer!r} is not a registered spatial "
                         "capture site")
    x = np.asarray(x_arr[index:index + 1], np.float32)
    with T.Tape() as tp:
        logits, act = nn.last_conv_activation(net, T.tensor(x))
        ce = T.cross_entropy(logits, np.array([class_c]))
        g = T.grad_of(ce, act).data
        prod = (g.astype(np.float64) * act.data.astype(np.float64))[0]
        heat = np.maximum(prod.sum(axis=-1), 0.0)
        tp.close()
    return Heatmap(values=heat, source_index=int(index), class_c=int(class_c))


def _per_sample_ce(logits, labels):
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    return lse - z[np.arange(len(labels)), labels]


def model_outputs(net, x_arr, y_arr, attack_cfg, batch_size=_BATCH):
    """Clean and adversarial logits over a dataset, deterministic."""
    if attack_cfg is not None:
        attack_cfg = dataclasses.replace(attack_cfg, random_start=False)
        x_adv = A.craft(net, x_arr, y_arr, attack_cfg)
    else:
        x_adv = x_arr
    lc = np.empty((len(x_arr), net.num_classes), np.float32)
    la = np.empty_like(lc)
    with T.no_grad():
        for s in range(0, len(x_arr), batch_size):
            with T.Tape() as tp:
                lc[s:s + batch_size] = nn.forward(
                    net, T.tensor(x_arr[s:s + batch_size]))[0].data
                la[s:s + batch_size] = nn.forward(
                    net, T.tensor(x_adv[s:s + batch_size]))[0].data
                tp.close()
    return lc, la


def _gt_conf(logits, labels):
    e = np.exp(logits.astype(np.float64)
               - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p[np.arange(len(labels)), labels]


def partition_sets(net, x_arr, y_arr, attack_cfg, outputs=None):
    """Split samples by (clean correct?, adversarial correct?) and compute
    the per-set confidence/loss statistics. Pass outputs=(lc, la) to reuse
    already-computed logits."""
    lc, la = outputs if outputs is not None else \
        model_outputs(net, x_arr, y_arr, attack_cfg)
    y = np.asarray(y_arr)
    clean_ok = lc.argmax(axis=1) == y
    adv_ok = la.argmax(axis=1) == y
    consistent = np.flatnonzero(clean_ok & adv_ok)
    inconsistent = np.flatnonzero(clean_ok & ~adv_ok)
    clean_wrong = np.flatnonzero(~clean_ok)

    p_clean = _gt_conf(lc, y)
    p_adv = _gt_conf(la, y)
    ce_adv = _per_sample_ce(la, y)
    alp_rows = ((lc.astype(np.float64) - la.astype(np.float64)) ** 2).sum(axis=1)

    def stats(idx):
        if len(idx) == 0:
            return SetStats(0, float("nan"), float("nan"), float("nan"),
                            float("nan"))
        return SetStats(size=int(len(idx)),
                        avg_clean_conf=float(p_clean[idx].mean()),
                        avg_adv_conf=float(p_adv[idx].mean()),
                        avg_class_loss=float(ce_adv[idx].mean()),
                        avg_alp_loss=float(alp_rows[idx].mean()))

    n = len(y)
    n_clean_ok = len(consistent) + len(inconsistent)
    return SetPartition(
        consistent=consistent, inconsistent=inconsistent,
        clean_wrong=clean_wrong,
        stats={SET_CONSISTENT: stats(consistent),
               SET_INCONSISTENT: stats(inconsistent),
               SET_CLEAN_WRONG: stats(clean_wrong)},
        n=n,
        consistent_prop_all=len(consistent) / n if n else float("nan"),
        consistent_prop_clean_correct=(len(consistent) / n_clean_ok
                                       if n_clean_ok else float("nan")))


def set_labels(partition):
    """Per-sample set name array from a partition."""
    out = np.empty(partition.n, dtype=object)
    out[partition.consistent] = SET_CONSISTENT
    out[partition.inconsistent] = SET_INCONSISTENT
    out[partition.clean_wrong] = SET_CLEAN_WRONG
    return out


def confidence_scatter(net, x_arr, y_arr, attack_cfg, outputs=None):
    """Rows (sample_id, p_clean, p_adv, set) for every sample."""
    if outputs is None:
        outputs = model_outputs(net, x_arr, y_arr, attack_cfg)
    part = partition_sets(net, x_arr, y_arr, attack_cfg, outputs=outputs)
    lc, la = outputs
    y = np.asarray(y_arr)
    p_clean = _gt_conf(lc, y)
    p_adv = _gt_conf(la, y)
    labels = set_labels(part)
    return [(i, float(p_clean[i]), float(p_adv[i]), labels[i])
            for i in range(len(y))]


def track_alp_by_set(history, final_partition):
    """Per-epoch mean pairing loss for the consistent and inconsistent sets,
    using the per-sample snapshots recorded during training and a partition
    computed on the same probe samples."""
    epochs = history.get("epochs", [])
    if not epochs or any("snapshot" not in e for e in epochs):
        raise ValueError("history lacks per-sample snapshots")
    k = len(epochs[0]["snapshot"]["alp_rows"])
    cons = final_partition.consistent[final_partition.consistent < k]
    inc = final_partition.inconsistent[final_partition.inconsistent < k]
    rows = []
    for e in epochs:
        alp = e["snapshot"]["alp_rows"]
        for name, idx in ((SET_CONSISTENT, cons), (SET_INCONSISTENT, inc)):
            mean = float(alp[idx].mean()) if len(idx) else float("nan")
            rows.append((int(e["epoch"]), name, mean))
    return rows
