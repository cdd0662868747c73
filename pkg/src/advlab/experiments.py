"""Multi-run experiment driver: trains the regime grid, evaluates each model
once, and aggregates the cross-seed medians the comparisons need. Used by
the acceptance suite and available to scripts."""

import dataclasses
import os
import time

import numpy as np

from . import analysis
from . import attacks as A
from . import checkpoint, data, nn, runconfig, seeds, training

GRID_KINDS = ("RAW", "ADV", "ALP", "AALP")


def default_train_attack():
    return dataclasses.replace(A.PRESETS["mnist"], random_start=True)


def default_eval_attack():
    return dataclasses.replace(A.PRESETS["mnist"], random_start=False)


def run_single(kind, seed, train_ds, test_ds, epochs=3, batch_size=64,
               learning_rate=1e-4, alpha=1.0, train_attack=None,
               eval_attack=None, snapshot_n=200, arch="lenet_mnist",
               out_dir=None, progress=None, adv_probe="every"):
    """Train one regime and evaluate it. Returns a record dict with the
    trained net, history, accuracies, partition and contribution profile."""
    if train_attack is None and kind != "RAW":
        train_attack = default_train_attack()
    if eval_attack is None:
        eval_attack = default_eval_attack()
    regime = training.RegimeConfig(
        kind=kind, alpha=alpha, learning_rate=learning_rate,
        attack=None if kind == "RAW" else train_attack,
        epochs=epochs, batch_size=batch_size, seed=seed)
    net = nn.make_network(arch, seeds.stream_seed(seed, "init"))
    epoch_cb = None
    if progress is not None:
        def epoch_cb(epoch, entry):
            progress(f"{kind} seed {seed} epoch {epoch}: "
                     f"clean {entry.get('clean_acc', float('nan')):.3f} "
                     f"adv {entry.get('adv_acc', float('nan')):.3f} "
                     f"loss {entry['total_loss']:.4f}")
    t0 = time.time()
    net, history = training.train(net, train_ds, regime,
                                  test_dataset=test_ds,
                                  snapshot_n=snapshot_n, progress=epoch_cb,
                                  adv_probe=adv_probe)
    train_time = time.time() - t0

    xt, yt = test_ds.images, test_ds.labels
    outputs = analysis.model_outputs(net, xt, yt, eval_attack)
    lc, la = outputs
    clean_acc = float(np.mean(lc.argmax(axis=1) == yt))
    robust_acc = float(np.mean(la.argmax(axis=1) == yt))
    partition = analysis.partition_sets(net, xt, yt, eval_attack,
                                        outputs=outputs)
    contrib = analysis.feature_contribution(net, xt, yt)

    record = {"kind": kind, "seed": seed, "net": net, "history": history,
              "regime": regime, "clean_acc": clean_acc,
              "robust_acc": robust_acc, "partition": partition,
              "contrib": contrib, "outputs": outputs,
              "train_time": train_time}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint.save_checkpoint(
            net, {"seed": seed, "epoch": regime.epochs,
                  "regime": runconfig.regime_snapshot(regime)},
            os.path.join(out_dir, f"{kind.lower()}_s{seed}.ckpt"))
    return record


def run_grid(train_ds, test_ds, kinds=GRID_KINDS, seed_list=(0, 1, 2),
             out_dir=None, progress=None, **kw):
    """records[(kind, seed)] for the full regime x seed grid."""
    records = {}
    for kind in kinds:
        for seed in seed_list:
            if progress is not None:
                progress(f"grid: {kind} seed {seed}")
            records[(kind, seed)] = run_single(kind, seed, train_ds, test_ds,
                                               out_dir=out_dir, **kw)
    return records


def median_by_robustness(records, kind):
    """The seed record whose robust accuracy is the median for this kind."""
    runs = sorted((r for (k, _), r in records.items() if k == kind),
                  key=lambda r: r["robust_acc"])
    return runs[len(runs) // 2]


def median_metric(records, kind, get):
    vals = sorted(get(r) for (k, _), r in records.items() if k == kind)
    return vals[len(vals) // 2]


def grid_summary(records):
    """kind -> median metrics used by the cross-regime comparisons."""
    getters = {
        "clean_acc": lambda r: r["clean_acc"],
        "robust_acc": lambda r: r["robust_acc"],
        "consistent_prop": lambda r: r["partition"].consistent_prop_all,
        "max_contrib": lambda r: r["contrib"].max_c,
    }
    return {kind: {name: median_metric(records, kind, get)
                   for name, get in getters.items()}
            for kind in {k for k, _ in records}}
