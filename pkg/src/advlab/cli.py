"""Command line entry point.

Subcommands: train, eval, analyze, report, synth-data. The report path
renders matplotlib figures to files next to the delimited artifacts, so a
run directory is self-describing.

Thread-count environment variables must be in place before numpy loads its
BLAS, so this module imports nothing heavy at top level; every command pulls
what it needs after the environment is set.
"""

import argparse
import os
import sys


def _build_parser():
    p = argparse.ArgumentParser(
        prog="advlab",
        description="adversarial-robustness laboratory: training regimes, "
                    "white-box attacks, and model diagnostics")
    p.add_argument("--threads", type=int, default=None, metavar="N",
                   help="BLAS/OpenMP thread count (set before numpy loads)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for stable results "
                        "across machines")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, help="flat key=value file")
    t.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    t.add_argument("--subset", default=None, metavar="SPEC",
                   help="restrict the training split, e.g. first:1000 "
                        "or sample:1000")
    t.add_argument("--out", default=None, help="override out.dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval",
                       help="accuracy grid: checkpoints x attack suite")
    e.add_argument("checkpoints", nargs="+", help="checkpoint files (rows)")
    e.add_argument("--config", required=True,
                   help="supplies the data source and eval.attacks columns")
    e.add_argument("--subset", default=None, metavar="SPEC",
                   help="restrict the test split, e.g. first:1000")
    e.add_argument("--out", default=None, help="override out.dir")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="diagnostics for one checkpoint")
    a.add_argument("what", choices=("contrib", "gradcam", "sets", "scatter"),
                   help="contrib: per-feature contribution profile; "
                        "gradcam: spatial saliency heatmap; "
                        "sets: consistent/inconsistent partition; "
                        "scatter: clean-vs-adversarial confidence rows")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--subset", default=None, metavar="SPEC",
                   help="restrict the test split")
    a.add_argument("--out", default=None, help="override out.dir")
    a.add_argument("--index", type=int, default=0,
                   help="sample index for gradcam")
    a.add_argument("--toward-class", type=int, default=None,
                   help="class whose evidence gradcam maps "
                        "(default: the sample's label)")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report",
                       help="collate a run directory into summary.txt "
                            "and render figures for its artifacts")
    r.add_argument("--run", required=True, help="run directory")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("synth-data",
                       help="write the synthetic digit corpus as IDX files")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=10000)
    s.add_argument("--n-test", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def _setup_threads(args):
    n = args.threads
    if n is None and args.deterministic:
        n = 1
    if n is not None:
        if n < 1:
            raise SystemExit("error: --threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_cfg(args):
    """RunConfig from --config with command-line overrides applied."""
    from . import runconfig
    with open(args.config, "r", encoding="utf-8") as fh:
        flat = runconfig.parse_flat(fh.read())
    if getattr(args, "seed", None) is not None:
        flat["seed"] = args.seed
    if getattr(args, "out", None):
        flat["out.dir"] = args.out
    if getattr(args, "subset", None) is not None:
        flat["data.subset"] = args.subset
    return runconfig.build(flat)


def _load_data(cfg, which):
    """(train, test) datasets for the config; data.subset restricts the
    split the command consumes ('train' or 'test')."""
    from . import data, runconfig, seeds
    flat = cfg.flat
    kind = flat["data.kind"]
    if kind == "synth":
        train, test = data.load_synth(int(flat["data.n_train"]),
                                      int(flat["data.n_test"]),
                                      seeds.stream_seed(cfg.seed, "data"))
    elif kind == "idx":
        train = data.load_idx(flat["data.train_images"],
                              flat["data.train_labels"])
        test = data.load_idx(flat["data.test_images"],
                             flat["data.test_labels"])
    elif kind == "cifar":
        train = data.load_cifar_binary(flat["data.train_bin"])
        test = data.load_cifar_binary(flat["data.test_bin"])
    else:
        raise runconfig.ConfigError(f"unknown data.kind {kind!r}")
    spec = flat["data.subset"]
    if spec:
        if which == "train":
            train = data.subset(train, spec,
                                seed=seeds.stream_seed(cfg.seed, "subset", 0))
        else:
            test = data.subset(test, spec,
                               seed=seeds.stream_seed(cfg.seed, "subset", 1))
    return train, test


def cmd_train(args):
    import dataclasses

    from . import analysis, checkpoint, nn, report, runconfig, seeds, training
    from .ioutil import atomic_write_text

    cfg = _load_cfg(args)
    train_ds, test_ds = _load_data(cfg, which="train")
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)

    net = nn.make_network(cfg.arch, seeds.stream_seed(cfg.seed, "init"))

    def progress(epoch, entry):
        print(f"epoch {epoch}: loss {entry['total_loss']:.4f} "
              f"clean {entry.get('clean_acc', float('nan')):.4f} "
              f"adv(probe) {entry.get('adv_acc', float('nan')):.4f}",
              flush=True)

    net, history = training.train(net, train_ds, cfg.regime,
                                  test_dataset=test_ds, progress=progress)

    atomic_write_text(os.path.join(out, "config.txt"), cfg.serialize())
    report.write_history_csv(os.path.join(out, "history.csv"), history)
    checkpoint.save_checkpoint(
        net, {"seed": cfg.seed, "epoch": cfg.regime.epochs,
              "regime": runconfig.regime_snapshot(cfg.regime)},
        os.path.join(out, "checkpoint.ckpt"))

    epochs = history["epochs"]
    if cfg.regime.attack is not None and epochs \
            and all("snapshot" in e for e in epochs):
        eval_cfg = dataclasses.replace(cfg.regime.attack, random_start=False)
        k = len(epochs[0]["snapshot"]["alp_rows"])
        part = analysis.partition_sets(net, test_ds.images[:k],
                                       test_ds.labels[:k], eval_cfg)
        rows = analysis.track_alp_by_set(history, part)
        report.write_curves_csv(os.path.join(out, "curves.csv"), rows)

    print(f"wrote {out}/checkpoint.ckpt "
          f"({cfg.regime.kind}, {len(epochs)} epochs)")
    return 0


def cmd_eval(args):
    from . import attacks, checkpoint, nn, report

    cfg = _load_cfg(args)
    _, test_ds = _load_data(cfg, which="test")
    xt, yt = test_ds.images, test_ds.labels
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)

    columns = [name for name, _ in cfg.eval_attacks]
    grid = {}
    for path in args.checkpoints:
        net, _ = checkpoint.load_checkpoint(path)
        name = os.path.splitext(os.path.basename(path))[0]
        while name in grid:
            name += "+"
        accs = {}
        for col, acfg in cfg.eval_attacks:
            if acfg is None:
                accs[col] = nn.accuracy(net, xt, yt)
            else:
                accs[col] = nn.accuracy(net, attacks.craft(net, xt, yt, acfg),
                                        yt)
            print(f"{name} {col}: {accs[col]:.4f}", flush=True)
        grid[name] = accs
    report.write_eval_grid_csv(os.path.join(out, "eval_grid.csv"),
                               columns, grid)
    print(f"wrote {out}/eval_grid.csv "
          f"({len(grid)} models x {len(columns)} columns)")
    return 0


def cmd_analyze(args):
    from . import analysis, checkpoint, report, runconfig

    cfg = _load_cfg(args)
    net, _ = checkpoint.load_checkpoint(args.checkpoint)
    _, test_ds = _load_data(cfg, which="test")
    xt, yt = test_ds.images, test_ds.labels
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)

    if args.what == "contrib":
        profile = analysis.feature_contribution(net, xt, yt)
        path = os.path.join(out, "contributions.csv")
        report.write_contributions_csv(path, profile)
        print(f"wrote {path} (max contribution {profile.max_c:.6g}, "
              f"{profile.count_above} features above "
              f"{analysis.CONTRIB_THRESHOLD:g})")
        return 0

    if args.what == "gradcam":
        if not 0 <= args.index < len(xt):
            raise ValueError(f"--index {args.index} out of range "
                             f"for {len(xt)} test samples")
        class_c = args.toward_class if args.toward_class is not None \
            else int(yt[args.index])
        hm = analysis.gradcam(net, xt, args.index, class_c)
        base = os.path.join(out, f"gradcam_{args.index}_c{class_c}")
        report.write_heatmap(base, hm)
        from . import plots
        plots.fig_heatmap(hm, xt[args.index], base + ".png")
        print(f"wrote {base}.pgm/.csv/.png")
        return 0

    atk = runconfig.analysis_attack(cfg.flat)
    if args.what == "sets":
        part = analysis.partition_sets(net, xt, yt, atk)
        path = os.path.join(out, "partition.csv")
        report.write_partition_csv(path, part)
        print(f"wrote {path} (consistent {part.consistent_prop_all:.4f} "
              f"of all samples)")
    else:
        rows = analysis.confidence_scatter(net, xt, yt, atk)
        path = os.path.join(out, "scatter.csv")
        report.write_scatter_csv(path, rows)
        print(f"wrote {path} ({len(rows)} samples)")
    return 0


def _float(s):
    try:
        return float(s)
    except ValueError:
        return float("nan")


def cmd_report(args):
    import math

    from . import analysis, plots, report

    run = args.run
    report.summarize_run_dir(run)
    written = ["summary.txt"]

    def path_of(name):
        return os.path.join(run, name)

    if os.path.exists(path_of("history.csv")):
        header, rows = report.read_csv(path_of("history.csv"))
        entries = []
        for row in rows:
            e = dict(zip(header, row))
            entry = {"epoch": int(e["epoch"]),
                     "class_loss": _float(e["class_loss"]),
                     "alp_loss": _float(e["alp_loss"]),
                     "total_loss": _float(e["total_loss"])}
            for k in ("clean_acc", "adv_acc"):
                v = _float(e.get(k, "nan"))
                if not math.isnan(v):
                    entry[k] = v
            entries.append(entry)
        if entries:
            plots.fig_history({"epochs": entries}, path_of("history.png"))
            written.append("history.png")

    if os.path.exists(path_of("eval_grid.csv")):
        header, rows = report.read_csv(path_of("eval_grid.csv"))
        columns = header[1:]
        grid = {row[0]: {c: _float(v) for c, v in zip(columns, row[1:])}
                for row in rows}
        if grid:
            plots.fig_eval_grid(columns, grid, path_of("eval_grid.png"))
            written.append("eval_grid.png")

    if os.path.exists(path_of("contributions.csv")):
        _, rows = report.read_csv(path_of("contributions.csv"))
        profile = analysis.profile_from_values([_float(r[1]) for r in rows])
        plots.fig_contribution_hist({"model": profile},
                                    path_of("contributions.png"))
        written.append("contributions.png")

    if os.path.exists(path_of("scatter.csv")):
        _, rows = report.read_csv(path_of("scatter.csv"))
        pts = [(int(r[0]), _float(r[1]), _float(r[2]), r[3]) for r in rows]
        plots.fig_scatter(pts, path_of("scatter.png"))
        written.append("scatter.png")

    if os.path.exists(path_of("curves.csv")):
        _, rows = report.read_csv(path_of("curves.csv"))
        pts = [(int(r[0]), r[1], _float(r[2])) for r in rows]
        plots.fig_curves(pts, path_of("curves.png"))
        written.append("curves.png")

    print(f"wrote {', '.join(written)} in {run}")
    return 0


def cmd_synth(args):
    from . import data

    paths = data.write_synth_idx(args.out, args.n_train, args.n_test,
                                 args.seed)
    for split, (ip, lp) in paths.items():
        print(f"{split}: {ip} + {lp}")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    _setup_threads(args)
    from .checkpoint import CheckpointError
    from .data import DataFormatError
    from .runconfig import ConfigError
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, CheckpointError, FileNotFoundError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
