"""Delimited artifacts: CSV schemas, graymap heatmaps, accuracy grids, and
the run-directory summary. All writes are atomic and deterministically
formatted so identical runs produce byte-identical files."""

import os

import numpy as np

from .ioutil import atomic_write_bytes, atomic_write_text


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.8g}"
    return str(v)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_contributions_csv(path, profile):
    write_csv(path, ["feature_id", "contribution"],
              [(i, c) for i, c in enumerate(profile.c)])


def write_scatter_csv(path, rows):
    write_csv(path, ["sample_id", "p_clean", "p_adv", "set"], rows)


def write_curves_csv(path, rows):
    write_csv(path, ["epoch", "set", "mean_alp"], rows)


def write_history_csv(path, history):
    header = ["epoch", "class_loss", "alp_loss", "total_loss",
              "clean_acc", "adv_acc"]
    rows = []
    for e in history["epochs"]:
        rows.append((e["epoch"], e["class_loss"], e["alp_loss"],
                     e["total_loss"], e.get("clean_acc", float("nan")),
                     e.get("adv_acc", float("nan"))))
    write_csv(path, header, rows)


def write_partition_csv(path, partition):
    header = ["set", "size", "proportion", "avg_clean_conf", "avg_adv_conf",
              "avg_class_loss", "avg_alp_loss"]
    rows = []
    for name, st in partition.stats.items():
        rows.append((name, st.size, st.size / partition.n if partition.n
                     else float("nan"),
                     st.avg_clean_conf, st.avg_adv_conf, st.avg_class_loss,
                     st.avg_alp_loss))
    rows.append(("consistent_prop_all", "", partition.consistent_prop_all,
                 "", "", "", ""))
    rows.append(("consistent_prop_clean_correct", "",
                 partition.consistent_prop_clean_correct, "", "", "", ""))
    write_csv(path, header, rows)


def write_eval_grid_csv(path, columns, grid):
    """grid: dict model name -> dict column -> accuracy."""
    header = ["model"] + list(columns)
    rows = [[model] + [grid[model].get(c, float("nan")) for c in columns]
            for model in grid]
    write_csv(path, header, rows)


def write_heatmap(path_base, heatmap):
    """Emit <base>.pgm (8-bit binary graymap, scaled to max) and <base>.csv
    (raw values)."""
    vals = np.asarray(heatmap.values, np.float64)
    top = vals.max()
    scaled = np.zeros(vals.shape, np.uint8) if top <= 0 else \
        np.round(vals / top * 255.0).astype(np.uint8)
    h, w = vals.shape
    atomic_write_bytes(path_base + ".pgm",
                       f"P5\n{w} {h}\n255\n".encode() + scaled.tobytes())
    write_csv(path_base + ".csv", [f"col{j}" for j in range(w)],
              [tuple(row) for row in vals])


def read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def summarize_run_dir(run_dir):
    """Collate a run directory into summary.txt (plus figures, see plots).

    Raises FileNotFoundError("no runs found ...") on an empty directory.
    """
    known = ["config.txt", "history.csv", "eval_grid.csv", "partition.csv",
             "contributions.csv", "scatter.csv", "curves.csv"]
    present = [f for f in known if os.path.exists(os.path.join(run_dir, f))]
    if not present:
        raise FileNotFoundError(f"no runs found in {run_dir}")
    parts = [f"run directory: {run_dir}", ""]
    for name in present:
        path = os.path.join(run_dir, name)
        if name == "config.txt":
            parts.append("== configuration ==")
            with open(path, "r", encoding="utf-8") as fh:
                parts.append(fh.read().rstrip())
        else:
            header, rows = read_csv(path)
            parts.append(f"== {name} ({len(rows)} rows) ==")
            parts.append(" | ".join(header))
            show = rows if len(rows) <= 12 else rows[:6] + [["..."]] + rows[-5:]
            for row in show:
                parts.append(" | ".join(row))
        parts.append("")
    text = "\n".join(parts)
    atomic_write_text(os.path.join(run_dir, "summary.txt"), text)
    return text
