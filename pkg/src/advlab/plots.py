"""Figure rendering. The report path draws matplotlib figures to files next
to the delimited artifacts; everything is headless (Agg) and deterministic
in content."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from . import analysis  # noqa: E402

_SET_COLORS = {analysis.SET_CONSISTENT: "#2a7e3b",
               analysis.SET_INCONSISTENT: "#c23b22",
               analysis.SET_CLEAN_WRONG: "#8a8a8a"}


def _save(fig, path):
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def fig_contribution_hist(profiles, path):
    """profiles: dict model name -> ContributionProfile; shared bins."""
    shared = analysis.shared_histograms(list(profiles.values()))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (name, _), (edges, counts) in zip(profiles.items(), shared):
        ax.step(edges[:-1], counts, where="post", label=name)
    ax.set_xlabel("per-feature contribution")
    ax.set_ylabel("feature count")
    ax.set_yscale("symlog")
    ax.legend()
    ax.set_title("contribution profile of the pre-logits features")
    _save(fig, path)


def fig_scatter(rows, path):
    fig, ax = plt.subplots(figsize=(5, 5))
    for set_name, color in _SET_COLORS.items():
        xs = [r[1] for r in rows if r[3] == set_name]
        ys = [r[2] for r in rows if r[3] == set_name]
        if xs:
            ax.scatter(xs, ys, s=6, alpha=0.5, c=color, label=set_name,
                       linewidths=0)
    ax.plot([0, 1], [0, 1], lw=0.8, c="black", ls="--")
    ax.set_xlabel("ground-truth confidence, clean")
    ax.set_ylabel("ground-truth confidence, adversarial")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="upper left", fontsize=8)
    _save(fig, path)


def fig_curves(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for set_name in (analysis.SET_CONSISTENT, analysis.SET_INCONSISTENT):
        pts = [(e, v) for e, s, v in rows if s == set_name]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker="o", label=set_name, c=_SET_COLORS[set_name])
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean pairing loss")
    ax.legend()
    _save(fig, path)


def fig_eval_grid(columns, grid, path):
    fig, ax = plt.subplots(figsize=(1.4 * max(4, len(columns)), 4))
    width = 0.8 / max(1, len(grid))
    for i, (model, accs) in enumerate(grid.items()):
        xs = [j + i * width for j in range(len(columns))]
        ax.bar(xs, [accs.get(c, 0.0) for c in columns], width=width,
               label=model)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(columns))])
    ax.set_xticklabels(columns)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    _save(fig, path)


def fig_history(history, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    es = [e["epoch"] for e in history["epochs"]]
    ax1.plot(es, [e["class_loss"] for e in history["epochs"]],
             label="classification")
    ax1.plot(es, [e["alp_loss"] for e in history["epochs"]], label="pairing")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    if any("clean_acc" in e for e in history["epochs"]):
        ax2.plot(es, [e.get("clean_acc") for e in history["epochs"]],
                 label="clean")
        ax2.plot(es, [e.get("adv_acc") for e in history["epochs"]],
                 label="adversarial (probe)")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("accuracy")
        ax2.set_ylim(0, 1)
        ax2.legend(fontsize=8)
    _save(fig, path)


def fig_heatmap(heatmap, source_image, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6, 3))
    img = source_image[0] if source_image.ndim == 3 else source_image
    ax1.imshow(img, cmap="gray", vmin=0, vmax=1)
    ax1.set_title("input")
    ax1.axis("off")
    ax2.imshow(heatmap.values, cmap="inferno")
    ax2.set_title(f"saliency toward class {heatmap.class_c}")
    ax2.axis("off")
    _save(fig, path)
