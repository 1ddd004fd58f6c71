"""2-D scatter figures of generated samples, written as SVG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .world import MAJORITY, MINORITY, ToyWorld, classify_component  # noqa: E402

TAG_COLORS = {MAJORITY: "#1f77b4", MINORITY: "#d62728"}


def scatter_svg(world: ToyWorld, cond: int, samples, path: str | Path, title: str | None = None) -> Path:
    """Samples colored by classified tag, with 2-sigma circles around minority components."""
    if world.d != 2:
        raise ValueError(f"scatter plots need d = 2 (world has d = {world.d})")
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    _, tags = classify_component(world, cond, X)
    tags = np.asarray(tags)
    # fixed salt and no date stamp keep the SVG byte-identical across runs
    with plt.rc_context({"svg.hashsalt": "minority-lab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 5))
        for tag, color in TAG_COLORS.items():
            sel = tags == tag
            if sel.any():
                ax.scatter(X[sel, 0], X[sel, 1], s=8, c=color, label=f"{tag} ({int(sel.sum())})", alpha=0.8,
                           linewidths=0)
        for comp in world.condition(cond).components:
            mu = np.asarray(comp.mean, dtype=np.float64)
            if comp.tag == MINORITY:
                ax.add_patch(plt.Circle(tuple(mu), 2 * comp.stdev, fill=False, ls="--", color=TAG_COLORS[MINORITY]))
            ax.plot(*mu, marker="+", color="k", ms=6)
        ax.set_aspect("equal")
        ax.legend(loc="best", fontsize=8)
        ax.set_title(title or f"condition {cond}")
        path = Path(path)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
