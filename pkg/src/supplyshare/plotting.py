"""Figure emission: per-population panels of estimates with survey overlays.

One figure per population, one panel per method. Each panel shows the three
sector medians with shaded 80% and 95% bands and the survey observations as
points with vertical bars of plus/minus one standard error. SVGs are written
with a fixed hash salt and no creation date, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .data_model import SECTOR_ORDER, CleanDataset
from .posterior_summary import PosteriorSummary

DEFAULT_COLORS = ("#1f6eb4", "#7f7f7f", "#d4a017")  # public blue, medical grey, other gold
SECTOR_TITLES = {"Public": "Public", "Commercial_medical": "Commercial medical", "Other": "Other"}


def plot_population(
    summary: PosteriorSummary,
    dataset: CleanDataset | None,
    population: str,
    colors: tuple[str, str, str] = DEFAULT_COLORS,
) -> Figure:
    """Build the panel figure for one population."""
    q = summary.populations.index(population)
    n_methods = len(summary.methods)
    fig = Figure(figsize=(7.0, 2.6 * n_methods), dpi=100)
    axes = fig.subplots(n_methods, 1, squeeze=False)[:, 0]
    years = summary.years

    obs_rows = []
    if dataset is not None:
        obs_rows = [
            o for o in dataset.observations if dataset.population_of(o) == population
        ]

    for m, method in enumerate(summary.methods):
        ax = axes[m]
        for s, sector in enumerate(SECTOR_ORDER):
            color = colors[s]
            ax.fill_between(
                years,
                summary.lower95[q, :, m, s],
                summary.upper95[q, :, m, s],
                color=color,
                alpha=0.15,
                linewidth=0,
            )
            ax.fill_between(
                years,
                summary.lower80[q, :, m, s],
                summary.upper80[q, :, m, s],
                color=color,
                alpha=0.30,
                linewidth=0,
            )
            ax.plot(
                years,
                summary.median[q, :, m, s],
                color=color,
                linewidth=1.6,
                label=SECTOR_TITLES[sector.value],
            )
            points = [o for o in obs_rows if o.method == method and o.sector == sector]
            if points:
                xs = [o.avg_year for o in points]
                ys = [o.proportion for o in points]
                errs = [o.se for o in points]
                ax.errorbar(
                    xs,
                    ys,
                    yerr=errs,
                    fmt="o",
                    color=color,
                    markersize=4,
                    elinewidth=1.1,
                    capsize=0,
                    linestyle="none",
                )
        ax.set_ylim(0.0, 1.0)
        ax.set_xlim(float(years[0]), float(years[-1]))
        ax.set_ylabel("supply share")
        ax.set_title(method.value, fontsize=10)
        if m == 0:
            ax.legend(loc="upper right", fontsize=8, frameon=False)
    axes[-1].set_xlabel("year")
    fig.suptitle(population, fontsize=12)
    fig.subplots_adjust(hspace=0.45, top=1.0 - 0.25 / n_methods)
    return fig


def save_population_figures(
    summary: PosteriorSummary,
    dataset: CleanDataset | None,
    out_dir,
    colors: tuple[str, str, str] = DEFAULT_COLORS,
) -> list[Path]:
    """Write one SVG per population; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for population in summary.populations:
        fig = plot_population(summary, dataset, population, colors=colors)
        slug = population.replace("|", "_").replace(" ", "_").replace("/", "_")
        path = out_dir / f"{slug}.svg"
        with matplotlib.rc_context({"svg.hashsalt": slug}):
            fig.savefig(path, format="svg", metadata={"Date": None})
        written.append(path)
    return written
