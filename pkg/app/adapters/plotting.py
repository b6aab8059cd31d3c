"""
Scatter-map figures
Side-by-side real and synthetic maps colored by one feature, written as SVG.
"""

import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.dataset import ColumnKind, GeoTable  # noqa: E402
from app.core.geometry import RegionGeometry  # noqa: E402
from app.errors import SchemaError  # noqa: E402

logger = logging.getLogger(__name__)

MAX_POINTS = 1000
LEVEL_COLORS = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"]


def _subsample(table: GeoTable, rng: np.random.Generator) -> GeoTable:
    if table.N <= MAX_POINTS:
        return table
    return table.take(np.sort(rng.choice(table.N, size=MAX_POINTS, replace=False)))


def _draw_outline(ax, geom: RegionGeometry):
    for sid in geom.subregion_ids:
        for ring in geom.subregions[sid].rings:
            ax.plot(ring[:, 0], ring[:, 1], color="#cccccc", linewidth=0.5)
    for ring in geom.region.rings:
        ax.plot(ring[:, 0], ring[:, 1], color="black", linewidth=1.0)


def _scatter(ax, table: GeoTable, feature: str, value_range):
    spec = table.spec(feature)
    coords = table.coords()
    values = table.frame[feature].to_numpy()
    if spec.is_discrete:
        for i, level in enumerate(spec.levels()):
            mask = values == level
            ax.scatter(coords[mask, 0], coords[mask, 1], s=4, color=LEVEL_COLORS[i % len(LEVEL_COLORS)],
                       label=str(level).lower() if spec.kind == ColumnKind.BOOLEAN else str(level))
        ax.legend(title=feature, loc="upper right", fontsize="small", markerscale=3)
        return None
    return ax.scatter(coords[:, 0], coords[:, 1], s=4, c=values.astype(np.float64), cmap="viridis",
                      vmin=value_range[0], vmax=value_range[1])


def plot_comparison(real: GeoTable, synth: GeoTable, geom: RegionGeometry, feature: str,
                    out_path: str, seed: int = 0):
    """
    Write a real-vs-synthetic scatter map

    Args:
        real, synth: Tables to draw (up to 1000 seeded-sampled rows each)
        geom: Region whose outline is drawn
        feature: Column used for coloring
        out_path: Destination SVG
        seed: Seed of the row subsample

    Raises:
        SchemaError: Unknown or spatial feature
    """
    spec = real.spec(feature)
    if spec.is_coordinate:
        raise SchemaError(f"Cannot color by a coordinate column: {feature}")
    rng = np.random.default_rng(seed)
    real_points = _subsample(real, rng)
    synth_points = _subsample(synth, rng)

    value_range = (None, None)
    if spec.is_numeric:
        both = np.concatenate([real_points.frame[feature].to_numpy(dtype=np.float64),
                               synth_points.frame[feature].to_numpy(dtype=np.float64)])
        if both.size:
            value_range = (float(both.min()), float(both.max()))

    plt.rcParams["svg.hashsalt"] = "geosynth"
    fig, axes = plt.subplots(1, 2, figsize=(11, 5), sharex=True, sharey=True)
    mappable = None
    for ax, table, title in zip(axes, (real_points, synth_points), ("Real", "Synthetic")):
        _draw_outline(ax, geom)
        mappable = _scatter(ax, table, feature, value_range) or mappable
        ax.set_title(f"{title} (n={table.N})")
        ax.set_xlabel("longitude")
        ax.set_aspect("equal", adjustable="box")
    axes[0].set_ylabel("latitude")
    if mappable is not None:
        fig.colorbar(mappable, ax=list(axes), label=feature, shrink=0.8)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("Wrote %s", out_path)
