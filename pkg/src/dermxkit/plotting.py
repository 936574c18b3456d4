"""Figures: attention overlays, model comparison bars, training curves.

Colour mapping for overlays is fixed so panels are comparable across runs:
fuzzy map M and attention A use ``inferno`` over [0, 1]; the difference
A - M uses ``RdBu_r`` over [-1, 1], so zero difference is the colormap
midpoint (near white), red means the model attends more than raters.
"""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .bundle import atomic_write_bytes  # noqa: E402
from .errors import ShapeError  # noqa: E402

MAP_CMAP = "inferno"
DIFF_CMAP = "RdBu_r"
PANEL_GAP = 4

# Deterministic PNG output: no timestamps or software tags.
PNG_METADATA = {"Software": None}


def set_style(font_size=9):
    plt.rcParams.update(
        {
            "figure.dpi": 100,
            "savefig.dpi": 150,
            "font.size": font_size,
            "axes.titlesize": font_size + 1,
            "axes.labelsize": font_size,
            "axes.spines.top": False,
            "axes.spines.right": False,
            "legend.frameon": False,
            "svg.hashsalt": "dermxkit",
        }
    )


def colorize(values, cmap, vmin, vmax):
    """Map a 2-D array to uint8 RGB with a fixed colour scale."""
    values = np.asarray(values, dtype=np.float64)
    norm = np.clip((values - vmin) / (vmax - vmin), 0.0, 1.0)
    rgba = matplotlib.colormaps[cmap](norm)
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def overlay_panels(M, A):
    """RGB panels (fuzzy map, attention, difference) for same-shaped maps."""
    M = np.asarray(M, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if M.shape != A.shape or M.ndim != 2:
        raise ShapeError(f"fuzzy map {M.shape} and attention map {A.shape} must be equal 2-D shapes")
    return (
        colorize(M, MAP_CMAP, 0.0, 1.0),
        colorize(A, MAP_CMAP, 0.0, 1.0),
        colorize(A - M, DIFF_CMAP, -1.0, 1.0),
    )


def compose(panels, gap=PANEL_GAP):
    h = max(p.shape[0] for p in panels)
    w = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    x = 0
    for p in panels:
        canvas[: p.shape[0], x : x + p.shape[1]] = p
        x += p.shape[1] + gap
    return canvas


def _png_bytes(rgb):
    import io

    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def render_overlays(image, M, A, out_path):
    """Write original | M | A | A-M side by side as one PNG; returns the composite."""
    image = np.asarray(image)
    if image.shape[:2] != np.shape(M) or np.shape(M) != np.shape(A):
        raise ShapeError(
            f"image {image.shape[:2]}, fuzzy map {np.shape(M)} and attention {np.shape(A)} must share a size"
        )
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    composite = compose([image.astype(np.uint8), *overlay_panels(M, A)])
    atomic_write_bytes(out_path, _png_bytes(composite))
    return composite


def _save_fig(fig, out_path):
    import io

    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata=PNG_METADATA)
    plt.close(fig)
    atomic_write_bytes(out_path, buf.getvalue())


def comparison_bars(table, out_path, metric="F1", title=None):
    """Grouped bars: one group per row label, one bar per column (model).

    ``table`` is ``{row: {column: (mean, std)}}``; missing or nan cells are skipped.
    """
    set_style()
    rows = list(table)
    cols = sorted({c for r in rows for c in table[r]}, key=lambda c: _column_order(c))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 1.5), 3.0))
    width = 0.8 / max(len(cols), 1)
    x = np.arange(len(rows))
    for j, col in enumerate(cols):
        means, errs = [], []
        for r in rows:
            mean, std = table[r].get(col, (math.nan, math.nan))
            means.append(mean)
            errs.append(0.0 if std is None or math.isnan(std) else std)
        ax.bar(x + (j - (len(cols) - 1) / 2) * width, means, width, yerr=errs, label=col, capsize=2)
    ax.set_xticks(x)
    ax.set_xticklabels(rows, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.05)
    if title:
        ax.set_title(title)
    ax.legend(ncol=min(len(cols), 4), fontsize="small")
    _save_fig(fig, out_path)


def _column_order(name):
    order = ["Dx", "DermX", "DermX+", "Expert"]
    return (order.index(name), name) if name in order else (len(order), name)


def history_plot(history, out_path):
    """Loss terms per epoch on a log axis, validation macro F1 on a twin axis."""
    set_style()
    epochs = history.column("epoch")
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    for col in ("loss_total", "loss_d", "loss_c", "loss_a"):
        if col in history.columns:
            vals = np.asarray(history.column(col), dtype=float)
            ax.plot(epochs, np.maximum(vals, 1e-12), label=col, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    val = np.asarray(history.column("val_macro_f1"), dtype=float)
    if np.isfinite(val).any():
        ax2 = ax.twinx()
        ax2.plot(epochs, val, color="k", ls="--", lw=1.0, label="val macro F1")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("macro F1")
    ax.legend(fontsize="small")
    _save_fig(fig, out_path)
