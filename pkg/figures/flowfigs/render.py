"""Panel renderers: density contours with drift quivers, top-LV segment
overlays, alignment histograms, spectrum-vs-index plots, and side-by-side
perturbed/unperturbed KDE panels.

Deterministic: fixed styles, no timestamps; byte-identical inputs give
byte-identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .spec import FigureSpec, read_csv, read_kde, read_lyapunov

CURVE_STYLE = {"color": "red", "lw": 1.2}
LV_STYLE = {"color": "black", "lw": 0.8}
PNG_METADATA = {"Software": "flowfigs"}


def render(kind, spec: FigureSpec):
    """Render one figure of the given kind; returns the output path."""
    if kind != spec.kind:
        raise ValueError(f"spec kind {spec.kind!r} does not match {kind!r}")
    fig = _DRAW[kind](spec)
    fig.savefig(spec.output, dpi=spec.dpi, metadata=PNG_METADATA)
    plt.close(fig)
    return spec.output


def _new_axes(spec, ncols=1, width=4.2):
    fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, 4.0),
                             squeeze=False)
    return fig, axes[0]


def _apply_limits(ax, spec):
    if spec.axis_limits:
        x0, x1, y0, y1 = spec.axis_limits
        ax.set_xlim(x0, x1)
        ax.set_ylim(y0, y1)


def _overlay_curve(ax, spec):
    path = spec.overlays.get("curve")
    if not path:
        return
    cols = read_csv(path, ("x0", "x1"))
    ax.plot(cols["x0"], cols["x1"], **CURVE_STYLE)


def _overlay_lv_segments(ax, path, half_len):
    cols = read_csv(path, ("x0", "x1", "e0", "e1"))
    for x, y, ex, ey in zip(cols["x0"], cols["x1"], cols["e0"], cols["e1"]):
        ax.plot([x - half_len * ex, x + half_len * ex],
                [y - half_len * ey, y + half_len * ey], **LV_STYLE)


def _draw_density(spec):
    xs, ys, z = read_kde(spec.inputs["kde"])
    fig, (ax,) = _new_axes(spec)
    ax.contourf(xs, ys, z, levels=24, cmap="viridis")
    _overlay_curve(ax, spec)
    lv = spec.overlays.get("lv_segments")
    if lv:
        _overlay_lv_segments(ax, lv, 0.5 * spec.lv_length)
    quiver = spec.overlays.get("quiver")
    if quiver:
        cols = read_csv(quiver, ("x0", "x1", "v0", "v1"))
        ax.quiver(cols["x0"], cols["x1"], cols["v0"], cols["v1"],
                  color="white", width=0.003)
    _apply_limits(ax, spec)
    if spec.titles:
        ax.set_title(spec.titles[0])
    fig.tight_layout()
    return fig


def _draw_kde_panels(spec):
    paths = spec.inputs["kde_panels"]
    fig, axes = _new_axes(spec, ncols=len(paths))
    for i, (ax, path) in enumerate(zip(axes, paths)):
        xs, ys, z = read_kde(path)
        ax.contourf(xs, ys, z, levels=24, cmap="viridis")
        _overlay_curve(ax, spec)
        _apply_limits(ax, spec)
        if i < len(spec.titles):
            ax.set_title(spec.titles[i])
    fig.tight_layout()
    return fig


def _draw_quiver(spec):
    cols = read_csv(spec.inputs["field"], ("t", "x0", "x1", "v0", "v1"))
    ts = np.unique(cols["t"])
    fig, axes = _new_axes(spec, ncols=len(ts))
    for i, (ax, t) in enumerate(zip(axes, ts)):
        sel = cols["t"] == t
        ax.quiver(cols["x0"][sel], cols["x1"][sel], cols["v0"][sel],
                  cols["v1"][sel], width=0.004)
        _overlay_curve(ax, spec)
        _apply_limits(ax, spec)
        title = (spec.titles[i] if i < len(spec.titles) else f"t = {t:g}")
        ax.set_title(title)
    fig.tight_layout()
    return fig


def _draw_lv_overlay(spec):
    fig, (ax,) = _new_axes(spec)
    cols = read_csv(spec.inputs["lv_overlay"], ("x0", "x1", "e0", "e1"))
    ax.plot(cols["x0"], cols["x1"], ".", ms=2.0, color="C0", zorder=1)
    _overlay_lv_segments(ax, spec.inputs["lv_overlay"], 0.5 * spec.lv_length)
    _overlay_curve(ax, spec)
    _apply_limits(ax, spec)
    if spec.titles:
        ax.set_title(spec.titles[0])
    fig.tight_layout()
    return fig


def _draw_alignment_hist(spec):
    cols = read_csv(spec.inputs["alignment"], ("path_id", "a"))
    fig, (ax,) = _new_axes(spec)
    ax.hist(cols["a"], bins=spec.bins, range=(0.0, 1.0), color="C3",
            edgecolor="black", lw=0.3)
    ax.set_xlabel("|<score, top LV>|")
    ax.set_ylabel("count")
    ax.annotate(f"n = {len(cols['a'])}", xy=(0.95, 0.95),
                xycoords="axes fraction", ha="right", va="top")
    if spec.titles:
        ax.set_title(spec.titles[0])
    fig.tight_layout()
    return fig


def _draw_le_spectrum(spec):
    data = read_lyapunov(spec.inputs["lyapunov"])
    lam = np.asarray(data["mean_exponents"], dtype=float)
    fig, (ax,) = _new_axes(spec)
    ax.plot(np.arange(1, len(lam) + 1), lam, "o-", ms=4)
    ax.set_xlabel("index")
    ax.set_ylabel("finite-time Lyapunov exponent")
    ax.set_xticks(np.arange(1, len(lam) + 1))
    if spec.titles:
        ax.set_title(spec.titles[0])
    fig.tight_layout()
    return fig


_DRAW = {
    "density": _draw_density,
    "kde-panels": _draw_kde_panels,
    "quiver": _draw_quiver,
    "lv-overlay": _draw_lv_overlay,
    "alignment-hist": _draw_alignment_hist,
    "le-spectrum": _draw_le_spectrum,
}
