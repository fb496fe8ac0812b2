"""Matplotlib rendering of reconstruction panel montages.

The raw PGM/PPM grids stay the canonical outputs; this module adds a
single annotated figure file so a report directory is readable at a
glance.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def render_panel_figure(panels: list[tuple[str, np.ndarray]], path,
                        dpi: int = 150) -> None:
    """Lay out (title, (C,H,W) grid) panels on a near-square figure."""
    count = len(panels)
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3.2 * rows))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.axis("off")
    for ax, (title, grid) in zip(axes, panels):
        img = np.clip(grid, 0.0, 1.0)
        if img.shape[0] == 1:
            ax.imshow(img[0], cmap="gray", vmin=0.0, vmax=1.0,
                      interpolation="nearest")
        else:
            ax.imshow(img.transpose(1, 2, 0), interpolation="nearest")
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
