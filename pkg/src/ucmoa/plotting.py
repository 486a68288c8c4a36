"""SVG line plots for CLI reports.

Each series becomes one line whose SVG group id is ``series-<name>``.  Output is
byte-stable: no date metadata and a fixed hash salt for generated ids.
"""

from __future__ import annotations

from typing import Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "ucmoa", "svg.fonttype": "none"}


def line_svg(
    path,
    series: Mapping[str, Tuple[Sequence[float], Sequence[float]]],
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> None:
    """Write one marked line per ``series`` entry to ``path``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 4.0))
        try:
            for name, (x, y) in series.items():
                (line,) = ax.plot(np.asarray(x, dtype=float), np.asarray(y, dtype=float), marker="o", ms=3, label=name)
                line.set_gid(f"series-{name}")
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            if title:
                ax.set_title(title)
            if series:
                ax.legend(fontsize="small")
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
