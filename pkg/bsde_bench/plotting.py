"""Static log-log convergence plot."""

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from scipy import stats

from .schema import ResultRow
from .utils import get_logger

logger = get_logger(__name__)

NORM_LABELS = {
    'err_Y_max_p': 'max Y error',
    'err_Z_int_L2': 'integrated Z error',
    'err_max_joint_p': 'joint max error',
}

# stable element ids; legend text stays searchable
SVG_STYLE = {
    'svg.hashsalt': 'bsde-bench',
    'svg.fonttype': 'none',
}


def legend_slopes(rows: Sequence[ResultRow]) -> Dict[str, float]:
    """Fitted log-log slope per norm."""
    log_mesh = np.log([row.mesh for row in rows])
    return {
        norm: float(stats.linregress(log_mesh, np.log([getattr(row, norm) for row in rows])).slope)
        for norm in NORM_LABELS
    }


def emit_plot(rows: Sequence[ResultRow], path: Path, title: Optional[str] = None) -> Optional[Path]:
    """
    Write error-vs-mesh lines, one per norm, with slopes in the legend.

    Levels without errors (a grid reference level) are left out. Returns the
    written path, or None when the plot is skipped (fewer than two levels,
    or a zero error somewhere).
    """
    if not rows:
        logger.info("No result rows, plot not written")
        return None
    rows = [row for row in rows if all(getattr(row, norm) is not None for norm in NORM_LABELS)]
    if len(rows) < 2:
        logger.warning(f"Plot skipped: needs at least 2 levels, got {len(rows)}")
        return None
    if any(getattr(row, norm) <= 0 for row in rows for norm in NORM_LABELS):
        logger.warning("Plot skipped: a level has zero error")
        return None

    slopes = legend_slopes(rows)
    mesh = [row.mesh for row in rows]
    with plt.rc_context(SVG_STYLE):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for norm, label in NORM_LABELS.items():
            ax.loglog(mesh, [getattr(row, norm) for row in rows], marker='o',
                      label=f"{label} (slope {slopes[norm]:.2f})")
        ax.set_xlabel("mesh |π|")
        ax.set_ylabel("error")
        ax.set_title(title or f"{rows[0].scheme} scheme, {rows[0].problem}")
        ax.grid(True, which="both")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)
    logger.info(f"Plot written: {path}")
    return Path(path)
