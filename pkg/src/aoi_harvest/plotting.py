"""Static figures for CLI result tables.

Only the non-interactive Agg backend is used, so figures render the same
on a headless machine. Each function takes the row dictionaries the CLI
writes to its delimited output and saves one PNG.
"""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}
# PNG metadata without a version string keeps files byte-stable across installs
PNG_METADATA = {"Software": None}


def _num(value) -> float:
    if value in (None, ""):
        return math.nan
    return float(value)


def _by_policy(rows: Sequence[dict]) -> dict[str, list[dict]]:
    groups: dict[str, list[dict]] = defaultdict(list)
    for row in rows:
        groups[row.get("label") or row["policy"]].append(row)
    return groups


def plot_aoi_sweep(rows: Sequence[dict], path: str, title: str = "") -> None:
    """Average age against ``U alpha``: analysis as lines, simulation as error bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, (name, group) in enumerate(sorted(_by_policy(rows).items())):
            group = sorted(group, key=lambda r: _num(r["u_alpha"]))
            x = [_num(r["u_alpha"]) for r in group]
            color = f"C{k}"
            approx = [_num(r.get("avg_aoi_approx")) for r in group]
            exact = [_num(r.get("avg_aoi_exact")) for r in group]
            sim = [_num(r.get("sim_mean")) for r in group]
            err = [3 * _num(r.get("sim_stderr")) for r in group]
            if any(math.isfinite(v) for v in approx):
                ax.plot(x, approx, "-", color=color, label=f"{name} approx")
            if any(math.isfinite(v) for v in exact):
                ax.plot(x, exact, "o", mfc="none", color=color, label=f"{name} exact")
            if any(math.isfinite(v) for v in sim):
                ax.errorbar(x, sim, yerr=err, fmt="x", color=color, capsize=2, label=f"{name} sim (3 SE)")
        ax.set_xlabel(r"$U\alpha$")
        ax.set_ylabel("average AoI [slots]")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)


def plot_metric_sweep(rows: Sequence[dict], metric: str, path: str, ylabel: str | None = None) -> None:
    """One column of the result table against ``U alpha``, one line per policy."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, group in sorted(_by_policy(rows).items()):
            group = sorted(group, key=lambda r: _num(r["u_alpha"]))
            ax.plot([_num(r["u_alpha"]) for r in group], [_num(r.get(metric)) for r in group], "o-", label=name)
        ax.set_xlabel(r"$U\alpha$")
        ax.set_ylabel(ylabel or metric)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)


def plot_policies(policies: dict[str, Sequence[float]], path: str) -> None:
    """Transmit probability per battery level for each named policy."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, probs in policies.items():
            ax.step(range(1, len(probs) + 1), probs, where="mid", label=name)
        ax.set_xlabel("battery level")
        ax.set_ylabel("transmit probability")
        ax.set_ylim(-0.05, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)
