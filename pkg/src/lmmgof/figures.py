"""Matplotlib rendering of test reports.

A presentation layer over :class:`~lmmgof.nulls.GofResult` and
:class:`~lmmgof.harness.RejectionTable`; nothing here feeds back into
the statistics.  The classic diagnostic is the process plot: the
observed cusum curve in black on top of the null replicates in gray,
so a lack of fit is visible as the black curve escaping the gray band.

matplotlib is imported lazily with the Agg backend so that importing
the package (or running a study) never requires a display.
"""
from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_gof_figure(result, path, max_nulls: int = 500) -> None:
    """Plot the observed process over its null ensemble and save to ``path``."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for proc in result.null_processes[:max_nulls]:
        ax.step(proc.t, proc.w, where="post", color="0.75", lw=0.5, alpha=0.55)
    obs = result.observed
    ax.step(obs.t, obs.w, where="post", color="black", lw=1.7)
    ax.axhline(0.0, color="0.45", lw=0.6, ls=":")
    ax.set_xlabel("ordering score t")
    ax.set_ylabel("cumulative sum W(t)")
    ax.set_title(
        f"{obs.variant} process, {result.scheme.kind} nulls "
        f"(p KS = {result.p_ks:.3g}, p CvM = {result.p_cvm:.3g})"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_rejection_figure(table, path, statistic: str = "cvm") -> None:
    """Bar chart of rejection rates per (scheme, process) at each alpha.

    Dashed markers show the nominal level for each alpha group, so a
    size study reads as bars near the dashes and a power study as bars
    well above them.
    """
    plt = _pyplot()
    rows = [r for r in table.rows if r.statistic == statistic]
    if not rows:
        raise ValueError(f"no rows with statistic {statistic!r}")
    alphas = sorted({r.alpha for r in rows})
    pairs = list(dict.fromkeys((r.scheme, r.process) for r in rows))
    by_key = {(r.alpha, r.scheme, r.process): r for r in rows}

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    width = 0.8 / len(pairs)
    for j, (scheme, process) in enumerate(pairs):
        xs, heights, errs = [], [], []
        for i, alpha in enumerate(alphas):
            row = by_key[(alpha, scheme, process)]
            xs.append(i - 0.4 + (j + 0.5) * width)
            heights.append(row.proportion)
            errs.append(row.se)
        ax.bar(xs, heights, width * 0.92, yerr=errs, capsize=2,
               label=f"{scheme} {process}")
    for i, alpha in enumerate(alphas):
        ax.plot([i - 0.42, i + 0.42], [alpha, alpha],
                color="black", lw=1.0, ls="--")
    ax.set_xticks(range(len(alphas)))
    ax.set_xticklabels([f"alpha = {a:g}" for a in alphas])
    ax.set_ylabel(f"rejection proportion ({statistic})")
    ax.set_title(f"{table.scenario.name}: R = {table.scenario.R}, "
                 f"M = {table.scenario.M}")
    ax.legend(fontsize=8)
    ax.set_ylim(bottom=0.0)
    if np.isfinite([r.proportion for r in rows]).all():
        ax.set_ylim(top=max(0.12, 1.08 * max(r.proportion for r in rows)))
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
