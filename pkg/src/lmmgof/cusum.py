"""Cumulative-sum residual processes and their test statistics.

Each process cumulates weighted residuals over observations ordered by a
score and is scaled by the square root of the cluster count:

    W(t) = n^{-1/2} sum_{ij} v_ij 1{s_ij <= t}

The choice of residual and score determines what the process can detect.
Ordering transformed residuals by the individual predictions (variant
``O``) probes the whole functional form, fixed and random parts
together.  Ordering individual residuals by the cluster predictions
(variant ``F``) isolates the fixed-effects part: the estimate of beta is
consistent whenever the fixed design is right, so this process stays
centered even under a wrong random-effect design.  Restricting the
ordering score to a subset of fixed-effect columns (``F-subset``) points
at the covariates responsible for a lack of fit.

Under a correct model each process fluctuates around zero, and the
Kolmogorov-Smirnov and Cramer-von Mises functionals over its jump grid
turn the fluctuation into test statistics.  ``covariance_KN`` evaluates
the plug-in asymptotic covariance of the F process at a pair of
thresholds, which the null-approximation schemes are validated against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .data import ClusteredDataset
from .estimation import FittedLmm
from .transform import (
    ResidualBundle,
    TransformKit,
    VariantMissing,
    weight_matrices,
)


class LengthMismatch(ValueError):
    """Residual values and ordering scores disagree in length."""


class InvalidSubset(ValueError):
    """Fixed-effect column subset is empty, duplicated, or out of range."""


@dataclass
class CusumProcess:
    """A cumulative-sum process evaluated on its own jump grid.

    ``t`` holds the N sorted ordering scores including duplicates; ``w``
    holds W(t) at each slot, where every slot of a tie group repeats the
    value accumulated over the whole group.  Duplicates therefore weight
    the Cramer-von Mises sum by multiplicity while leaving the
    Kolmogorov-Smirnov maximum untouched.
    """

    t: NDArray[np.float64]
    w: NDArray[np.float64]
    variant: str
    n: int

    def value_at(self, x: float) -> float:
        """Step-function evaluation with <= semantics; 0 below min(t)."""
        idx = int(np.searchsorted(self.t, x, side="right")) - 1
        return 0.0 if idx < 0 else float(self.w[idx])


@dataclass
class TestStatistics:
    """Kolmogorov-Smirnov and Cramer-von Mises functionals of a process."""

    ks: float
    cvm: float


def cusum_from(
    values: NDArray[np.float64],
    scores: NDArray[np.float64],
    n: int,
    variant: str = "raw",
) -> CusumProcess:
    """Build the process from flat per-observation values and scores.

    Ties in ``scores`` are accumulated before any value is recorded, so
    the process is invariant to the input ordering of observations.
    """
    values = np.asarray(values, dtype=float).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    if values.shape[0] != scores.shape[0]:
        raise LengthMismatch(
            f"{values.shape[0]} residual values vs {scores.shape[0]} scores"
        )
    if n < 1:
        raise ValueError("cluster count must be at least 1")
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(scores))):
        raise ValueError("residual values and scores must be finite")
    order = np.argsort(scores, kind="stable")
    t = scores[order]
    cum = np.cumsum(values[order]) / math.sqrt(n)
    uniq, inverse = np.unique(t, return_inverse=True)
    last = np.searchsorted(t, uniq, side="right") - 1
    return CusumProcess(t=t, w=cum[last[inverse]], variant=variant, n=int(n))


def _weighted(bundle: ResidualBundle, residual_lists) -> NDArray[np.float64]:
    return np.concatenate(
        [s @ e for s, e in zip(bundle.S, residual_lists)]
    )


def process_O(
    bundle: ResidualBundle, kit: TransformKit, variant: str = "block"
) -> CusumProcess:
    """Cusum of weighted transformed residuals ordered by yhat^I."""
    kit.require(variant)
    if variant not in bundle.transformed:
        raise VariantMissing(
            f"bundle has no transformed residuals for the {variant!r} variant;"
            " call transform_residuals first"
        )
    values = _weighted(bundle, bundle.transformed[variant])
    scores = np.concatenate(bundle.yhat_I)
    tag = "O" if variant == "full" else "O-block"
    return cusum_from(values, scores, len(bundle.e_P), variant=tag)


def process_F(bundle: ResidualBundle, flavor: str = "individual") -> CusumProcess:
    """Cusum of weighted individual residuals ordered by yhat^P.

    ``flavor="cluster"`` swaps in the cluster residuals e^P, the
    unshrunken version of the same diagnostic.
    """
    values = _weighted(bundle, _flavored(bundle, flavor))
    scores = np.concatenate(bundle.yhat_P)
    return cusum_from(values, scores, len(bundle.e_P), variant="F")


def _flavored(bundle: ResidualBundle, flavor: str):
    if flavor == "individual":
        return bundle.e_I
    if flavor == "cluster":
        return bundle.e_P
    raise ValueError(f"unknown residual flavor {flavor!r}")


def process_F_subset(
    bundle: ResidualBundle, subset, flavor: str = "individual"
) -> CusumProcess:
    """Cusum of weighted individual residuals ordered by a partial score.

    The ordering score keeps only the chosen fixed-effect columns:
    sum over l in subset of X[:, l] * beta[l].  With every column
    selected this reduces to the ordinary F ordering.
    """
    if bundle.X is None or bundle.beta is None:
        raise InvalidSubset("bundle does not carry the fixed-effects design")
    p = bundle.X[0].shape[1]
    cols = list(subset)
    if not cols:
        raise InvalidSubset("column subset must not be empty")
    if len(set(cols)) != len(cols):
        raise InvalidSubset(f"column subset {cols} has duplicates")
    if any((c < 0 or c >= p) for c in cols):
        raise InvalidSubset(f"column subset {cols} out of range for p={p}")
    values = _weighted(bundle, _flavored(bundle, flavor))
    scores = np.concatenate(
        [x[:, cols] @ bundle.beta[cols] for x in bundle.X]
    )
    return cusum_from(values, scores, len(bundle.e_P), variant="F-subset")


def statistics(process: CusumProcess) -> TestStatistics:
    """KS = max |W| and CvM = sum W^2 over the N grid slots."""
    return TestStatistics(
        ks=float(np.max(np.abs(process.w))),
        cvm=float(np.sum(process.w**2)),
    )


def covariance_KN(
    ds: ClusteredDataset,
    fit: FittedLmm,
    t: float,
    s: float,
    weights: str = "inv_sqrt",
) -> float:
    """Plug-in asymptotic covariance of the F process at (t, s).

    Two terms: the per-cluster quadratic forms of the weighted residual
    covariance between the indicator vectors chi_i(z) = 1{X_i beta <= z},
    minus the correction for estimating beta, which couples clusters
    through the GLS information matrix.
    """
    S = weight_matrices(fit, weights)
    p = ds.X[0].shape[1]
    n = len(ds.X)
    term1 = 0.0
    sum_t = np.zeros(p)
    sum_s = np.zeros(p)
    for x, v, g, s_i in zip(ds.X, fit.V, fit.G, S):
        marginal = x @ fit.beta
        chi_t = (marginal <= t).astype(float)
        chi_s = (marginal <= s).astype(float)
        sg = s_i @ g
        term1 += chi_t @ (sg @ v @ sg.T) @ chi_s
        sum_t += chi_t @ sg @ x
        sum_s += x.T @ g.T @ s_i.T @ chi_s
    term2 = sum_t @ np.linalg.solve(fit.H, sum_s)
    return (term1 - term2) / n


def covariance_KN_O(
    ds: ClusteredDataset,
    fit: FittedLmm,
    kit: TransformKit,
    t: float,
    s: float,
    draws: int = 2000,
    rng: np.random.Generator | None = None,
    weights: str = "inv_sqrt",
) -> float:
    """Monte-Carlo estimate of the O-process asymptotic covariance.

    The O analogue of :func:`covariance_KN` involves expectations of the
    indicator vectors over the predicted random effects of a synthetic
    outcome xi ~ N(0, V_i), for which no closed form is available; this
    estimates them by simulation.  Diagnostic use only.
    """
    kit.require("block")
    if rng is None:
        rng = np.random.default_rng()
    S = weight_matrices(fit, weights)
    p = ds.X[0].shape[1]
    n = len(ds.X)
    mid = [
        s_i @ j_i @ v_i @ j_i.T @ s_i.T
        for s_i, j_i, v_i in zip(S, kit.J_blocks, fit.V)
    ]
    sjx = [s_i @ j_i @ x for s_i, j_i, x in zip(S, kit.J_blocks, ds.X)]
    term1 = 0.0
    term2 = 0.0
    for _ in range(draws):
        u_t = np.zeros(p)
        u_s = np.zeros(p)
        for i, (x, z, l_i) in enumerate(zip(ds.X, ds.Z, fit.L)):
            xi = l_i @ rng.standard_normal(l_i.shape[0])
            b = fit.vc.D @ z.T @ fit.V_inv[i] @ xi
            pred = x @ fit.beta + z @ b
            chi_t = (pred <= t).astype(float)
            chi_s = (pred <= s).astype(float)
            term1 += chi_t @ mid[i] @ chi_s
            u_t += chi_t @ sjx[i]
            u_s += chi_s @ sjx[i]
        term2 += u_t @ np.linalg.solve(fit.H, u_s)
    return (term1 / draws - term2 / draws) / n


def export_trace(path, entries) -> None:
    """Write processes as CSV rows (variant, replicate_id, t, W).

    ``entries`` yields (replicate_id, process) pairs; by convention
    replicate 0 is the observed process and 1..M are null replicates.
    Floats are written with repr so a re-read is bit-exact.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,replicate_id,t,W\n")
        for rid, proc in entries:
            for tj, wj in zip(proc.t, proc.w):
                fh.write(
                    f"{proc.variant},{int(rid)},{float(tj)!r},{float(wj)!r}\n"
                )
