"""Null-process ensembles and p-value estimation for the cusum tests.

An observed cusum process is judged against M artificial processes that
mimic its distribution under a correctly specified model.  Three schemes
are provided:

``refit-flip``
    Rebuild the outcome as ``y^m = yhat^P + L Pi L^{-1} e^P`` per
    cluster, with ``Pi`` a diagonal matrix of independent mean-zero,
    unit-variance weights, then refit the model to ``y^m`` and recompute
    the process from the refit (its own residuals, predictions, weights,
    and, by default, re-estimated per-cluster transform matrices).  The
    most faithful scheme, and the costliest: M extra model fits.

``sim-pan``
    No refitting.  One scalar weight per cluster multiplies the cluster's
    marginal residual vector, a GLS projection term restores the
    estimating-equation constraint, and the original fit's matrices map
    the perturbed residuals to process values on the original jump grid.

``sim-chol``
    No refitting.  Like ``sim-pan`` but with per-observation weights
    conjugated through the Cholesky factor of each cluster covariance,
    ``L Pi L^{-1} e^P``, which preserves the residual covariance for any
    weight law with mean zero and unit variance.

p-values are estimated as ``p = (1 + #{m : T^m >= T}) / (M + 1)``, so
with M = 500 the smallest attainable value is 1/501.  The count uses a
weak inequality: ties between a null statistic and the observed one push
the p-value up, never down.

Reproducibility: replicate ``m`` draws its weights from an independent
stream keyed by ``(seed, m)``, so results are identical across runs,
across worker counts, and across process kinds sharing one scheme.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .cusum import (
    CusumProcess,
    TestStatistics,
    cusum_from,
    process_F,
    process_F_subset,
    process_O,
    statistics,
)
from .data import ClusteredDataset
from .estimation import (
    FitOptions,
    FittedLmm,
    NoConvergence,
    SingularH,
    fit_lmm,
    fit_many_outcomes,
)
from .transform import (
    PINV_REL_TOL,
    TransformKit,
    build_kit,
    residuals,
    transform_residuals,
)

SCHEME_KINDS = ("refit-flip", "sim-pan", "sim-chol")
WEIGHT_LAWS = ("rademacher", "normal", "mammen")

#: Weight law each scheme uses when none is named: sign flips for the
#: schemes built around them, standard normal scalars for sim-pan.
DEFAULT_LAWS = {
    "refit-flip": "rademacher",
    "sim-chol": "rademacher",
    "sim-pan": "normal",
}

PROCESS_KINDS = ("O", "F", "F-subset")

#: Replicates are fitted in lockstep batches of this fixed size.  The
#: size never depends on the worker count, so each replicate's arithmetic
#: is identical no matter how the work is distributed.
LOCKSTEP_BLOCK = 128

_MAMMEN_LOW = (1.0 - math.sqrt(5.0)) / 2.0
_MAMMEN_HIGH = (1.0 + math.sqrt(5.0)) / 2.0
_MAMMEN_P_LOW = (math.sqrt(5.0) + 1.0) / (2.0 * math.sqrt(5.0))


class UnknownScheme(ValueError):
    """Scheme kind or weight law outside the supported set."""


class NullRefitFailure(RuntimeError):
    """Raised when so many refits failed that no p-value can be formed."""


@dataclass(frozen=True)
class NullScheme:
    """How to build the null ensemble: scheme kind, weight law, M, seed."""

    kind: str
    law: str | None = None
    M: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise UnknownScheme(
                f"kind must be one of {SCHEME_KINDS}, got {self.kind!r}"
            )
        if self.law is None:
            object.__setattr__(self, "law", DEFAULT_LAWS[self.kind])
        if self.law not in WEIGHT_LAWS:
            raise UnknownScheme(
                f"law must be one of {WEIGHT_LAWS}, got {self.law!r}"
            )
        if self.M < 1:
            raise ValueError(f"M must be at least 1, got {self.M}")


def draw_pi(n_i: int, law: str, rng: np.random.Generator) -> NDArray[np.float64]:
    """Diagonal of one random sign/weight matrix: n_i iid entries.

    Every law has mean zero and unit variance.  ``"mammen"`` is the
    asymmetric two-point law taking (1 - sqrt(5))/2 with probability
    (sqrt(5) + 1)/(2 sqrt(5)) and (1 + sqrt(5))/2 otherwise, which also
    fixes the third moment at one.
    """
    if law == "rademacher":
        return rng.integers(0, 2, size=n_i) * 2.0 - 1.0
    if law == "normal":
        return rng.standard_normal(n_i)
    if law == "mammen":
        low = rng.random(n_i) < _MAMMEN_P_LOW
        return np.where(low, _MAMMEN_LOW, _MAMMEN_HIGH)
    raise UnknownScheme(f"law must be one of {WEIGHT_LAWS}, got {law!r}")


def _replicate_rng(scheme: NullScheme, m: int, retry: int = 0):
    seq = np.random.SeedSequence(entropy=scheme.seed, spawn_key=(m, retry))
    return np.random.default_rng(seq)


def p_value(
    observed: TestStatistics, nulls: list[TestStatistics]
) -> tuple[float, float]:
    """p = (1 + #{null >= observed}) / (M + 1) for KS and CvM."""
    m = len(nulls)
    if m < 1:
        raise ValueError("at least one null statistic is required")
    ks_count = sum(1 for s in nulls if s.ks >= observed.ks)
    cvm_count = sum(1 for s in nulls if s.cvm >= observed.cvm)
    return (1 + ks_count) / (m + 1), (1 + cvm_count) / (m + 1)


@dataclass
class GofResult:
    """Observed process, its null ensemble, and the resulting p-values."""

    which: str
    scheme: NullScheme
    observed: CusumProcess
    observed_stats: TestStatistics
    null_processes: list[CusumProcess]
    null_stats: list[TestStatistics]
    p_ks: float
    p_cvm: float
    failures: int = 0

    @property
    def effective_M(self) -> int:
        """Null replicates that actually entered the p-value."""
        return len(self.null_processes)


# ---------------------------------------------------------------------------
# shared helpers


def _validate_which(which, subset):
    if which not in PROCESS_KINDS:
        raise ValueError(f"which must be one of {PROCESS_KINDS}, got {which!r}")
    if which == "F-subset" and subset is None:
        raise ValueError("which='F-subset' needs a column subset")


def _validate_options(variant, flavor, weights):
    if variant not in {"block", "full"}:
        raise ValueError(f"variant must be 'block' or 'full', got {variant!r}")
    if flavor not in {"individual", "cluster"}:
        raise ValueError(f"unknown residual flavor {flavor!r}")
    if weights not in {"inv_sqrt", "identity"}:
        raise ValueError(f"unknown weight kind {weights!r}")


def _observed_process(bundle, kit, which, variant, flavor, subset):
    if which == "O":
        transform_residuals(bundle, kit, variant=variant, flavor=flavor)
        return process_O(bundle, kit, variant=variant)
    if which == "F":
        return process_F(bundle, flavor=flavor)
    return process_F_subset(bundle, list(subset), flavor=flavor)


def _grid_scores(bundle, which, subset) -> NDArray[np.float64]:
    """Stacked ordering scores of the original fit for one process kind."""
    if which == "O":
        return np.concatenate(bundle.yhat_I)
    if which == "F":
        return np.concatenate(bundle.yhat_P)
    cols = list(subset)
    return np.concatenate([x[:, cols] @ bundle.beta[cols] for x in bundle.X])


def _cluster_J_maps(ds, fit, kit, variant, flavor):
    """Linear maps sending stacked e^P to transformed residuals.

    Returns either a list of per-cluster matrices (block variant) or one
    stacked matrix (full variant).
    """
    if variant == "full":
        kit.require("full")
        if flavor == "individual":
            return kit.J
        zdz = scipy.linalg.block_diag(*[z @ fit.vc.D @ z.T for z in ds.Z])
        v_inv = scipy.linalg.block_diag(*fit.V_inv)
        n_total = ds.N
        return np.eye(n_total) - (kit.A + kit.B) @ kit.B_pinv @ zdz @ v_inv
    kit.require("block")
    if flavor == "individual":
        return list(kit.J_blocks)
    maps = []
    for a_i, b_i, bp_i, z, v_inv in zip(
        kit.A_blocks, kit.B_blocks, kit.B_pinv_blocks, ds.Z, fit.V_inv
    ):
        zdz = z @ fit.vc.D @ z.T
        maps.append(np.eye(zdz.shape[0]) - (a_i + b_i) @ bp_i @ zdz @ v_inv)
    return maps


def _value_maps(ds, fit, kit, which, variant, flavor, s_list):
    """Per-cluster (or stacked) maps from e^P-like vectors to weighted values."""
    if which == "O":
        j_maps = _cluster_J_maps(ds, fit, kit, variant, flavor)
        if variant == "full":
            return scipy.linalg.block_diag(*s_list) @ j_maps
        return [s @ j for s, j in zip(s_list, j_maps)]
    if flavor == "individual":
        return [s @ g for s, g in zip(s_list, fit.G)]
    return list(s_list)


def _apply_value_maps(maps, columns):
    """maps applied to per-cluster (n_i, M) blocks; returns stacked (N, M)."""
    if isinstance(maps, np.ndarray):
        return maps @ np.vstack(columns)
    return np.vstack([m @ block for m, block in zip(maps, columns)])


def _ensemble_processes(t_sorted, order, tie_index, values, variant_tag, n):
    """Cut an (N, M) value matrix into per-replicate step processes."""
    cum = np.cumsum(values[order, :], axis=0) / math.sqrt(n)
    merged = cum[tie_index, :]
    return [
        CusumProcess(t=t_sorted, w=merged[:, m].copy(), variant=variant_tag, n=n)
        for m in range(values.shape[1])
    ]


def _tie_structure(scores):
    """Sort order plus, per slot, the index of its tie group's last member."""
    order = np.argsort(scores, kind="stable")
    t_sorted = scores[order]
    uniq, inverse = np.unique(t_sorted, return_inverse=True)
    last = np.searchsorted(t_sorted, uniq, side="right") - 1
    return order, t_sorted, last[inverse]


# ---------------------------------------------------------------------------
# simulation schemes (no refitting)


def _sim_pseudo_residuals(ds, fit, scheme, draws, flips):
    """Per-cluster (n_i, M) blocks of e(M_i) or e(Pi_i) for one scheme."""
    m_count = scheme.M
    e_p = [y - x @ fit.beta for y, x in zip(ds.y, ds.X)]
    if scheme.kind == "sim-pan":
        if draws is None:
            draws = np.empty((len(ds.y), m_count))
            for m in range(m_count):
                rng = _replicate_rng(scheme, m)
                for i, size in enumerate(ds.n_i):
                    draws[i, m] = draw_pi(1, scheme.law, rng)[0]
        draws = np.asarray(draws, dtype=float)
        flipped = [np.outer(e, draws[i]) for i, e in enumerate(e_p)]
    else:
        if flips is None:
            flips = [np.empty((size, m_count)) for size in ds.n_i]
            for m in range(m_count):
                rng = _replicate_rng(scheme, m)
                for i, size in enumerate(ds.n_i):
                    flips[i][:, m] = draw_pi(int(size), scheme.law, rng)
        flipped = []
        for e, l, f in zip(e_p, fit.L, flips):
            white = scipy.linalg.solve_triangular(l, e, lower=True)
            flipped.append(l @ (np.asarray(f, dtype=float) * white[:, None]))
    # GLS projection: subtract X_i H^{-1} sum_j X_j' V_j^{-1} flipped_j
    accum = np.zeros((ds.p, m_count))
    for x, v_inv, block in zip(ds.X, fit.V_inv, flipped):
        accum += x.T @ (v_inv @ block)
    shift = np.linalg.solve(fit.H, accum)
    return [block - x @ shift for x, block in zip(ds.X, flipped)]


def _sim_ensembles(
    ds, fit, scheme, whiches, kit, variant, flavor, subset, weights, draws, flips
):
    bundle = residuals(ds, fit, weights)
    pseudo = _sim_pseudo_residuals(ds, fit, scheme, draws, flips)
    n = len(ds.y)
    out = {}
    for which in whiches:
        maps = _value_maps(ds, fit, kit, which, variant, flavor, bundle.S)
        values = _apply_value_maps(maps, pseudo)
        scores = _grid_scores(bundle, which, subset)
        order, t_sorted, tie_index = _tie_structure(scores)
        tag = _variant_tag(which, variant)
        out[which] = _ensemble_processes(t_sorted, order, tie_index, values, tag, n)
    return out


def _variant_tag(which, variant):
    if which == "O":
        return "O" if variant == "full" else "O-block"
    return "F" if which == "F" else "F-subset"


def sim_null_pan(
    ds: ClusteredDataset,
    fit: FittedLmm,
    scheme: NullScheme,
    which: str = "F",
    *,
    kit: TransformKit | None = None,
    variant: str = "block",
    flavor: str = "individual",
    subset=None,
    weights: str = "inv_sqrt",
    draws: NDArray[np.float64] | None = None,
) -> list[CusumProcess]:
    """Null processes by per-cluster scalar perturbation, no refitting.

    ``draws`` is a test/diagnostic hook: an (n, M) array of the scalar
    weights to use instead of drawing them from the scheme's law.
    """
    if scheme.kind != "sim-pan":
        raise UnknownScheme(f"sim_null_pan needs kind 'sim-pan', got {scheme.kind!r}")
    _validate_which(which, subset)
    _validate_options(variant, flavor, weights)
    if which == "O" and kit is None:
        kit = build_kit(ds, fit, variant=variant)
    return _sim_ensembles(
        ds, fit, scheme, [which], kit, variant, flavor, subset, weights, draws, None
    )[which]


def sim_null_chol(
    ds: ClusteredDataset,
    fit: FittedLmm,
    scheme: NullScheme,
    which: str = "F",
    *,
    kit: TransformKit | None = None,
    variant: str = "block",
    flavor: str = "individual",
    subset=None,
    weights: str = "inv_sqrt",
    flips: list[NDArray[np.float64]] | None = None,
) -> list[CusumProcess]:
    """Null processes by Cholesky-conjugated sign flips, no refitting.

    ``flips`` is a test/diagnostic hook: per-cluster (n_i, M) arrays of
    weights to use instead of drawing them.
    """
    if scheme.kind != "sim-chol":
        raise UnknownScheme(
            f"sim_null_chol needs kind 'sim-chol', got {scheme.kind!r}"
        )
    _validate_which(which, subset)
    _validate_options(variant, flavor, weights)
    if which == "O" and kit is None:
        kit = build_kit(ds, fit, variant=variant)
    return _sim_ensembles(
        ds, fit, scheme, [which], kit, variant, flavor, subset, weights, None, flips
    )[which]


# ---------------------------------------------------------------------------
# refit scheme


def _draw_all_flips(ds, scheme, retry_map=None):
    """Per-cluster (n_i, M) weight matrices, one independent stream per m."""
    flips = [np.empty((int(size), scheme.M)) for size in ds.n_i]
    for m in range(scheme.M):
        retry = 0 if retry_map is None else retry_map.get(m, 0)
        rng = _replicate_rng(scheme, m, retry)
        for i, size in enumerate(ds.n_i):
            flips[i][:, m] = draw_pi(int(size), scheme.law, rng)
    return flips


def _flip_outcomes(ds, fit, flips):
    """Stacked (M, N) outcomes y^m = yhat^P + L Pi L^{-1} e^P."""
    blocks = []
    for f, x, y, l in zip(flips, ds.X, ds.y, fit.L):
        marginal = x @ fit.beta
        white = scipy.linalg.solve_triangular(l, y - marginal, lower=True)
        blocks.append(marginal[:, None] + l @ (f * white[:, None]))
    return np.vstack(blocks).T


def _unpack_theta_rows(thetas, k):
    """(M, d) parameter rows to (M, k, k) Cholesky factors and (M,) sigma2."""
    m_rows = thetas.shape[0]
    c = np.zeros((m_rows, k, k))
    tril = np.tril_indices(k)
    c[:, tril[0], tril[1]] = thetas[:, :-1]
    diag = np.arange(k)
    c[:, diag, diag] = np.exp(c[:, diag, diag])
    return c, np.exp(thetas[:, -1])


def _pinv_sym_batched(mats, rel_tol=PINV_REL_TOL):
    """Eigenvalue-truncated pseudo-inverse of a (M, q, q) symmetric stack.

    Batched version of :func:`lmmgof.numerics.pseudo_inverse` with the
    same truncation rule, so per-replicate transforms drop exactly the
    eigendirections the per-fit route would drop.
    """
    sym = 0.5 * (mats + mats.transpose(0, 2, 1))
    w, u = np.linalg.eigh(sym)
    scale = np.max(np.abs(w), axis=1, keepdims=True)
    keep = np.abs(w) > rel_tol * np.maximum(scale, np.finfo(float).tiny)
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return np.einsum("mjk,mk,mlk->mjl", u, inv_w, u)


def _refit_block_values(ds, fit, thetas, outcomes, whiches, flavor,
                        subset, weights, reestimate, kit):
    """Process values and ordering scores for one block of refits.

    Everything is vectorized across the block's replicates, one cluster
    at a time: a single symmetric eigendecomposition per cluster yields
    both the covariance inverse and the inverse square root.  Block
    variant only; returns ``{which: (values, scores)}`` with (B, N)
    arrays.
    """
    b_rows = thetas.shape[0]
    k, p = ds.k, ds.p
    c_all, s2_all = _unpack_theta_rows(thetas, k)
    d_all = c_all @ c_all.transpose(0, 2, 1)
    need_o = "O" in whiches
    j_orig = None
    if need_o and not reestimate:
        j_orig = _cluster_J_maps(ds, fit, kit, "block", flavor)
    cols = list(subset) if subset is not None else None

    per_cluster = []
    h_all = np.zeros((b_rows, p, p))
    rhs_all = np.zeros((b_rows, p))
    offset = 0
    for z, x in zip(ds.Z, ds.X):
        n_i = z.shape[0]
        y_block = outcomes[:, offset : offset + n_i]
        offset += n_i
        v = np.einsum("jk,mkl,nl->mjn", z, d_all, z)
        idx = np.arange(n_i)
        v[:, idx, idx] += s2_all[:, None]
        w_eig, u_eig = np.linalg.eigh(v)
        v_inv = np.einsum("mjk,mk,mlk->mjl", u_eig, 1.0 / w_eig, u_eig)
        if weights == "inv_sqrt":
            s_mat = np.einsum(
                "mjk,mk,mlk->mjl", u_eig, 1.0 / np.sqrt(w_eig), u_eig
            )
        else:
            s_mat = None  # identity weights: apply nothing
        h_all += np.einsum("ja,mjk,kb->mab", x, v_inv, x)
        rhs_all += np.einsum("ja,mjk,mk->ma", x, v_inv, y_block)
        per_cluster.append((z, x, y_block, v_inv, s_mat))

    beta_all = np.linalg.solve(h_all, rhs_all[..., None])[..., 0]

    values = {which: [] for which in whiches}
    scores = {which: [] for which in whiches}
    for i, (z, x, y_block, v_inv, s_mat) in enumerate(per_cluster):
        yhat_p = beta_all @ x.T
        e_p = y_block - yhat_p
        vip = np.einsum("mjk,mk->mj", v_inv, e_p)
        bhat = np.einsum("mkl,jl,mj->mk", d_all, z, vip)
        zb = np.einsum("jk,mk->mj", z, bhat)
        e_i = e_p - zb

        def weighted(block, s_mat=s_mat):
            if s_mat is None:
                return block
            return np.einsum("mjk,mk->mj", s_mat, block)

        if need_o:
            if reestimate:
                # per-replicate limit-form transform, truncated exactly
                # like the per-fit route: pv = Z D Z' V^{-1}, correction
                # through the pseudo-inverse of B~ = Z D Z' V^{-1} Z D Z'
                zdz = np.einsum("jk,mkl,nl->mjn", z, d_all, z)
                pv = np.einsum("mjn,mnl->mjl", zdz, v_inv)
                b_tilde = np.einsum("mjn,mnl->mjl", pv, zdz)
                b_tilde = 0.5 * (b_tilde + b_tilde.transpose(0, 2, 1))
                b_pinv = _pinv_sym_batched(b_tilde)
                zb_corr = np.einsum("mjn,mn->mj", pv, e_p)
                q = np.einsum("mjn,mn->mj", b_pinv, zb_corr)
                a_q = s2_all[:, None] * np.einsum(
                    "mjn,mn->mj", v_inv, np.einsum("mjn,mn->mj", zdz, q)
                )
                if flavor == "individual":
                    corrected = s2_all[:, None] * vip - a_q
                else:
                    corrected = e_p - a_q - np.einsum(
                        "mjn,mn->mj", b_tilde, q
                    )
            else:
                corrected = np.einsum("jk,mk->mj", j_orig[i], e_p)
            values["O"].append(weighted(corrected))
            scores["O"].append(yhat_p + zb)
        for which in whiches:
            if which == "O":
                continue
            base = e_i if flavor == "individual" else e_p
            values[which].append(weighted(base))
            if which == "F":
                scores[which].append(yhat_p)
            else:
                scores[which].append(beta_all[:, cols] @ x[:, cols].T)

    return {
        which: (np.hstack(values[which]), np.hstack(scores[which]))
        for which in whiches
    }


def _refit_block(ds, fit, scheme, block_ids, whiches, flavor, subset,
                 weights, reestimate, kit, flips_hook):
    """Fit and post-process one fixed block of replicates.

    Returns ``({which: (values, scores)}, failed_ids)``; failed
    replicates are dropped from the block's arrays.
    """
    if flips_hook is not None:
        flips = [f[:, block_ids] for f in flips_hook]
    else:
        flips = [np.empty((int(size), len(block_ids))) for size in ds.n_i]
        for col, m in enumerate(block_ids):
            rng = _replicate_rng(scheme, int(m))
            for i, size in enumerate(ds.n_i):
                flips[i][:, col] = draw_pi(int(size), scheme.law, rng)
    outcomes = _flip_outcomes(ds, fit, flips)
    thetas, converged, _ = fit_many_outcomes(
        ds, outcomes, fit.method, x0=fit.theta
    )

    sizes = np.cumsum(ds.n_i)[:-1]
    failed = []
    for col in np.flatnonzero(~converged):
        m = int(block_ids[col])
        rescued = False
        # first a robust sequential attempt on the same outcome, then one
        # redraw of the weights, then give the replicate up
        for attempt in range(2):
            if attempt == 1:
                if flips_hook is not None:
                    break  # injected weights are never redrawn
                rng = _replicate_rng(scheme, m, retry=1)
                redraw = [
                    draw_pi(int(size), scheme.law, rng)[:, None]
                    for size in ds.n_i
                ]
                outcomes[col] = _flip_outcomes(ds, fit, redraw)[0]
            try:
                seq = fit_lmm(
                    ds.with_outcome(np.split(outcomes[col], sizes)),
                    fit.method,
                    FitOptions(x0=fit.theta),
                )
            except (NoConvergence, SingularH, np.linalg.LinAlgError):
                continue
            if seq.converged and seq.theta is not None:
                thetas[col] = seq.theta
                rescued = True
                break
        if not rescued:
            failed.append(col)

    keep = np.setdiff1d(np.arange(len(block_ids)), np.array(failed, dtype=int))
    block_values = _refit_block_values(
        ds, fit, thetas[keep], outcomes[keep], whiches, flavor,
        subset, weights, reestimate, kit,
    )
    return block_values, [int(block_ids[c]) for c in failed]


def _refit_block_star(args):
    return _refit_block(*args)


def _refit_ensembles(ds, fit, scheme, whiches, kit, variant, flavor, subset,
                     weights, reestimate, workers, flips_hook):
    if fit.theta is None:
        raise ValueError(
            "the original fit carries no parameter vector to warm-start from"
        )
    if variant == "full":
        return _refit_ensembles_dense(
            ds, fit, scheme, whiches, variant, flavor, subset, weights,
            reestimate, kit, flips_hook,
        )
    blocks = [
        np.arange(start, min(start + LOCKSTEP_BLOCK, scheme.M))
        for start in range(0, scheme.M, LOCKSTEP_BLOCK)
    ]
    args = [
        (ds, fit, scheme, ids, whiches, flavor, subset, weights,
         reestimate, kit, flips_hook)
        for ids in blocks
    ]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_refit_block_star, args))
    else:
        results = [_refit_block_star(a) for a in args]

    failures = [m for _, failed in results for m in failed]
    n = len(ds.y)
    out = {}
    for which in whiches:
        values = np.vstack([r[0][which][0] for r in results])
        scores = np.vstack([r[0][which][1] for r in results])
        tag = _variant_tag(which, variant)
        out[which] = [
            cusum_from(values[row], scores[row], n, variant=tag)
            for row in range(values.shape[0])
        ]
    return out, len(failures)


def _refit_ensembles_dense(ds, fit, scheme, whiches, variant, flavor, subset,
                           weights, reestimate, kit, flips_hook):
    """Reference-speed path for full-variant refits: one replicate at a time.

    The stacked transform costs a dense eigendecomposition per replicate,
    so this is only sensible for one-off analyses, not simulation studies.
    """
    sizes = np.cumsum(ds.n_i)[:-1]
    out = {which: [] for which in whiches}
    failures = 0
    for m in range(scheme.M):
        if flips_hook is not None:
            flips = [f[:, [m]] for f in flips_hook]
        else:
            rng = _replicate_rng(scheme, m)
            flips = [
                draw_pi(int(size), scheme.law, rng)[:, None] for size in ds.n_i
            ]
        outcome = _flip_outcomes(ds, fit, flips)[0]
        fit_m = None
        for attempt in range(2):
            if attempt == 1:
                if flips_hook is not None:
                    break
                rng = _replicate_rng(scheme, m, retry=1)
                flips = [
                    draw_pi(int(size), scheme.law, rng)[:, None]
                    for size in ds.n_i
                ]
                outcome = _flip_outcomes(ds, fit, flips)[0]
            try:
                candidate = fit_lmm(
                    ds.with_outcome(np.split(outcome, sizes)),
                    fit.method,
                    FitOptions(x0=fit.theta),
                )
            except (NoConvergence, SingularH, np.linalg.LinAlgError):
                continue
            if candidate.converged:
                fit_m = candidate
                break
        if fit_m is None:
            failures += 1
            continue
        ds_m = ds.with_outcome(np.split(outcome, sizes))
        bundle_m = residuals(ds_m, fit_m, weights)
        if "O" in whiches:
            kit_m = (
                build_kit(ds_m, fit_m, variant="full") if reestimate else kit
            )
            out["O"].append(
                _observed_process(bundle_m, kit_m, "O", variant, flavor, subset)
            )
        for which in whiches:
            if which != "O":
                out[which].append(
                    _observed_process(bundle_m, None, which, variant, flavor, subset)
                )
    return out, failures


def refit_null(
    ds: ClusteredDataset,
    fit: FittedLmm,
    scheme: NullScheme,
    which: str = "O",
    *,
    kit: TransformKit | None = None,
    variant: str = "block",
    flavor: str = "individual",
    subset=None,
    weights: str = "inv_sqrt",
    reestimate_transform: bool = True,
    workers: int = 1,
    flips: list[NDArray[np.float64]] | None = None,
) -> list[CusumProcess]:
    """Null processes by sign-flip and refit.

    Each replicate rebuilds the outcome from flipped whitened residuals,
    refits the model (warm-started, in fixed-size lockstep batches), and
    recomputes the requested process from the refit.  The original fit
    is never modified.  With ``reestimate_transform`` (the default) the
    per-cluster transform matrices of the O process come from each
    refit's own components; switched off, the original fit's matrices
    are reused, which is the cheaper asymptotically equivalent choice.

    A replicate whose refit does not converge is retried once with
    freshly drawn weights and dropped if it fails again; a warning is
    emitted when more than 1% of replicates are lost.  ``flips`` is a
    test hook with per-cluster (n_i, M) weight matrices.
    """
    if scheme.kind != "refit-flip":
        raise UnknownScheme(
            f"refit_null needs kind 'refit-flip', got {scheme.kind!r}"
        )
    _validate_which(which, subset)
    _validate_options(variant, flavor, weights)
    if which == "O" and not reestimate_transform and kit is None:
        kit = build_kit(ds, fit, variant=variant)
    ensembles, failures = _refit_ensembles(
        ds, fit, scheme, [which], kit, variant, flavor, subset, weights,
        reestimate_transform, workers, flips,
    )
    _report_failures(failures, scheme.M)
    return ensembles[which]


def _report_failures(failures: int, total: int) -> None:
    if failures >= total:
        raise NullRefitFailure(
            f"all {total} null refits failed to converge; no ensemble to "
            "compare against"
        )
    if failures > 0.01 * total:
        warnings.warn(
            f"{failures} of {total} null refits failed to converge and were "
            "excluded; p-values use the reduced ensemble",
            RuntimeWarning,
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# assembled runs


def run_gof_many(
    ds: ClusteredDataset,
    fit: FittedLmm,
    whiches,
    scheme: NullScheme,
    *,
    kit: TransformKit | None = None,
    variant: str = "block",
    flavor: str = "individual",
    subset=None,
    weights: str = "inv_sqrt",
    reestimate_transform: bool = True,
    workers: int = 1,
) -> dict[str, GofResult]:
    """Goodness-of-fit runs for several process kinds sharing one ensemble.

    With the refit scheme the M refits are by far the dominant cost and
    do not depend on the process kind, so running O and F together costs
    one ensemble instead of two.
    """
    whiches = list(whiches)
    if not whiches:
        raise ValueError("at least one process kind is required")
    for which in whiches:
        _validate_which(which, subset)
    if len(set(whiches)) != len(whiches):
        raise ValueError("duplicate process kinds")
    _validate_options(variant, flavor, weights)
    if "O" in whiches and kit is None:
        kit = build_kit(ds, fit, variant=variant)

    bundle = residuals(ds, fit, weights)
    observed = {
        which: _observed_process(bundle, kit, which, variant, flavor, subset)
        for which in whiches
    }

    failures = 0
    if scheme.kind == "refit-flip":
        ensembles, failures = _refit_ensembles(
            ds, fit, scheme, whiches, kit, variant, flavor, subset, weights,
            reestimate_transform, workers, None,
        )
        _report_failures(failures, scheme.M)
    else:
        ensembles = _sim_ensembles(
            ds, fit, scheme, whiches, kit, variant, flavor, subset, weights,
            None, None,
        )

    results = {}
    for which in whiches:
        obs_stats = statistics(observed[which])
        null_stats = [statistics(proc) for proc in ensembles[which]]
        p_ks, p_cvm = p_value(obs_stats, null_stats)
        results[which] = GofResult(
            which=which,
            scheme=scheme,
            observed=observed[which],
            observed_stats=obs_stats,
            null_processes=ensembles[which],
            null_stats=null_stats,
            p_ks=p_ks,
            p_cvm=p_cvm,
            failures=failures,
        )
    return results


def run_gof(
    ds: ClusteredDataset,
    fit: FittedLmm,
    which: str,
    scheme: NullScheme,
    **options,
) -> GofResult:
    """One observed process, its null ensemble, and the p-values.

    See :func:`run_gof_many` for the keyword options; this is the
    single-process convenience wrapper.
    """
    return run_gof_many(ds, fit, [which], scheme, **options)[which]
