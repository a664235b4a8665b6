"""Residual flavors and the transform that de-correlates them from
individual predictions.

A fitted LMM produces two kinds of residuals per cluster: the marginal
(cluster-level) residual ``e_i^P = y_i - X_i beta`` and the conditional
(individual-level) residual ``e_i^I = y_i - X_i beta - Z_i b_i``, which
also equals ``G_i e_i^P`` with ``G_i = sigma2 V_i^{-1}``.

Individual residuals are correlated with the individual predictions
``yhat^I = X beta + Z b``, so an ordering-based diagnostic built from
them would drift even under a correctly specified model.  The fix is a
linear correction: with

    A = sigma2 V^{-1} [V - X H^{-1} X'] (I - sigma2 V^{-1})
    B = (I - sigma2 V^{-1}) [V - X H^{-1} X'] (I - sigma2 V^{-1})

(the stacked N x N forms; A = cov(e^I, Z b') and B = var(Z b') at the
true parameters) the transformed residuals

    e^C = e^I - A B^+ Z b = J e^P,   J = sigma2 V^{-1} - A B^+ Z D Z' V^{-1}

have zero covariance with yhat^I whenever A - A B^+ B = 0.  In exact
arithmetic that equality holds for every identifiable design: the middle
factor [V - X H^{-1} X'] is a covariance, so writing it as R R' shows
that the row space of A and the image of B are both Im((I - sigma2
V^{-1}) R).  What matters in floating point is the rank decision inside
B^+: the analytically-zero eigenvalues of B carry rounding noise from
the solves that assemble it, and a truncation threshold below that noise
turns the projector B^+ B into an amplifier (see ``PINV_REL_TOL``).
In the many-cluster limit A and B become block diagonal with per-cluster
blocks

    A~_i = sigma2 V_i^{-1} Z_i D Z_i',   B~_i = Z_i D Z_i' V_i^{-1} Z_i D Z_i'

giving the cheaper per-cluster ("block") transform used by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .data import ClusteredDataset
from .estimation import FittedLmm
from .numerics import inv_sqrt, pseudo_inverse, symmetrize


class DimensionGuard(ValueError):
    """Refused to assemble a dense stacked matrix beyond the size cap."""


class VariantMissing(ValueError):
    """The transform kit was not built for the requested variant."""


FULL_SIZE_CAP = 2000

#: Default relative eigenvalue cutoff for pseudo-inverting the prediction
#: covariance.  Looser than the general-purpose numerics default on purpose:
#: the matrix is assembled from products of solves, so its analytically-zero
#: eigenvalues carry accumulated rounding noise that can exceed
#: ``q * machine_eps`` relative to the top eigenvalue.  Keeping such a noise
#: eigenvalue turns the projector into a noise amplifier; truncating a true
#: eigenvalue this small only drops a correction of the same magnitude.
PINV_REL_TOL = 1e-10


@dataclass
class ResidualBundle:
    """All residual flavors and predictions for one fitted model.

    Transformed residuals are attached per variant by
    :func:`transform_residuals`; ``transformed`` maps variant name to the
    per-cluster lists and ``transform_flavor`` records whether they were
    built from individual or cluster residuals.
    """

    e_P: list[NDArray[np.float64]]
    e_I: list[NDArray[np.float64]]
    yhat_P: list[NDArray[np.float64]]
    yhat_I: list[NDArray[np.float64]]
    S: list[NDArray[np.float64]]
    G: list[NDArray[np.float64]]
    X: list[NDArray[np.float64]] | None = None
    beta: NDArray[np.float64] | None = None
    transformed: dict[str, list[NDArray[np.float64]]] = field(default_factory=dict)
    transform_flavor: dict[str, str] = field(default_factory=dict)

    @property
    def built_variants(self) -> tuple[str, ...]:
        return tuple(sorted(self.transformed))


@dataclass
class TransformKit:
    """The A/B/J matrices for one fit, in stacked and/or per-cluster form."""

    L: list[NDArray[np.float64]]  # Cholesky factors of each V_i
    A: NDArray[np.float64] | None = None
    B: NDArray[np.float64] | None = None
    B_pinv: NDArray[np.float64] | None = None
    J: NDArray[np.float64] | None = None
    A_blocks: list[NDArray[np.float64]] | None = None
    B_blocks: list[NDArray[np.float64]] | None = None
    B_pinv_blocks: list[NDArray[np.float64]] | None = None
    J_blocks: list[NDArray[np.float64]] | None = None

    def has(self, variant: str) -> bool:
        if variant == "full":
            return self.A is not None
        if variant == "block":
            return self.A_blocks is not None
        raise ValueError(f"unknown variant {variant!r}")

    def require(self, variant: str) -> None:
        if not self.has(variant):
            raise VariantMissing(
                f"transform kit was not built with the {variant!r} variant"
            )


def residuals(
    ds: ClusteredDataset, fit: FittedLmm, weights: str = "inv_sqrt"
) -> ResidualBundle:
    """Residuals and predictions for a converged fit.

    The individual residuals are computed by direct subtraction
    ``y - X beta - Z b``; the identity ``e^I = G e^P`` is a property of
    the BLUPs, not an input here, and is what the tests verify.
    """
    e_p, e_i, yhat_p, yhat_i = [], [], [], []
    for x, z, y, b in zip(ds.X, ds.Z, ds.y, fit.blups):
        marginal = x @ fit.beta
        conditional = marginal + z @ b
        e_p.append(y - marginal)
        e_i.append(y - conditional)
        yhat_p.append(marginal)
        yhat_i.append(conditional)
    return ResidualBundle(
        e_P=e_p,
        e_I=e_i,
        yhat_P=yhat_p,
        yhat_I=yhat_i,
        S=weight_matrices(fit, weights),
        G=list(fit.G),
        X=list(ds.X),
        beta=fit.beta,
    )


def weight_matrices(fit: FittedLmm, kind: str = "inv_sqrt"):
    """Per-cluster weights S_i applied to residuals before cumulation.

    ``"inv_sqrt"`` gives S_i = V_i^{-1/2} (so weighted residuals have
    identity covariance under the model); ``"identity"`` disables
    weighting.  Other definitions are possible but not provided.
    """
    if kind == "identity":
        return [np.eye(v.shape[0]) for v in fit.V]
    if kind == "inv_sqrt":
        return [inv_sqrt(v) for v in fit.V]
    raise ValueError(f"unknown weight kind {kind!r}")


def build_AB_full(
    ds: ClusteredDataset, fit: FittedLmm, size_cap: int = FULL_SIZE_CAP
):
    """Stacked N x N matrices (A, B); refuses beyond ``size_cap`` rows.

    These are dense even though V is block diagonal, because the middle
    factor V - X H^{-1} X' couples all clusters through H.
    """
    n_total = ds.N
    if n_total > size_cap:
        raise DimensionGuard(
            f"stacked transform needs a dense {n_total} x {n_total} matrix; "
            f"cap is {size_cap} (use the block variant instead)"
        )
    v = scipy.linalg.block_diag(*fit.V)
    v_inv = scipy.linalg.block_diag(*fit.V_inv)
    x = np.vstack(ds.X)
    middle = v - x @ np.linalg.solve(fit.H, x.T)
    shrink = np.eye(n_total) - fit.sigma2 * v_inv  # I - sigma2 V^{-1}
    a = fit.sigma2 * v_inv @ middle @ shrink
    b = symmetrize(shrink @ middle @ shrink)
    return a, b


def build_AB_block(ds: ClusteredDataset, fit: FittedLmm):
    """Per-cluster limit forms (A~_i, B~_i) of the stacked A and B."""
    a_blocks, b_blocks = [], []
    for z, v_inv in zip(ds.Z, fit.V_inv):
        zdz = z @ fit.vc.D @ z.T
        a_blocks.append(fit.sigma2 * v_inv @ zdz)
        b_blocks.append(symmetrize(zdz @ v_inv @ zdz))
    return a_blocks, b_blocks


def build_kit(
    ds: ClusteredDataset,
    fit: FittedLmm,
    variant: str = "block",
    size_cap: int = FULL_SIZE_CAP,
    rel_tol: float | None = None,
) -> TransformKit:
    """Assemble the transform kit for one or both variants.

    Parameters
    ----------
    variant : str
        ``"block"`` (default), ``"full"``, or ``"both"``.
    size_cap : int
        Maximum stacked dimension for the full variant.
    rel_tol : float, optional
        Pseudo-inverse truncation threshold, passed through to
        :func:`lmmgof.numerics.pseudo_inverse`.  Defaults to
        :data:`PINV_REL_TOL` rather than the numerics default; see the
        constant's note on rounding noise in the assembled covariance.
    """
    if variant not in {"block", "full", "both"}:
        raise ValueError(f"unknown variant {variant!r}")
    if rel_tol is None:
        rel_tol = PINV_REL_TOL
    kit = TransformKit(L=list(fit.L))
    if variant in {"full", "both"}:
        a, b = build_AB_full(ds, fit, size_cap)
        b_pinv = pseudo_inverse(b, rel_tol)
        v_inv = scipy.linalg.block_diag(*fit.V_inv)
        zdz = scipy.linalg.block_diag(
            *[z @ fit.vc.D @ z.T for z in ds.Z]
        )
        kit.A, kit.B, kit.B_pinv = a, b, b_pinv
        kit.J = fit.sigma2 * v_inv - a @ b_pinv @ zdz @ v_inv
    if variant in {"block", "both"}:
        a_blocks, b_blocks = build_AB_block(ds, fit)
        b_pinvs = [pseudo_inverse(b, rel_tol) for b in b_blocks]
        j_blocks = []
        for a_i, bp_i, z, v_inv in zip(a_blocks, b_pinvs, ds.Z, fit.V_inv):
            zdz = z @ fit.vc.D @ z.T
            j_blocks.append(fit.sigma2 * v_inv - a_i @ bp_i @ zdz @ v_inv)
        kit.A_blocks, kit.B_blocks = a_blocks, b_blocks
        kit.B_pinv_blocks, kit.J_blocks = b_pinvs, j_blocks
    return kit


def transform_residuals(
    bundle: ResidualBundle,
    kit: TransformKit,
    variant: str = "block",
    flavor: str = "individual",
) -> list[NDArray[np.float64]]:
    """Apply the de-correlating correction; records the result on the bundle.

    With ``flavor="individual"`` the correction is
    ``e^C = e^I - A B^+ Z b``; with ``flavor="cluster"`` the cluster
    residuals are corrected instead, ``e^P - (A + B) B^+ Z b``, since
    their covariance with the random-effect predictions is A + B rather
    than A.
    """
    kit.require(variant)
    if flavor not in {"individual", "cluster"}:
        raise ValueError(f"unknown residual flavor {flavor!r}")
    zb = [yi - yp for yi, yp in zip(bundle.yhat_I, bundle.yhat_P)]
    base = bundle.e_I if flavor == "individual" else bundle.e_P
    if variant == "full":
        correction = kit.A @ kit.B_pinv if flavor == "individual" else (
            (kit.A + kit.B) @ kit.B_pinv
        )
        corrected = np.concatenate(base) - correction @ np.concatenate(zb)
        sizes = [v.size for v in base]
        out = list(np.split(corrected, np.cumsum(sizes)[:-1]))
    else:
        out = []
        for e, zb_i, a_i, b_i, bp_i in zip(
            base, zb, kit.A_blocks, kit.B_blocks, kit.B_pinv_blocks
        ):
            if flavor == "individual":
                out.append(e - a_i @ (bp_i @ zb_i))
            else:
                out.append(e - (a_i + b_i) @ (bp_i @ zb_i))
    bundle.transformed[variant] = out
    bundle.transform_flavor[variant] = flavor
    return out
