"""Linear mixed-model estimation: GLS, ML/REML, BLUPs.

The model per cluster is ``y_i = X_i beta + Z_i b_i + eps_i`` with
``b_i ~ N(0, D)`` and ``eps_i ~ N(0, sigma2 I)``, so the marginal
covariance is ``V_i = Z_i D Z_i' + sigma2 I``.

Variance components are estimated by maximizing the profile
log-likelihood over the log-Cholesky parametrization of ``D`` together
with ``log sigma2``, which keeps ``D`` positive semi-definite without
constraints.  The optimizer is a derivative-free simplex pass refined by
a finite-difference quasi-Newton stage.

The profile objective never assembles any ``n_i x n_i`` matrix.  With
``D = C C'`` and per-cluster cross-products ``Z_i'Z_i``, ``Z_i'X_i``,
``Z_i'y_i`` the matrix inversion lemma reduces every appearance of
``V_i^{-1}`` to the k x k system ``K_i = sigma2 I + C'Z_i'Z_i C``:

    log det V_i   = (n_i - k) log sigma2 + log det K_i
    a' V_i^{-1} b = [a'b - (C'Z_i'a)' K_i^{-1} (C'Z_i'b)] / sigma2

so one objective evaluation is a handful of batched k x k operations
regardless of the cluster sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize
from numpy.typing import NDArray

from .data import ClusteredDataset
from .numerics import NotPositiveDefinite, cholesky, eigh_sym

_LOG_2PI = math.log(2.0 * math.pi)
_BIG = 1e300


class SingularH(ValueError):
    """The GLS normal matrix sum(X_i' V_i^{-1} X_i) is not invertible."""


class NoConvergence(RuntimeError):
    """The optimizer exhausted its iteration budget without converging."""


@dataclass
class VarianceComponents:
    """Random-effect covariance ``D`` (k x k PSD) and residual ``sigma2``."""

    D: NDArray[np.float64]
    sigma2: float

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.sigma2 = float(self.sigma2)
        if self.D.shape[0] != self.D.shape[1]:
            raise ValueError("D must be square")
        if np.max(np.abs(self.D - self.D.T)) > 1e-10 * max(1.0, np.max(np.abs(self.D))):
            raise ValueError("D must be symmetric")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        w = np.linalg.eigvalsh(0.5 * (self.D + self.D.T))
        if w[0] < -1e-10 * max(np.trace(self.D), 1.0):
            raise ValueError("D must be positive semi-definite")

    @property
    def k(self) -> int:
        return self.D.shape[0]


def marginal_cov(z: NDArray, vc: VarianceComponents) -> NDArray[np.float64]:
    """Assemble ``V_i = Z_i D Z_i' + sigma2 I`` for one cluster."""
    n_i = z.shape[0]
    return z @ vc.D @ z.T + vc.sigma2 * np.eye(n_i)


# ---------------------------------------------------------------------------
# sufficient statistics and the profile objective


@dataclass
class SufficientStats:
    """Per-cluster cross-products that the profile objective consumes."""

    szz: NDArray[np.float64]  # (n, k, k)
    szx: NDArray[np.float64]  # (n, k, p)
    szy: NDArray[np.float64]  # (n, k)
    sxx: NDArray[np.float64]  # (p, p), summed over clusters
    sxy: NDArray[np.float64]  # (p,), summed
    syy: float
    n_i: NDArray[np.int_]
    N: int
    p: int
    k: int

    @property
    def dof(self) -> int:
        return int(np.sum(self.n_i - self.k))

    @classmethod
    def from_dataset(cls, ds: ClusteredDataset) -> "SufficientStats":
        szz = np.stack([z.T @ z for z in ds.Z])
        szx = np.stack([z.T @ x for z, x in zip(ds.Z, ds.X)])
        szy = np.stack([z.T @ y for z, y in zip(ds.Z, ds.y)])
        sxx = sum(x.T @ x for x in ds.X)
        sxy = sum(x.T @ y for x, y in zip(ds.X, ds.y))
        syy = float(sum(y @ y for y in ds.y))
        return cls(szz, szx, szy, sxx, sxy, syy, ds.n_i, ds.N, ds.p, ds.k)

    def replace_outcome(
        self, ds: ClusteredDataset, y: list[NDArray[np.float64]]
    ) -> "SufficientStats":
        """Stats for the same designs with a different outcome."""
        szy = np.stack([z.T @ v for z, v in zip(ds.Z, y)])
        sxy = sum(x.T @ v for x, v in zip(ds.X, y))
        syy = float(sum(v @ v for v in y))
        return replace(self, szy=szy, sxy=sxy, syy=syy)


def theta_dim(k: int) -> int:
    """Number of optimizer parameters: k(k+1)/2 for D plus one for sigma2."""
    return k * (k + 1) // 2 + 1


# caps exp() so absurd line-search trial points decode to huge-but-finite
# components and get rejected by the objective instead of overflowing
_EXP_CAP = 700.0


def theta_to_components(theta: NDArray, k: int):
    """Unpack optimizer parameters into (C, sigma2), D = C C'.

    The Cholesky factor ``C`` is stored row by row; diagonal entries are
    logs, off-diagonal entries are free.
    """
    c = np.zeros((k, k))
    pos = 0
    for i in range(k):
        for j in range(i + 1):
            if i == j:
                c[i, j] = math.exp(min(theta[pos], _EXP_CAP))
            else:
                c[i, j] = theta[pos]
            pos += 1
    return c, math.exp(min(theta[pos], _EXP_CAP))


def components_to_theta(d: NDArray, sigma2: float) -> NDArray[np.float64]:
    """Inverse of :func:`theta_to_components` (D must be PD)."""
    c = cholesky(np.asarray(d, dtype=float))
    k = c.shape[0]
    theta = np.empty(theta_dim(k))
    pos = 0
    for i in range(k):
        for j in range(i + 1):
            theta[pos] = math.log(c[i, i]) if i == j else c[i, j]
            pos += 1
    theta[pos] = math.log(sigma2)
    return theta


def _profile_pieces(theta: NDArray, stats: SufficientStats):
    """Everything the likelihood needs at one parameter point.

    Returns ``(sum_logdet_V, Q, beta, H)`` where Q is the GLS residual
    quadratic form, or None when the point is numerically unusable.
    """
    k, p = stats.k, stats.p
    c, s2 = theta_to_components(theta, k)
    if not np.isfinite(s2) or s2 <= 0 or not np.all(np.isfinite(c)):
        return None
    with np.errstate(all="ignore"):
        try:
            kmat = np.matmul(np.matmul(c.T, stats.szz), c)
            kmat[:, np.arange(k), np.arange(k)] += s2
            lfac = np.linalg.cholesky(kmat)
            logdet_k = 2.0 * np.sum(np.log(np.diagonal(lfac, axis1=1, axis2=2)))
            sum_logdet = stats.dof * math.log(s2) + float(logdet_k)

            w = np.matmul(c.T, stats.szx)  # (n, k, p)
            v = np.matmul(stats.szy, c)[..., None]  # (n, k, 1)
            sol = np.linalg.solve(kmat, np.concatenate([w, v], axis=2))
            sol_w, sol_v = sol[:, :, :p], sol[:, :, p]

            h = (stats.sxx - np.einsum("nkp,nkq->pq", w, sol_w)) / s2
            r = (stats.sxy - np.einsum("nkp,nk->p", w, sol_v)) / s2
            q_yy = (stats.syy - np.einsum("nk,nk->", stats.szy @ c, sol_v)) / s2
            hfac = scipy.linalg.cho_factor(h)
            beta = scipy.linalg.cho_solve(hfac, r)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            # overflowed or degenerate trial point: reject, do not crash
            return None
    quad = q_yy - float(beta @ r)
    logdet_h = 2.0 * float(np.sum(np.log(np.diagonal(hfac[0]))))
    return sum_logdet, quad, beta, h, logdet_h


def _negloglik(theta: NDArray, stats: SufficientStats, reml: bool) -> float:
    pieces = _profile_pieces(theta, stats)
    if pieces is None:
        return _BIG
    sum_logdet, quad, _, _, logdet_h = pieces
    if reml:
        value = 0.5 * (
            sum_logdet + quad + logdet_h + (stats.N - stats.p) * _LOG_2PI
        )
    else:
        value = 0.5 * (sum_logdet + quad + stats.N * _LOG_2PI)
    return value if np.isfinite(value) else _BIG


class _Objective:
    """Batched evaluator for the profile negative log-likelihood.

    The optimizer spends nearly all its time on finite-difference
    gradients, which need 2d + 1 objective values around a point.  This
    class evaluates whole batches of parameter vectors with one pass of
    stacked array operations, with hand-expanded K-inverses for the
    common k <= 2 case; results match :func:`_negloglik` to rounding.
    """

    def __init__(self, stats: SufficientStats, reml: bool):
        self.stats = stats
        self.reml = reml
        self.dim = theta_dim(stats.k)
        self._tril = np.tril_indices(stats.k)
        self._diag = np.arange(stats.k)
        # central-difference half-steps, cube-root-of-eps scaled
        self._fd_scale = float(np.cbrt(np.finfo(float).eps))

    def __call__(self, theta: NDArray) -> float:
        return float(self.many(np.asarray(theta, dtype=float)[None])[0])

    def _unpack(self, thetas: NDArray):
        k = self.stats.k
        batch = thetas.shape[0]
        c = np.zeros((batch, k, k))
        c[:, self._tril[0], self._tril[1]] = thetas[:, : self.dim - 1]
        c[:, self._diag, self._diag] = np.exp(c[:, self._diag, self._diag])
        return c, np.exp(thetas[:, -1])

    def _fallback_rows(self, thetas, szy, sxy, syy):
        """Row-wise scalar evaluation for the paths batching cannot take."""
        if szy is None:
            return np.array([_negloglik(t, self.stats, self.reml) for t in thetas])
        return np.array(
            [
                _negloglik(
                    t,
                    replace(self.stats, szy=zy, sxy=xy, syy=float(yy)),
                    self.reml,
                )
                for t, zy, xy, yy in zip(thetas, szy, sxy, syy)
            ]
        )

    def many(
        self,
        thetas: NDArray,
        szy: NDArray | None = None,
        sxy: NDArray | None = None,
        syy: NDArray | None = None,
    ) -> NDArray[np.float64]:
        """Objective at each row of ``thetas``; invalid points get _BIG.

        ``szy``, ``sxy``, ``syy`` optionally supply a different outcome
        per row (leading dimension matching ``thetas``), which is what
        lets many refits of the same designs run in lockstep.  Omitted,
        every row is evaluated against the constructor's outcome.
        """
        stats, k, p = self.stats, self.stats.k, self.stats.p
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        row_szy = stats.szy if szy is None else szy
        row_sxy = stats.sxy if sxy is None else sxy
        row_syy = stats.syy if syy is None else syy
        with np.errstate(all="ignore"):
            c, s2 = self._unpack(thetas)
            ct = np.swapaxes(c, 1, 2)
            kmat = np.matmul(np.matmul(ct[:, None], stats.szz), c[:, None])
            kmat[:, :, self._diag, self._diag] += s2[:, None, None]
            w = np.matmul(ct[:, None], stats.szx)  # (B, n, k, p)
            wv = np.matmul(row_szy, c)  # (B, n, k)
            rhs = np.concatenate([w, wv[..., None]], axis=3)
            if k == 1:
                k00 = kmat[:, :, 0, 0]
                logdet_k = np.sum(np.log(k00), axis=1)
                sol = rhs / k00[..., None, None]
            elif k == 2:
                a = kmat[..., 0, 0]
                b = kmat[..., 0, 1]
                d = kmat[..., 1, 1]
                det = a * d - b * b
                logdet_k = np.sum(np.log(det), axis=1)
                r0, r1 = rhs[..., 0, :], rhs[..., 1, :]
                inv_det = (1.0 / det)[..., None]
                sol = np.stack(
                    [
                        (d[..., None] * r0 - b[..., None] * r1) * inv_det,
                        (a[..., None] * r1 - b[..., None] * r0) * inv_det,
                    ],
                    axis=2,
                )
            else:
                try:
                    lfac = np.linalg.cholesky(kmat)
                except np.linalg.LinAlgError:
                    return self._fallback_rows(thetas, szy, sxy, syy)
                logdet_k = 2.0 * np.sum(
                    np.log(np.diagonal(lfac, axis1=2, axis2=3)), axis=(1, 2)
                )
                sol = np.linalg.solve(kmat, rhs)
            sum_logdet = stats.dof * np.log(s2) + logdet_k
            sol_w, sol_v = sol[..., :p], sol[..., p]
            h = (stats.sxx - np.einsum("bnkp,bnkq->bpq", w, sol_w)) / s2[:, None, None]
            r = (row_sxy - np.einsum("bnkp,bnk->bp", w, sol_v)) / s2[:, None]
            q_yy = (row_syy - np.einsum("bnk,bnk->b", wv, sol_v)) / s2
            sign, logdet_h = np.linalg.slogdet(h)
            try:
                beta = np.linalg.solve(h, r[..., None])[..., 0]
            except np.linalg.LinAlgError:
                return self._fallback_rows(thetas, szy, sxy, syy)
            quad = q_yy - np.einsum("bp,bp->b", beta, r)
            if self.reml:
                values = 0.5 * (
                    sum_logdet + quad + logdet_h + (stats.N - p) * _LOG_2PI
                )
            else:
                values = 0.5 * (sum_logdet + quad + stats.N * _LOG_2PI)
            bad = ~np.isfinite(values) | (sign <= 0)
        if np.any(bad):
            values = np.where(bad, _BIG, values)
        return values

    def value_and_grad(self, theta: NDArray):
        """Objective and central-difference gradient in one batched pass."""
        theta = np.asarray(theta, dtype=float)
        h = self._fd_scale * (1.0 + np.abs(theta))
        pts = np.vstack([theta[None], theta + np.diag(h), theta - np.diag(h)])
        vals = self.many(pts)
        d = self.dim
        grad = (vals[1 : d + 1] - vals[d + 1 :]) / (2.0 * h)
        return float(vals[0]), grad


# ---------------------------------------------------------------------------
# public operations


def gls_beta(ds: ClusteredDataset, vc: VarianceComponents) -> NDArray[np.float64]:
    """Generalized least squares for fixed effects at known components.

    Solves ``H beta = sum(X_i' V_i^{-1} y_i)`` with
    ``H = sum(X_i' V_i^{-1} X_i)``.

    Raises
    ------
    SingularH
        If the normal matrix cannot be factorized.
    """
    p = ds.p
    h = np.zeros((p, p))
    r = np.zeros(p)
    for x, z, y in zip(ds.X, ds.Z, ds.y):
        vi = marginal_cov(z, vc)
        lower = cholesky(vi)
        xv = scipy.linalg.cho_solve((lower, True), x).T  # (p, n_i) of X'V^{-1}
        h += xv @ x
        r += xv @ y
    try:
        beta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(h), r)
    except scipy.linalg.LinAlgError as exc:
        raise SingularH(str(exc)) from exc
    return beta


def profile_loglik(
    ds: ClusteredDataset, vc: VarianceComponents, method: str = "REML"
) -> float:
    """Profile log-likelihood at the given variance components.

    The fixed effects are profiled out at their GLS value.  This routine
    deliberately assembles the dense per-cluster ``V_i`` rather than
    reusing the optimizer's reduced objective, so the two can be checked
    against each other.
    """
    reml = _parse_method(method)
    beta = gls_beta(ds, vc)
    sum_logdet = 0.0
    quad = 0.0
    h = np.zeros((ds.p, ds.p))
    for x, z, y in zip(ds.X, ds.Z, ds.y):
        vi = marginal_cov(z, vc)
        lower = cholesky(vi)
        sum_logdet += 2.0 * float(np.sum(np.log(np.diag(lower))))
        resid = y - x @ beta
        quad += float(resid @ scipy.linalg.cho_solve((lower, True), resid))
        h += x.T @ scipy.linalg.cho_solve((lower, True), x)
    value = -0.5 * (sum_logdet + quad)
    if reml:
        sign, logdet_h = np.linalg.slogdet(h)
        if sign <= 0:
            raise SingularH("normal matrix has non-positive determinant")
        value -= 0.5 * logdet_h
        value -= 0.5 * (ds.N - ds.p) * _LOG_2PI
    else:
        value -= 0.5 * ds.N * _LOG_2PI
    return value


@dataclass
class FitOptions:
    """Optimizer controls for :func:`fit_lmm`."""

    max_iter: int = 500
    use_simplex: bool = True
    x0: NDArray[np.float64] | None = None
    gtol: float = 1e-6
    step_tol: float = 1e-8
    hess_inv0: NDArray[np.float64] | None = None


@dataclass
class FittedLmm:
    """A fitted LMM and the per-cluster matrices derived from it."""

    beta: NDArray[np.float64]
    vc: VarianceComponents
    method: str
    loglik: float
    converged: bool
    n_iter: int
    H: NDArray[np.float64]
    V: list[NDArray[np.float64]]
    V_inv: list[NDArray[np.float64]]
    G: list[NDArray[np.float64]]
    L: list[NDArray[np.float64]]
    blups: list[NDArray[np.float64]]
    boundary: bool
    score_gap: float
    theta: NDArray[np.float64] | None = field(repr=False)
    hess_inv: NDArray[np.float64] | None = field(default=None, repr=False)

    @property
    def D(self) -> NDArray[np.float64]:
        return self.vc.D

    @property
    def sigma2(self) -> float:
        return self.vc.sigma2


def _parse_method(method: str) -> bool:
    normalized = method.strip().upper()
    if normalized not in {"ML", "REML"}:
        raise ValueError(f"method must be 'ML' or 'REML', got {method!r}")
    return normalized == "REML"


def _starting_point(ds: ClusteredDataset) -> NDArray[np.float64]:
    """Scale-aware start: pooled within-cluster OLS residual variance."""
    y, x, _ = ds.stacked()
    beta_ols, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta_ols
    ss = 0.0
    dof = 0
    offset = 0
    for size in ds.n_i:
        r = resid[offset : offset + size]
        offset += size
        if size >= 2:
            ss += float(np.sum((r - r.mean()) ** 2))
            dof += size - 1
    s2 = ss / dof if dof > 0 else float(np.var(resid))
    s2 = max(s2, 1e-8 * max(float(np.var(y)), 1.0))
    d0 = 0.1 * s2 * np.eye(ds.k)
    return components_to_theta(d0, s2)


def _bfgs_fd(obj: _Objective, x0: NDArray, gtol: float, maxiter: int, hinv0=None):
    """BFGS with batched central-difference gradients.

    Tries the full quasi-Newton step first and evaluates value and
    gradient there together, so an accepted step costs one batched pass;
    backtracks with cheap value-only evaluations when the step fails the
    sufficient-decrease test.  The inverse-Hessian update is skipped when
    the curvature along the step is not usably positive.
    """
    dim = x0.size
    x = np.asarray(x0, dtype=float)
    f, g = obj.value_and_grad(x)
    hinv = np.eye(dim) if hinv0 is None else np.asarray(hinv0, dtype=float)
    nit = 0
    stalled = 0
    while nit < maxiter and np.max(np.abs(g)) > gtol and f < _BIG / 2:
        direction = -hinv @ g
        slope = float(g @ direction)
        if slope >= 0:  # stale curvature; fall back to steepest descent
            hinv = np.eye(dim)
            direction = -g
            slope = float(g @ direction)
        # Sufficient decrease up to the float discrimination floor of the
        # objective; without the absolute slack, steps whose true decrease
        # sits below rounding noise get rejected and progress dies early.
        noise = 4.0 * np.finfo(float).eps * (1.0 + abs(f))
        alpha = 1.0
        x_new = x + direction
        f_new, g_new = obj.value_and_grad(x_new)
        if not f_new <= f + 1e-4 * alpha * slope + noise:
            accepted = False
            for _ in range(40):
                alpha *= 0.5
                x_new = x + alpha * direction
                f_try = obj(x_new)
                if f_try <= f + 1e-4 * alpha * slope + noise:
                    f_new, g_new = obj.value_and_grad(x_new)
                    accepted = True
                    break
            if not accepted:
                break
        nit += 1
        if f_new < f - 4.0 * noise:
            stalled = 0
        else:
            stalled += 1
            if stalled >= 10:  # grinding inside the noise floor
                x, f, g = x_new, f_new, g_new
                break
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            rho = 1.0 / sy
            eye = np.eye(dim)
            left = eye - rho * np.outer(s, yv)
            hinv = left @ hinv @ left.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
    return x, f, g, nit, hinv


def _optimize(stats: SufficientStats, reml: bool, opts: FitOptions, x0: NDArray):
    """Simplex then finite-difference quasi-Newton; shared by all fits."""
    obj = _Objective(stats, reml)
    iters = 0
    x = np.asarray(x0, dtype=float)
    if opts.use_simplex:
        nm = scipy.optimize.minimize(
            obj,
            x,
            method="Nelder-Mead",
            options={
                "xatol": 1e-6,
                "fatol": 1e-9,
                "maxiter": min(300, opts.max_iter),
            },
        )
        iters += nm.nit
        x = nm.x

    budget = max(opts.max_iter - iters, 20)
    x1, f1, g1, nit1, hinv = _bfgs_fd(obj, x, opts.gtol, budget, opts.hess_inv0)
    iters += nit1
    # A restart from the located optimum should terminate immediately; the
    # size of the step it still takes is the parameter-change criterion.
    x2, f2, g2, nit2, hinv2 = _bfgs_fd(
        obj, x1, opts.gtol, max(opts.max_iter - iters, 10)
    )
    iters += nit2
    step = float(np.linalg.norm(x2 - x1))
    grad_norm = float(np.max(np.abs(g2)))
    converged = (
        grad_norm <= opts.gtol
        and step <= opts.step_tol * (1.0 + float(np.linalg.norm(x1)))
        and f2 < _BIG / 2
    )
    if not converged and iters >= opts.max_iter:
        raise NoConvergence(
            f"no convergence in {iters} iterations "
            f"(gradient norm {grad_norm:.2e}, step {step:.2e})"
        )
    return x2, converged, iters, hinv if nit2 == 0 else hinv2


def fit_lmm(
    ds: ClusteredDataset, method: str = "REML", opts: FitOptions | None = None
) -> FittedLmm:
    """Fit the LMM by ML or REML.

    Parameters
    ----------
    ds : ClusteredDataset
        Validated clustered data.
    method : str
        ``"ML"`` or ``"REML"``.
    opts : FitOptions, optional
        Optimizer controls; the defaults follow the documented criteria
        (relative parameter change below 1e-8 and finite-difference
        gradient norm below 1e-6, at most 500 iterations).

    Raises
    ------
    NoConvergence
        When the iteration budget is exhausted before the criteria hold.
    SingularH
        When the GLS normal matrix is singular at the optimum.
    """
    reml = _parse_method(method)
    opts = opts or FitOptions()
    stats = SufficientStats.from_dataset(ds)
    x0 = opts.x0 if opts.x0 is not None else _starting_point(ds)
    theta, converged, iters, hess_inv = _optimize(stats, reml, opts, x0)

    pieces = _profile_pieces(theta, stats)
    if pieces is None:
        raise NoConvergence("optimizer returned a numerically unusable point")
    sum_logdet, quad, beta, h, logdet_h = pieces
    if reml:
        loglik = -0.5 * (sum_logdet + quad + logdet_h + (stats.N - stats.p) * _LOG_2PI)
    else:
        loglik = -0.5 * (sum_logdet + quad + stats.N * _LOG_2PI)

    k = ds.k
    c, s2 = theta_to_components(theta, k)
    vc = VarianceComponents(D=c @ c.T, sigma2=s2)
    diag_positions = np.cumsum(np.arange(1, k + 1)) - 1
    boundary = bool(np.any(theta[diag_positions] < -15.0))
    return _assemble_fit(
        ds,
        vc,
        beta,
        float(loglik),
        method="REML" if reml else "ML",
        converged=converged,
        n_iter=iters,
        boundary=boundary,
        theta=theta,
        hess_inv=np.asarray(hess_inv) if hess_inv is not None else None,
    )


def _assemble_fit(
    ds: ClusteredDataset,
    vc: VarianceComponents,
    beta: NDArray,
    loglik: float,
    method: str,
    converged: bool,
    n_iter: int,
    boundary: bool,
    theta: NDArray | None,
    hess_inv: NDArray | None,
) -> FittedLmm:
    """Per-cluster matrices, BLUPs, and the GLS estimating-equation check.

    The returned fit always satisfies sum(X_i' V_i^{-1} e_i) = 0 within
    1e-6 in every component: a violation triggers one round of iterative
    refinement on beta and then SingularH if the gap persists.
    """
    v_list, v_inv_list, g_list, l_list, blups = [], [], [], [], []
    h = np.zeros((ds.p, ds.p))
    score = np.zeros(ds.p)
    for x, z, y in zip(ds.X, ds.Z, ds.y):
        vi = marginal_cov(z, vc)
        lower = cholesky(vi)
        v_inv = scipy.linalg.cho_solve((lower, True), np.eye(vi.shape[0]))
        resid = y - x @ beta
        v_list.append(vi)
        v_inv_list.append(v_inv)
        g_list.append(vc.sigma2 * v_inv)
        l_list.append(lower)
        blups.append(vc.D @ z.T @ (v_inv @ resid))
        h += x.T @ v_inv @ x
        score += x.T @ (v_inv @ resid)
    gap = float(np.max(np.abs(score)))
    if gap > 1e-6:
        # One round of iterative refinement on the GLS solve.
        try:
            beta = beta + scipy.linalg.cho_solve(scipy.linalg.cho_factor(h), score)
        except scipy.linalg.LinAlgError as exc:
            raise SingularH(str(exc)) from exc
        score = np.zeros(ds.p)
        blups = []
        for x, z, y, v_inv in zip(ds.X, ds.Z, ds.y, v_inv_list):
            resid = y - x @ beta
            score += x.T @ (v_inv @ resid)
            blups.append(vc.D @ z.T @ (v_inv @ resid))
        gap = float(np.max(np.abs(score)))
        if gap > 1e-6:
            raise SingularH(
                f"GLS estimating equation violated by {gap:.2e}; "
                "the normal matrix is effectively singular"
            )

    return FittedLmm(
        beta=beta,
        vc=vc,
        method=method,
        loglik=loglik,
        converged=converged,
        n_iter=n_iter,
        H=h,
        V=v_list,
        V_inv=v_inv_list,
        G=g_list,
        L=l_list,
        blups=blups,
        boundary=boundary,
        score_gap=gap,
        theta=theta,
        hess_inv=hess_inv,
    )


def fit_at_components(
    ds: ClusteredDataset, vc: VarianceComponents, method: str = "REML"
) -> FittedLmm:
    """Build a complete fit object at fixed, known variance components.

    No optimization happens: beta is the GLS solution at ``vc`` and the
    log-likelihood is evaluated there.  Useful when the components are
    known by construction (simulations, closed-form examples) and for
    pinning downstream computations to exact inputs.
    """
    beta = gls_beta(ds, vc)
    loglik = profile_loglik(ds, vc, method)
    try:
        theta = components_to_theta(vc.D, vc.sigma2)
    except NotPositiveDefinite:
        theta = None  # D singular: no log-Cholesky representation
    return _assemble_fit(
        ds,
        vc,
        beta,
        loglik,
        method=method.strip().upper(),
        converged=True,
        n_iter=0,
        boundary=False,
        theta=theta,
        hess_inv=None,
    )


def blup(ds: ClusteredDataset, fit: FittedLmm) -> list[NDArray[np.float64]]:
    """Best linear unbiased predictors ``b_i = D Z_i' V_i^{-1} e_i``.

    Recomputed from the stored fit rather than returned from cache, so a
    caller can cross-check the fit's own values.
    """
    out = []
    for x, z, y, v_inv in zip(ds.X, ds.Z, ds.y, fit.V_inv):
        out.append(fit.vc.D @ z.T @ (v_inv @ (y - x @ fit.beta)))
    return out


def fit_many_outcomes(
    ds: ClusteredDataset,
    outcomes: NDArray[np.float64],
    method: str = "REML",
    x0: NDArray[np.float64] | None = None,
    opts: FitOptions | None = None,
):
    """Estimate variance components for many outcomes of one design set.

    Row ``m`` of ``outcomes`` is a stacked outcome vector (clusters
    concatenated in dataset order); all rows share the design matrices
    of ``ds``.  Every row runs the quasi-Newton refinement stage of
    :func:`fit_lmm` in lockstep: one batched objective pass per
    iteration serves every still-active row.  Meant for warm starts
    (null-ensemble refits and the like) where the simplex stage of the
    cold path would add nothing; pass ``x0`` accordingly.

    Per-row arithmetic never mixes rows, so each row's trajectory is
    independent of which other rows happen to share the batch, and
    results do not depend on how callers chunk the work.

    Unlike :func:`fit_lmm` this never raises :class:`NoConvergence`:
    the returned mask reports convergence row by row and the caller
    decides what a failed row means.

    Parameters
    ----------
    outcomes : (M, N) array
    x0 : (d,) or (M, d) array, optional
        Shared or per-row starting parameters; defaults to the same
        scale-aware cold start as ``fit_lmm``.

    Returns
    -------
    thetas : (M, d) array
    converged : (M,) bool array
    n_iter : (M,) int array
    """
    reml = _parse_method(method)
    opts = opts or FitOptions()
    outcomes = np.atleast_2d(np.asarray(outcomes, dtype=float))
    m_rows = outcomes.shape[0]
    if outcomes.shape[1] != ds.N:
        raise ValueError(
            f"outcome rows have {outcomes.shape[1]} values, dataset has {ds.N}"
        )
    stats = SufficientStats.from_dataset(ds)
    obj = _Objective(stats, reml)
    d = obj.dim
    if m_rows == 0:
        return (
            np.empty((0, d)),
            np.empty(0, dtype=bool),
            np.empty(0, dtype=int),
        )

    szy = np.empty((m_rows, len(ds.Z), ds.k))
    sxy = np.zeros((m_rows, ds.p))
    syy = np.zeros(m_rows)
    offset = 0
    for i, (z, x) in enumerate(zip(ds.Z, ds.X)):
        rows = outcomes[:, offset : offset + z.shape[0]]
        offset += z.shape[0]
        szy[:, i, :] = rows @ z
        sxy += rows @ x
        syy += np.einsum("mj,mj->m", rows, rows)

    if x0 is None:
        start = _starting_point(ds)
    else:
        start = np.asarray(x0, dtype=float)
    xs = np.tile(start, (m_rows, 1)) if start.ndim == 1 else start.copy()
    if xs.shape != (m_rows, d):
        raise ValueError(f"x0 must broadcast to ({m_rows}, {d})")

    def eval_rows(points, rows):
        return obj.many(points, szy=szy[rows], sxy=sxy[rows], syy=syy[rows])

    eye = np.eye(d)

    def value_and_grad_rows(points, rows):
        h = obj._fd_scale * (1.0 + np.abs(points))
        plus = points[:, None, :] + h[:, :, None] * eye
        minus = points[:, None, :] - h[:, :, None] * eye
        all_points = np.concatenate(
            [points, plus.reshape(-1, d), minus.reshape(-1, d)]
        )
        all_rows = np.concatenate([rows, np.repeat(rows, d), np.repeat(rows, d)])
        values = eval_rows(all_points, all_rows)
        n_r = points.shape[0]
        v_plus = values[n_r : n_r + n_r * d].reshape(n_r, d)
        v_minus = values[n_r + n_r * d :].reshape(n_r, d)
        return values[:n_r], (v_plus - v_minus) / (2.0 * h)

    f_cur, g_cur = value_and_grad_rows(xs, np.arange(m_rows))
    if opts.hess_inv0 is not None:
        hinv = np.tile(np.asarray(opts.hess_inv0, dtype=float), (m_rows, 1, 1))
    else:
        hinv = np.tile(eye, (m_rows, 1, 1))
    nit = np.zeros(m_rows, dtype=int)
    stalled = np.zeros(m_rows, dtype=int)
    broken = np.zeros(m_rows, dtype=bool)
    noise_scale = 4.0 * np.finfo(float).eps

    while True:
        active = (
            ~broken
            & (nit < opts.max_iter)
            & (np.max(np.abs(g_cur), axis=1) > opts.gtol)
            & (f_cur < _BIG / 2)
        )
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x_a, g_a, f_a = xs[idx], g_cur[idx], f_cur[idx]
        hinv_a = hinv[idx]
        direction = -np.einsum("mij,mj->mi", hinv_a, g_a)
        slope = np.einsum("mi,mi->m", g_a, direction)
        bad_dir = slope >= 0
        if np.any(bad_dir):
            hinv[idx[bad_dir]] = eye
            direction[bad_dir] = -g_a[bad_dir]
            slope[bad_dir] = -np.einsum(
                "mi,mi->m", g_a[bad_dir], g_a[bad_dir]
            )
        noise = noise_scale * (1.0 + np.abs(f_a))
        alpha = np.ones(idx.size)
        x_new = x_a + direction
        f_new, g_new = value_and_grad_rows(x_new, idx)
        accepted = f_new <= f_a + 1e-4 * alpha * slope + noise
        needs_grad = np.zeros(idx.size, dtype=bool)
        trying = np.flatnonzero(~accepted)
        for _ in range(40):
            if trying.size == 0:
                break
            alpha[trying] *= 0.5
            x_try = x_a[trying] + alpha[trying, None] * direction[trying]
            f_try = eval_rows(x_try, idx[trying])
            passed = f_try <= (
                f_a[trying] + 1e-4 * alpha[trying] * slope[trying] + noise[trying]
            )
            hit = trying[passed]
            x_new[hit] = x_try[passed]
            f_new[hit] = f_try[passed]
            accepted[hit] = True
            needs_grad[hit] = True
            trying = trying[~passed]
        if np.any(needs_grad):
            sub = np.flatnonzero(needs_grad)
            f_new[sub], g_new[sub] = value_and_grad_rows(x_new[sub], idx[sub])
        broken[idx[~accepted]] = True  # line search exhausted
        keep = np.flatnonzero(accepted)
        if keep.size == 0:
            continue
        kid = idx[keep]
        nit[kid] += 1
        improved = f_new[keep] < f_a[keep] - 4.0 * noise[keep]
        stalled[kid] = np.where(improved, 0, stalled[kid] + 1)
        s_vec = x_new[keep] - x_a[keep]
        y_vec = g_new[keep] - g_a[keep]
        sy = np.einsum("mi,mi->m", s_vec, y_vec)
        usable = sy > 1e-12 * (
            np.linalg.norm(s_vec, axis=1) * np.linalg.norm(y_vec, axis=1)
        )
        upd = np.flatnonzero(usable)
        if upd.size:
            rho = 1.0 / sy[upd]
            s_u, y_u = s_vec[upd], y_vec[upd]
            left = eye[None] - rho[:, None, None] * (
                s_u[:, :, None] * y_u[:, None, :]
            )
            h_old = hinv[kid[upd]]
            hinv[kid[upd]] = left @ h_old @ left.transpose(0, 2, 1) + rho[
                :, None, None
            ] * (s_u[:, :, None] * s_u[:, None, :])
        xs[kid] = x_new[keep]
        f_cur[kid] = f_new[keep]
        g_cur[kid] = g_new[keep]
        broken[kid[stalled[kid] >= 10]] = True  # grinding in the noise floor

    converged = (np.max(np.abs(g_cur), axis=1) <= opts.gtol) & (f_cur < _BIG / 2)
    return xs, converged, nit
