"""Monte-Carlo size and power studies for the cusum tests.

The built-in generator draws clustered data from a quadratic mixed
model,

    y_ij = -1 + 0.25 x1_ij + 0.5 x2_ij + beta3 x1_ij^2
           + b_i0 + b_i1 x1_ij + eps_ij,

with x1, x2 iid Uniform(0,1).  A scenario chooses the sample layout,
the noise law, the quadratic coefficient, and which columns of the
generator the *fitted* model keeps, so the classic mis-specification
studies are all reachable: size under a correct fit, a dropped random
slope, a dropped quadratic term, or non-normal noise.

``run_study`` repeats simulate/fit/test ``R`` times and aggregates
empirical rejection proportions per (alpha, scheme, process,
statistic) into a :class:`RejectionTable`.  Everything is keyed off a
single master seed so the table is reproducible bit for bit regardless
of the worker count.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .data import INTERCEPT_NAME, ClusteredDataset, from_arrays
from .estimation import NoConvergence, SingularH, fit_lmm
from .nulls import SCHEME_KINDS, NullRefitFailure, NullScheme, run_gof_many

logger = logging.getLogger(__name__)

GENERATOR_BETA = (-1.0, 0.25, 0.5)
NOISE_LAWS = ("normal", "centered-gamma")
GAMMA_SHAPE = 1.0
GAMMA_SCALE = 2.0

# column pools the fitted model may select from
X_POOL_NAMES = (INTERCEPT_NAME, "x1", "x2", "x1_sq")
Z_POOL_NAMES = (INTERCEPT_NAME, "x1")

DEFAULT_ALPHAS = (0.01, 0.05, 0.1)


@dataclass(frozen=True)
class SimulationScenario:
    """One cell of a simulation study.

    ``fit_x_cols`` / ``fit_z_cols`` index into the generator column
    pools ``(1, x1, x2, x1^2)`` and ``(1, x1)``; the default fits the
    linear fixed part with a random intercept and slope, which is the
    correctly specified model when ``beta3`` is zero.

    With the centered-gamma law every active noise source is drawn
    from the fixed shape-1, scale-2 gamma shifted to mean zero
    (variance 4); the variance fields then only decide whether a
    source is active at all (a variance of 0 silences it).
    """

    name: str = "scenario"
    n: int = 50
    n_i: int = 10
    beta3: float = 0.0
    sigma2_eps: float = 0.5
    sigma2_b0: float = 0.25
    sigma2_b1: float = 0.25
    law: str = "normal"
    fit_x_cols: tuple[int, ...] = (0, 1, 2)
    fit_z_cols: tuple[int, ...] = (0, 1)
    R: int = 500
    M: int = 500
    schemes: tuple[str, ...] = ("refit-flip",)
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fit_x_cols", tuple(self.fit_x_cols))
        object.__setattr__(self, "fit_z_cols", tuple(self.fit_z_cols))
        object.__setattr__(self, "schemes", tuple(self.schemes))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.n < 1 or self.n_i < 2:
            raise ValueError("need at least one cluster with two observations")
        if self.law not in NOISE_LAWS:
            raise ValueError(f"law must be one of {NOISE_LAWS}, got {self.law!r}")
        if self.sigma2_eps <= 0:
            raise ValueError("sigma2_eps must be positive")
        if self.sigma2_b0 < 0 or self.sigma2_b1 < 0:
            raise ValueError("random-effect variances must be non-negative")
        for cols, pool, part in (
            (self.fit_x_cols, X_POOL_NAMES, "fit_x_cols"),
            (self.fit_z_cols, Z_POOL_NAMES, "fit_z_cols"),
        ):
            if not cols or len(set(cols)) != len(cols):
                raise ValueError(f"{part} must be non-empty without duplicates")
            if any(c < 0 or c >= len(pool) for c in cols):
                raise ValueError(f"{part} out of range for the generator pool")
        if self.R < 1 or self.M < 1:
            raise ValueError("R and M must be at least 1")
        if not self.schemes or len(set(self.schemes)) != len(self.schemes):
            raise ValueError("schemes must be non-empty without duplicates")
        for kind in self.schemes:
            if kind not in SCHEME_KINDS:
                raise ValueError(
                    f"scheme must be one of {SCHEME_KINDS}, got {kind!r}"
                )
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ValueError("alphas must lie strictly between 0 and 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "SimulationScenario":
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown scenario fields: {sorted(extra)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path) -> "SimulationScenario":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def noise_draws(law: str, variance: float, rng, size=None):
    """Draw one noise source: mean zero, the law's own variance.

    A zero ``variance`` silences the source for either law; otherwise
    the normal law scales to the requested variance while the centered
    gamma always has variance shape * scale^2 = 4.
    """
    if variance == 0:
        return 0.0 if size is None else np.zeros(size)
    if law == "normal":
        return rng.normal(0.0, np.sqrt(variance), size)
    if law == "centered-gamma":
        return rng.gamma(GAMMA_SHAPE, GAMMA_SCALE, size) - GAMMA_SHAPE * GAMMA_SCALE
    raise ValueError(f"law must be one of {NOISE_LAWS}, got {law!r}")


def simulate_dataset(sc: SimulationScenario, rng) -> ClusteredDataset:
    """Draw one clustered dataset carrying the fitted-model designs.

    The outcome always follows the full generator; only the selected
    columns are kept in the returned design matrices, so a scenario
    whose fit omits the quadratic term (or the random slope) yields a
    mis-specified model for the test to detect.
    """
    y_list, x_list, z_list = [], [], []
    for _ in range(sc.n):
        x1 = rng.uniform(size=sc.n_i)
        x2 = rng.uniform(size=sc.n_i)
        b0 = noise_draws(sc.law, sc.sigma2_b0, rng)
        b1 = noise_draws(sc.law, sc.sigma2_b1, rng)
        eps = noise_draws(sc.law, sc.sigma2_eps, rng, sc.n_i)
        mean = GENERATOR_BETA[0] + GENERATOR_BETA[1] * x1 + GENERATOR_BETA[2] * x2
        y_list.append(mean + sc.beta3 * x1**2 + b0 + b1 * x1 + eps)
        ones = np.ones(sc.n_i)
        pool_x = np.column_stack([ones, x1, x2, x1**2])
        pool_z = np.column_stack([ones, x1])
        x_list.append(pool_x[:, sc.fit_x_cols])
        z_list.append(pool_z[:, sc.fit_z_cols])
    return from_arrays(
        y_list,
        x_list,
        z_list,
        fixed_names=tuple(X_POOL_NAMES[c] for c in sc.fit_x_cols),
        random_names=tuple(Z_POOL_NAMES[c] for c in sc.fit_z_cols),
    )


@dataclass(frozen=True)
class RejectionRow:
    """Empirical rejection rate for one (alpha, scheme, process, statistic)."""

    scenario: str
    alpha: float
    n: int
    n_i: int
    sigma2_b1: float
    beta3: float
    scheme: str
    process: str
    statistic: str
    rejections: int
    replications: int

    @property
    def proportion(self) -> float:
        return self.rejections / self.replications if self.replications else float("nan")

    @property
    def se(self) -> float:
        if not self.replications:
            return float("nan")
        p = self.proportion
        return float(np.sqrt(p * (1 - p) / self.replications))


CSV_HEADER = (
    "scenario,alpha,n,n_i,sigma2_b1,beta3,scheme,process,statistic,"
    "rejections,replications,proportion,se"
)


@dataclass
class RejectionTable:
    """Aggregated study results plus the failure bookkeeping."""

    scenario: SimulationScenario
    seed: int
    rows: list[RejectionRow]
    fit_failures: int = 0
    ensemble_failures: dict[str, int] = field(default_factory=dict)

    def rate(self, alpha, scheme, process, statistic="cvm") -> float:
        for row in self.rows:
            if (
                row.alpha == alpha
                and row.scheme == scheme
                and row.process == process
                and row.statistic == statistic
            ):
                return row.proportion
        raise KeyError((alpha, scheme, process, statistic))

    def to_csv(self, path: str | Path) -> None:
        """Write the long-format table; floats use repr so the output
        is byte-stable for a fixed seed."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CSV_HEADER + "\n")
            for r in self.rows:
                fh.write(
                    f"{r.scenario},{float(r.alpha)!r},{r.n},{r.n_i},"
                    f"{float(r.sigma2_b1)!r},{float(r.beta3)!r},"
                    f"{r.scheme},{r.process},{r.statistic},"
                    f"{r.rejections},{r.replications},"
                    f"{float(r.proportion)!r},{float(r.se)!r}\n"
                )


def nominal_margin(alpha: float, R: int) -> float:
    """Two Monte-Carlo standard errors of a proportion at its nominal level."""
    return float(2 * np.sqrt(alpha * (1 - alpha) / R))


def _scheme_seed(master: int, r: int, s_idx: int) -> int:
    seq = np.random.SeedSequence(master, spawn_key=(r, s_idx))
    return int(seq.generate_state(1, np.uint64)[0])


def _study_replicate(sc: SimulationScenario, master: int, r: int, processes):
    """Simulate, fit, and test once; p-values per scheme, or None markers."""
    rng = np.random.default_rng(np.random.SeedSequence(master, spawn_key=(r,)))
    ds = simulate_dataset(sc, rng)
    try:
        fit = fit_lmm(ds)
    except (NoConvergence, SingularH, np.linalg.LinAlgError) as exc:
        logger.debug("replication %d: fit failed (%s)", r, exc)
        return None
    out = {}
    for s_idx, kind in enumerate(sc.schemes):
        scheme = NullScheme(kind, M=sc.M, seed=_scheme_seed(master, r, s_idx))
        try:
            results = run_gof_many(ds, fit, list(processes), scheme)
        except (NullRefitFailure, SingularH, np.linalg.LinAlgError) as exc:
            logger.debug("replication %d: %s ensemble failed (%s)", r, kind, exc)
            out[kind] = None
            continue
        out[kind] = {
            which: (res.p_ks, res.p_cvm) for which, res in results.items()
        }
    return out


def run_study(
    sc: SimulationScenario,
    *,
    seed: int | None = None,
    workers: int = 1,
    processes=("O", "F"),
) -> RejectionTable:
    """Estimate rejection rates over ``sc.R`` independent replications.

    Each replication simulates a fresh dataset, fits the scenario's
    model, runs every requested scheme, and rejects at level alpha
    when the estimated p-value is at most alpha.  Replications whose
    fit (or whose entire null ensemble) fails are excluded from the
    denominator and counted in the returned table.
    """
    master = sc.seed if seed is None else int(seed)
    processes = tuple(processes)
    args = (repeat(sc), repeat(master), range(sc.R), repeat(processes))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            replicates = list(pool.map(*((_study_replicate,) + args), chunksize=1))
    else:
        replicates = list(map(*((_study_replicate,) + args)))

    fit_failures = sum(1 for rep in replicates if rep is None)
    ensemble_failures = {kind: 0 for kind in sc.schemes}
    counts: dict[tuple, list[int]] = {}
    for alpha in sc.alphas:
        for kind in sc.schemes:
            for which in processes:
                for stat in ("ks", "cvm"):
                    counts[(alpha, kind, which, stat)] = [0, 0]
    for rep in replicates:
        if rep is None:
            continue
        for kind in sc.schemes:
            cell = rep[kind]
            if cell is None:
                ensemble_failures[kind] += 1
                continue
            for which, (p_ks, p_cvm) in cell.items():
                for alpha in sc.alphas:
                    for stat, p in (("ks", p_ks), ("cvm", p_cvm)):
                        tally = counts[(alpha, kind, which, stat)]
                        tally[1] += 1
                        tally[0] += p <= alpha
    if fit_failures:
        logger.info(
            "%s: %d of %d replications excluded (fit failures)",
            sc.name, fit_failures, sc.R,
        )

    rows = [
        RejectionRow(
            scenario=sc.name,
            alpha=alpha,
            n=sc.n,
            n_i=sc.n_i,
            sigma2_b1=sc.sigma2_b1,
            beta3=sc.beta3,
            scheme=kind,
            process=which,
            statistic=stat,
            rejections=counts[(alpha, kind, which, stat)][0],
            replications=counts[(alpha, kind, which, stat)][1],
        )
        for alpha in sc.alphas
        for kind in sc.schemes
        for which in processes
        for stat in ("ks", "cvm")
    ]
    return RejectionTable(
        scenario=sc,
        seed=master,
        rows=rows,
        fit_failures=fit_failures,
        ensemble_failures=ensemble_failures,
    )
