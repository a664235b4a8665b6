"""Clustered-data representation, CSV ingestion and identifiability checks.

A dataset holds, for each cluster i, an outcome vector y_i of length n_i,
a fixed-effects design X_i with p columns and a random-effects design Z_i
with k columns.  The model

    y_i = X_i beta + Z_i b_i + eps_i

is identifiable only when sum(n_i - k) > 0 and at least one Z_i has full
column rank k, and the stacked X must have full column rank p.  Cluster
order is first appearance in the file and row order within a cluster is
file order; nothing downstream depends on either beyond determinism.

There is no formula language.  The columns entering X and Z are named
explicitly in a JSON config, for example::

    {"cluster": "id", "outcome": "y", "fixed": ["age", "dose"],
     "random": ["age"], "fixed_intercept": true, "random_intercept": true}
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

INTERCEPT_NAME = "(intercept)"


class DataError(ValueError):
    """Base class for ingestion and validation failures."""


class MissingColumn(DataError):
    """A column named in the config is absent from the CSV header."""


class NonNumericCell(DataError):
    """A required cell could not be parsed as a float."""


class IdentifiabilityViolation(DataError):
    """sum(n_i - k) <= 0 or no cluster has a full-rank random design."""


class RankDeficientX(DataError):
    """The stacked fixed-effects design does not have full column rank."""


@dataclass(frozen=True)
class ModelConfig:
    """Names of the columns entering the model, plus intercept switches."""

    cluster: str
    outcome: str
    fixed: tuple[str, ...] = ()
    random: tuple[str, ...] = ()
    fixed_intercept: bool = True
    random_intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        if not self.fixed_intercept and not self.fixed:
            raise ValueError("fixed part is empty: no intercept and no columns")
        if not self.random_intercept and not self.random:
            raise ValueError("random part is empty: no intercept and no columns")

    @property
    def fixed_names(self) -> tuple[str, ...]:
        head = (INTERCEPT_NAME,) if self.fixed_intercept else ()
        return head + self.fixed

    @property
    def random_names(self) -> tuple[str, ...]:
        head = (INTERCEPT_NAME,) if self.random_intercept else ()
        return head + self.random

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(
            cluster=raw["cluster"],
            outcome=raw["outcome"],
            fixed=tuple(raw.get("fixed", ())),
            random=tuple(raw.get("random", ())),
            fixed_intercept=bool(raw.get("fixed_intercept", True)),
            random_intercept=bool(raw.get("random_intercept", True)),
        )

    def to_json(self, path: str | Path) -> None:
        payload = {
            "cluster": self.cluster,
            "outcome": self.outcome,
            "fixed": list(self.fixed),
            "random": list(self.random),
            "fixed_intercept": self.fixed_intercept,
            "random_intercept": self.random_intercept,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


@dataclass
class ClusteredDataset:
    """Per-cluster outcome and design matrices.

    Attributes
    ----------
    labels : list of str
        Cluster identifiers in first-appearance order.
    y : list of ndarray
        Outcome vectors, one per cluster.
    X : list of ndarray
        Fixed-effects designs, each ``(n_i, p)``.
    Z : list of ndarray
        Random-effects designs, each ``(n_i, k)``.
    fixed_names, random_names : tuple of str
        Column names, including the intercept column when present.
    """

    labels: list[str]
    y: list[NDArray[np.float64]]
    X: list[NDArray[np.float64]]
    Z: list[NDArray[np.float64]]
    fixed_names: tuple[str, ...] = ()
    random_names: tuple[str, ...] = ()
    config: ModelConfig | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_i(self) -> NDArray[np.int_]:
        return np.array([len(v) for v in self.y])

    @property
    def N(self) -> int:
        return int(sum(len(v) for v in self.y))

    @property
    def p(self) -> int:
        return self.X[0].shape[1]

    @property
    def k(self) -> int:
        return self.Z[0].shape[1]

    def stacked(self):
        """Return (y, X, Z) stacked over clusters in order."""
        return (
            np.concatenate(self.y),
            np.vstack(self.X),
            np.vstack(self.Z),
        )

    def with_outcome(self, y_new: list[NDArray[np.float64]]) -> "ClusteredDataset":
        """A shallow copy sharing the designs but carrying a new outcome."""
        if len(y_new) != self.n:
            raise ValueError("outcome list length does not match cluster count")
        return ClusteredDataset(
            labels=self.labels,
            y=list(y_new),
            X=self.X,
            Z=self.Z,
            fixed_names=self.fixed_names,
            random_names=self.random_names,
            config=self.config,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClusteredDataset):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.fixed_names == other.fixed_names
            and self.random_names == other.random_names
            and all(np.array_equal(a, b) for a, b in zip(self.y, other.y))
            and all(np.array_equal(a, b) for a, b in zip(self.X, other.X))
            and all(np.array_equal(a, b) for a, b in zip(self.Z, other.Z))
        )


def _design(rows: list[dict], names: tuple[str, ...], intercept: bool) -> np.ndarray:
    cols = []
    if intercept:
        cols.append(np.ones(len(rows)))
    for name in names:
        cols.append(np.array([row[name] for row in rows]))
    return np.column_stack(cols)


def validate(ds: ClusteredDataset) -> dict[str, bool]:
    """Per-check report of the dataset invariants.

    Returns a dict mapping check name to pass/fail; never raises.
    """
    k = ds.k
    n_i = ds.n_i
    _, x_stacked, _ = ds.stacked()
    checks = {
        "cluster_sizes_positive": bool(np.all(n_i >= 1)),
        "fixed_design_full_rank": bool(
            np.linalg.matrix_rank(x_stacked) == ds.p and ds.N >= ds.p
        ),
        "residual_degrees_of_freedom": bool(int(np.sum(n_i - k)) > 0),
        "some_full_rank_random_design": any(
            np.linalg.matrix_rank(z) == k for z in ds.Z
        ),
        "consistent_column_counts": all(x.shape[1] == ds.p for x in ds.X)
        and all(z.shape[1] == k for z in ds.Z),
    }
    return checks


def _raise_on_invalid(ds: ClusteredDataset) -> None:
    report = validate(ds)
    if not report["fixed_design_full_rank"]:
        raise RankDeficientX(
            "stacked fixed-effects design is rank deficient "
            f"(p = {ds.p}, rank = {np.linalg.matrix_rank(np.vstack(ds.X))})"
        )
    if not (
        report["residual_degrees_of_freedom"]
        and report["some_full_rank_random_design"]
    ):
        raise IdentifiabilityViolation(
            "need sum(n_i - k) > 0 and at least one full-rank Z_i; got "
            f"sum(n_i - k) = {int(np.sum(ds.n_i - ds.k))}, "
            f"full-rank Z count = {sum(np.linalg.matrix_rank(z) == ds.k for z in ds.Z)}"
        )


def load_dataset(csv_path: str | Path, config: ModelConfig) -> ClusteredDataset:
    """Read a long-format CSV into a validated ClusteredDataset.

    The file must be UTF-8 with a header row.  Rows are grouped by the
    cluster column in first-appearance order and kept in file order
    within each cluster.

    Raises
    ------
    MissingColumn, NonNumericCell, RankDeficientX, IdentifiabilityViolation
    """
    needed = {config.cluster, config.outcome, *config.fixed, *config.random}
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = sorted(needed - set(header))
        if missing:
            raise MissingColumn(f"columns not in {csv_path}: {', '.join(missing)}")
        groups: dict[str, list[dict]] = {}
        order: list[str] = []
        numeric = sorted(needed - {config.cluster})
        for lineno, row in enumerate(reader, start=2):
            parsed = {}
            for name in numeric:
                try:
                    parsed[name] = float(row[name])
                except (TypeError, ValueError):
                    raise NonNumericCell(
                        f"line {lineno}, column {name!r}: {row[name]!r}"
                    ) from None
            label = row[config.cluster]
            if label not in groups:
                groups[label] = []
                order.append(label)
            groups[label].append(parsed)

    if not order:
        raise DataError(f"{csv_path} contains no data rows")

    ds = ClusteredDataset(
        labels=order,
        y=[np.array([r[config.outcome] for r in groups[g]]) for g in order],
        X=[_design(groups[g], config.fixed, config.fixed_intercept) for g in order],
        Z=[_design(groups[g], config.random, config.random_intercept) for g in order],
        fixed_names=config.fixed_names,
        random_names=config.random_names,
        config=config,
    )
    _raise_on_invalid(ds)
    return ds


def export_dataset(ds: ClusteredDataset, csv_path: str | Path) -> None:
    """Write the dataset back to long-format CSV.

    Intercept columns are not written; they are regenerated by the config
    on reload.  Values are written with full round-trip precision so that
    export followed by load reproduces the dataset exactly.
    """
    if ds.config is None:
        raise ValueError("dataset carries no config; cannot name the columns")
    cfg = ds.config
    data_cols = list(dict.fromkeys(cfg.fixed + cfg.random))
    x_names = list(cfg.fixed_names)
    z_names = list(cfg.random_names)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([cfg.cluster, cfg.outcome, *data_cols])
        for label, y_i, x_i, z_i in zip(ds.labels, ds.y, ds.X, ds.Z):
            for j in range(len(y_i)):
                row = [label, repr(float(y_i[j]))]
                for name in data_cols:
                    if name in x_names:
                        value = x_i[j, x_names.index(name)]
                    else:
                        value = z_i[j, z_names.index(name)]
                    row.append(repr(float(value)))
                writer.writerow(row)


def from_arrays(
    y: list[NDArray[np.float64]],
    X: list[NDArray[np.float64]],
    Z: list[NDArray[np.float64]],
    labels: list[str] | None = None,
    fixed_names: tuple[str, ...] = (),
    random_names: tuple[str, ...] = (),
    config: ModelConfig | None = None,
    check: bool = True,
) -> ClusteredDataset:
    """Assemble a dataset from in-memory per-cluster arrays."""
    y = [np.asarray(v, dtype=float).reshape(-1) for v in y]
    X = [np.atleast_2d(np.asarray(m, dtype=float)) for m in X]
    Z = [np.atleast_2d(np.asarray(m, dtype=float)) for m in Z]
    if labels is None:
        labels = [str(i + 1) for i in range(len(y))]
    if not fixed_names and X:
        fixed_names = tuple(f"x{j}" for j in range(X[0].shape[1]))
    if not random_names and Z:
        random_names = tuple(f"z{j}" for j in range(Z[0].shape[1]))
    ds = ClusteredDataset(
        labels=list(labels),
        y=y,
        X=X,
        Z=Z,
        fixed_names=fixed_names,
        random_names=random_names,
        config=config,
    )
    if check:
        _raise_on_invalid(ds)
    return ds
