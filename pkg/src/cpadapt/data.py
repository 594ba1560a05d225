"""Transition datasets and their CSV formats.

A dataset is a flat collection of (x, u, x_next) transitions.  Residual
targets delta = x_next - f_nom(x, u) are always recomputed from the stored
transitions and the caller's nominal model, never persisted, so a stale
nominal model cannot poison training data.

Dataset CSV layout: header row, then one row per transition with columns
x0..x{d-1}, u0..u{m-1}, x_next0..x_next{d-1}.  Trajectory CSV is the same
layout plus a leading `step` column and a trailing `intervention` flag
column (1 on steps where the plant was perturbed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .validation import DimensionError, as_matrix


@dataclass
class Transition:
    """One observed state transition under a known control."""

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray


class Dataset:
    """Column-stored transitions with list-of-records access.

    Attributes
    ----------
    X : (n, d) states
    U : (n, m) controls
    X_next : (n, d) successor states
    """

    def __init__(self, X, U, X_next):
        self.X = as_matrix(X, name="X")
        self.U = as_matrix(U, shape=(self.X.shape[0], None), name="U")
        self.X_next = as_matrix(X_next, shape=(self.X.shape[0], self.X.shape[1]), name="X_next")

    @property
    def state_dim(self) -> int:
        return self.X.shape[1]

    @property
    def control_dim(self) -> int:
        return self.U.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.X[i], self.U[i], self.X_next[i])

    @classmethod
    def from_transitions(cls, transitions) -> "Dataset":
        if len(transitions) == 0:
            raise DimensionError("cannot build a Dataset from zero transitions")
        X = np.stack([t.x for t in transitions])
        U = np.stack([t.u for t in transitions])
        X_next = np.stack([t.x_next for t in transitions])
        return cls(X, U, X_next)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.vstack([self.X, other.X]),
            np.vstack([self.U, other.U]),
            np.vstack([self.X_next, other.X_next]),
        )


def residuals(dataset: Dataset, nominal_step) -> np.ndarray:
    """Residual targets x_next - f_nom(x, u), recomputed on demand.

    nominal_step must accept batched (n, d) states and (n, m) controls and
    return the (n, d) one-step nominal prediction.
    """
    pred = nominal_step(dataset.X, dataset.U)
    pred = as_matrix(pred, shape=dataset.X_next.shape, name="nominal prediction")
    return dataset.X_next - pred


def _header(d: int, m: int) -> list[str]:
    return (
        [f"x{i}" for i in range(d)]
        + [f"u{j}" for j in range(m)]
        + [f"x_next{i}" for i in range(d)]
    )


def write_dataset_csv(path, dataset: Dataset) -> None:
    d, m = dataset.state_dim, dataset.control_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_header(d, m))
        for i in range(len(dataset)):
            row = np.concatenate([dataset.X[i], dataset.U[i], dataset.X_next[i]])
            writer.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("x") and not h.startswith("x_next"))
        m = sum(1 for h in header if h.startswith("u"))
        if header != _header(d, m):
            raise DimensionError(f"unrecognized dataset header {header}")
        rows = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 2 * d + m:
        raise DimensionError("dataset rows do not match header layout")
    return Dataset(rows[:, :d], rows[:, d : d + m], rows[:, d + m :])


def write_trajectory_csv(path, dataset: Dataset, intervention_steps=()) -> None:
    """Persist an ordered trajectory: dataset layout plus step and intervention columns."""
    d, m = dataset.state_dim, dataset.control_dim
    marked = set(int(k) for k in intervention_steps)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + _header(d, m) + ["intervention"])
        for i in range(len(dataset)):
            row = np.concatenate([dataset.X[i], dataset.U[i], dataset.X_next[i]])
            writer.writerow([i] + [repr(float(v)) for v in row] + [int(i in marked)])


def read_trajectory_csv(path) -> tuple[Dataset, list[int]]:
    """Read a trajectory file; returns the dataset and the flagged intervention steps."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "step" or header[-1] != "intervention":
            raise DimensionError(f"unrecognized trajectory header {header}")
        inner = header[1:-1]
        d = sum(1 for h in inner if h.startswith("x") and not h.startswith("x_next"))
        m = sum(1 for h in inner if h.startswith("u"))
        if inner != _header(d, m):
            raise DimensionError(f"unrecognized trajectory header {header}")
        rows = []
        marks = []
        for row in reader:
            rows.append([float(v) for v in row[1:-1]])
            if int(row[-1]):
                marks.append(int(row[0]))
    arr = np.array(rows, dtype=np.float64)
    return Dataset(arr[:, :d], arr[:, d : d + m], arr[:, d + m :]), marks
