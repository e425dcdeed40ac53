"""Experiments, regression targets and the stacked multi-experiment problem.

A stacked problem keeps the per-experiment dictionaries as a ``(C, M, N)``
array instead of the mostly-zero ``CM x NC`` matrix.  Weights are handled as
``(N, C)`` arrays whose row-major ravel is the stacked ordering
``[w_1^[1..C] | ... | w_N^[1..C]]``: block index slowest, experiment fastest.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

SIGN_CONSTRAINTS = ("free", "nonneg", "nonpos")


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim == 1 and ndim == 2:
        arr = arr[:, None]
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeSeriesExperiment:
    """One experiment: sample instants, sampled states and optional inputs."""

    id: int
    times: np.ndarray
    states: np.ndarray
    inputs: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times, 1, "times"))
        object.__setattr__(self, "states", _frozen(self.states, 2, "states"))
        if self.inputs is not None:
            object.__setattr__(self, "inputs", _frozen(self.inputs, 2, "inputs"))

    @property
    def n_samples(self) -> int:
        return len(self.times)

    @property
    def n_x(self) -> int:
        return self.states.shape[1]

    @property
    def n_u(self) -> int:
        return 0 if self.inputs is None else self.inputs.shape[1]

    def head(self, m: int) -> "TimeSeriesExperiment":
        """First ``m`` samples of the experiment."""
        inputs = None if self.inputs is None else self.inputs[:m]
        return TimeSeriesExperiment(self.id, self.times[:m], self.states[:m], inputs, dict(self.meta))


@dataclass(frozen=True)
class HeterogeneousDataset:
    experiments: tuple
    n_x: int
    n_u: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "experiments", tuple(self.experiments))

    @property
    def C(self) -> int:
        return len(self.experiments)

    def head(self, m: int) -> "HeterogeneousDataset":
        return HeterogeneousDataset(tuple(e.head(m) for e in self.experiments), self.n_x, self.n_u, dict(self.meta))


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)

    def __str__(self) -> str:
        return "\n".join(self.violations) if self.violations else "dataset valid"


def validate_dataset(ds: HeterogeneousDataset) -> ValidationReport:
    """Collect every invariant violation of ``ds``; an empty report means valid."""
    report = ValidationReport()
    if ds.C < 1:
        report.violations.append("dataset has no experiments")
        return report
    lengths = set()
    for exp in ds.experiments:
        tag = f"experiment {exp.id}"
        t = exp.times
        if exp.states.shape[0] != len(t):
            report.violations.append(f"{tag}: states rows ({exp.states.shape[0]}) != times length ({len(t)})")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            report.violations.append(f"{tag}: times not increasing")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(exp.states)):
            report.violations.append(f"{tag}: non-finite values")
        if exp.n_x != ds.n_x:
            report.violations.append(f"{tag}: n_x = {exp.n_x}, dataset declares {ds.n_x}")
        if exp.n_u != ds.n_u:
            report.violations.append(f"{tag}: n_u = {exp.n_u}, dataset declares {ds.n_u}")
        if exp.inputs is not None:
            if exp.inputs.shape[0] != len(t):
                report.violations.append(f"{tag}: inputs rows != times length")
            if not np.all(np.isfinite(exp.inputs)):
                report.violations.append(f"{tag}: non-finite inputs")
        lengths.add(len(t))
    if len(lengths) > 1:
        detail = ", ".join(f"{e.id}:{e.n_samples}" for e in ds.experiments)
        report.violations.append(f"unequal lengths across experiments ({detail})")
    return report


@dataclass(frozen=True)
class RegressionTarget:
    """Derivative targets for one state variable, one vector per experiment."""

    y_per_experiment: tuple
    state_index: int

    def __post_init__(self):
        ys = tuple(_frozen(y, 1, "target") for y in self.y_per_experiment)
        for y in ys:
            if not np.all(np.isfinite(y)):
                raise ValueError("regression target contains non-finite values")
        object.__setattr__(self, "y_per_experiment", ys)

    @property
    def C(self) -> int:
        return len(self.y_per_experiment)


@dataclass(frozen=True)
class StackedProblem:
    """Block-structured regression ``y = A w + xi`` over C experiments.

    Attributes
    ----------
    y : (C, M) array
        Per-experiment targets; ``y_stacked`` gives the length-CM vector.
    A : (C, M, N) array
        ``A[c, :, i]`` is column i of experiment c's dictionary.  Block i of the
        stacked matrix is the block-diagonal of ``A[0, :, i], ..., A[C-1, :, i]``.
    sign_constraints : tuple of str
        Per-block restriction, one of ``"free"``, ``"nonneg"``, ``"nonpos"``.
    """

    y: np.ndarray
    A: np.ndarray
    sign_constraints: tuple = ()
    state_index: Optional[int] = None

    def __post_init__(self):
        y = _frozen(self.y, 2, "y") if np.ndim(self.y) != 1 else _frozen(np.asarray(self.y)[None, :], 2, "y")
        A = np.array(self.A, dtype=float)
        if A.ndim != 3:
            raise ValueError(f"A must have shape (C, M, N), got {A.shape}")
        A.setflags(write=False)
        if y.shape != A.shape[:2]:
            raise ValueError(f"y shape {y.shape} does not match dictionary layout {A.shape[:2]}")
        if A.shape[2] < 1:
            raise ValueError("need at least one dictionary block")
        signs = tuple(self.sign_constraints) or ("free",) * A.shape[2]
        if len(signs) != A.shape[2] or any(s not in SIGN_CONSTRAINTS for s in signs):
            raise ValueError(f"sign_constraints must be {A.shape[2]} entries from {SIGN_CONSTRAINTS}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "sign_constraints", signs)

    @property
    def layout(self) -> tuple:
        return self.A.shape

    @property
    def C(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> int:
        return self.A.shape[1]

    @property
    def N(self) -> int:
        return self.A.shape[2]

    @property
    def y_stacked(self) -> np.ndarray:
        return self.y.reshape(-1)

    def block(self, i: int) -> np.ndarray:
        """Dense ``CM x C`` block i (tests and small oracles only)."""
        C, M, _ = self.A.shape
        out = np.zeros((C * M, C))
        for c in range(C):
            out[c * M:(c + 1) * M, c] = self.A[c, :, i]
        return out

    def dense(self) -> np.ndarray:
        """Materialize the ``CM x NC`` stacked matrix with columns ordered ``i*C + c``."""
        C, M, N = self.A.shape
        out = np.zeros((C * M, N * C))
        for c in range(C):
            out[c * M:(c + 1) * M, c::C] = self.A[c]
        return out

    def matvec(self, w) -> np.ndarray:
        """Stacked ``A @ w`` for ``w`` given as ``(N, C)`` or flat NC; returns length CM."""
        W = np.asarray(w, dtype=float).reshape(self.N, self.C)
        return np.einsum("cmn,nc->cm", self.A, W).reshape(-1)

    def rmatvec(self, r) -> np.ndarray:
        """``A.T @ r`` for a length-CM vector, returned as ``(N, C)``."""
        R = np.asarray(r, dtype=float).reshape(self.C, self.M)
        return np.einsum("cmn,cm->nc", self.A, R)

    def unstack(self) -> tuple:
        """Return ``(ys, As)``: per-experiment targets and ``M x N`` dictionaries."""
        return [self.y[c].copy() for c in range(self.C)], [self.A[c].copy() for c in range(self.C)]

    def permute_blocks(self, order: Sequence[int]) -> "StackedProblem":
        order = list(order)
        return StackedProblem(self.y, self.A[:, :, order], tuple(self.sign_constraints[i] for i in order), self.state_index)


def _dictionary_values(d) -> np.ndarray:
    return np.asarray(getattr(d, "values", d), dtype=float)


def _check_layout(target: RegressionTarget, dictionaries) -> tuple:
    mats = [_dictionary_values(d) for d in dictionaries]
    if len(mats) != target.C:
        raise ValueError(f"{target.C} targets but {len(mats)} dictionaries")
    if not mats:
        raise ValueError("no experiments")
    shape = mats[0].shape
    for c, (y, a) in enumerate(zip(target.y_per_experiment, mats)):
        if a.ndim != 2 or a.shape != shape:
            raise ValueError(f"dictionary {c} has shape {a.shape}, expected {shape}")
        if len(y) != a.shape[0]:
            raise ValueError(f"target {c} has length {len(y)}, dictionary has {a.shape[0]} rows")
    return np.stack(target.y_per_experiment), np.stack(mats)


def stack_problem(target: RegressionTarget, dictionaries, sign_constraints: Sequence[str] = ()) -> StackedProblem:
    """Stack per-experiment regressions into the block-sparse problem."""
    y, A = _check_layout(target, dictionaries)
    return StackedProblem(y, A, tuple(sign_constraints), target.state_index)


def concatenate_problem(target: RegressionTarget, dictionaries) -> tuple:
    """Single shared-weight regression: ``(y_cat, A_cat)`` of shapes (CM,) and (CM, N)."""
    y, A = _check_layout(target, dictionaries)
    C, M, N = A.shape
    return y.reshape(-1), A.reshape(C * M, N)


# -- on-disk format -----------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def experiment_to_csv(exp: TimeSeriesExperiment) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["t"] + [f"x{j + 1}" for j in range(exp.n_x)] + [f"u{j + 1}" for j in range(exp.n_u)]
    writer.writerow(header)
    for m in range(exp.n_samples):
        row = [exp.times[m], *exp.states[m]]
        if exp.inputs is not None:
            row.extend(exp.inputs[m])
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_dataset(ds: HeterogeneousDataset, directory) -> Path:
    """Write one CSV per experiment plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for exp in ds.experiments:
        name = f"experiment_{exp.id:03d}.csv"
        (directory / name).write_text(experiment_to_csv(exp))
        entries.append({"id": exp.id, "file": name, "meta": _jsonable(exp.meta)})
    manifest = {"n_x": ds.n_x, "n_u": ds.n_u, "experiments": entries, "meta": _jsonable(ds.meta)}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_experiment_csv(path, n_x: int, n_u: int = 0, exp_id: int = 1, meta: Optional[dict] = None) -> TimeSeriesExperiment:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    expected = 1 + n_x + n_u
    if len(header) != expected or header[0] != "t":
        raise ValueError(f"{path}: header {header} does not match n_x={n_x}, n_u={n_u}")
    data = np.array([[float(v) for v in row] for row in body], dtype=float).reshape(-1, expected)
    inputs = data[:, 1 + n_x:] if n_u else None
    return TimeSeriesExperiment(exp_id, data[:, 0], data[:, 1:1 + n_x], inputs, meta or {})


def read_dataset(manifest_path) -> HeterogeneousDataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    n_x, n_u = int(manifest["n_x"]), int(manifest.get("n_u", 0))
    exps = []
    for entry in manifest["experiments"]:
        exps.append(read_experiment_csv(manifest_path.parent / entry["file"], n_x, n_u,
                                        int(entry["id"]), entry.get("meta", {})))
    return HeterogeneousDataset(tuple(exps), n_x, n_u, manifest.get("meta", {}))
