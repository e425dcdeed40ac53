"""Error metrics and the seeded Monte Carlo sweep over (C, M).

Every (C, M, repeat) task draws its own dataset from a seed sequence keyed by
``(seed, C, M, repeat)``, so results do not depend on how tasks are scheduled
across worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from hetid.datamodel import HeterogeneousDataset, RegressionTarget, StackedProblem, stack_problem
from hetid.derivatives import DifferenceSpec, differentiate_experiment
from hetid.dictionary import DictionarySpec, build_dictionary, repressilator_spec, true_weights
from hetid.simulator import GenerationConfig, IntegrationError, experiment_params, generate_dataset
from hetid.solver import SolverError, SolverOptions, group_lasso_baseline, identify

log = logging.getLogger(__name__)

ALGORITHMS = ("group_lasso", "full")
FAILURE_LIMIT = 0.2
CSV_HEADER = ["algorithm", "C", "M", "repeat", "state", "rnmse", "precision", "recall", "failed"]


def rnmse(w_est, w_true) -> float:
    """``||w_est - w_true|| / ||w_true||`` over the flattened (stacked) weights."""
    w_est = np.asarray(w_est, dtype=float).reshape(-1)
    w_true = np.asarray(w_true, dtype=float).reshape(-1)
    if w_est.shape != w_true.shape:
        raise ValueError(f"shape mismatch: {w_est.shape} vs {w_true.shape}")
    norm = np.linalg.norm(w_true)
    if norm == 0:
        raise ValueError("true weights have zero norm")
    return float(np.linalg.norm(w_est - w_true) / norm)


def support_recovery(result, truth) -> tuple:
    """Precision and recall of a recovered block support.

    ``result`` is an IdentificationResult or an iterable of block indices;
    ``truth`` is a true weight array (blocks with nonzero norm) or an iterable
    of indices.  An empty recovered support scores ``(0.0, 0.0)``.
    """
    found = set(int(i) for i in getattr(result, "support", result))
    if isinstance(truth, np.ndarray) and truth.dtype.kind == "f":
        t = truth.reshape(truth.shape[0], -1)
        true_set = set(int(i) for i in np.flatnonzero(np.linalg.norm(t, axis=1) > 0))
    else:
        true_set = set(int(i) for i in truth)
    if not found:
        return 0.0, 0.0
    hits = len(found & true_set)
    recall = hits / len(true_set) if true_set else 0.0
    return hits / len(found), recall


def state_problems(ds: HeterogeneousDataset, diff: DifferenceSpec, spec: DictionarySpec,
                   states=None, sign_constraints=()) -> list:
    """Derivatives, dictionaries and one stacked problem per state index."""
    derivs = [differentiate_experiment(exp, diff) for exp in ds.experiments]
    dicts = [build_dictionary(exp, spec, idx) for exp, (_, idx) in zip(ds.experiments, derivs)]
    states = range(ds.n_x) if states is None else states
    problems = []
    for n in states:
        target = RegressionTarget(tuple(d[:, n] for d, _ in derivs), n)
        problems.append(stack_problem(target, dicts, sign_constraints))
    return problems


def stacked_truth(ds: HeterogeneousDataset, spec: DictionarySpec, n: int) -> np.ndarray:
    """``(N, C)`` true weights of state ``n`` from the recorded generator parameters."""
    return np.stack([true_weights(experiment_params(exp), spec, n) for exp in ds.experiments], axis=1)


@dataclass(frozen=True)
class SweepConfig:
    C_grid: tuple = (1, 2, 4, 6, 8, 10)
    M_grid: tuple = (10, 20, 30, 40, 50)
    repeats: int = 20
    algorithms: tuple = ALGORITHMS
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    derivative: DifferenceSpec = field(default_factory=DifferenceSpec)
    dictionary: Optional[DictionarySpec] = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    lam: float = 1.0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.C_grid or not self.M_grid:
            raise ValueError("grids must be non-empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ValueError(f"algorithms must be a non-empty subset of {ALGORITHMS}, got {bad}")
        if min(self.C_grid) < 1:
            raise ValueError("C values must be >= 1")
        n_avail = len(self.generation.sample_times)
        if min(self.M_grid) < 2 * self.derivative.k + 1:
            raise ValueError(f"M values must be >= {2 * self.derivative.k + 1} for k={self.derivative.k}")
        if max(self.M_grid) > n_avail:
            raise ValueError(f"M values must be <= {n_avail} samples (t_end / sample_interval + 1)")

    @property
    def spec(self) -> DictionarySpec:
        return self.dictionary if self.dictionary is not None else repressilator_spec()


@dataclass(frozen=True)
class RunRecord:
    algorithm: str
    C: int
    M: int
    repeat: int
    state: int
    rnmse: float
    precision: float
    recall: float
    failed: bool
    exact_support: bool = False
    error: str = ""


@dataclass
class CellSummary:
    algorithm: str
    C: int
    M: int
    mean: float
    std: float
    min: float
    max: float
    n_ok: int
    n_failed: int
    support_rate: float
    invalid: bool


@dataclass
class SweepReport:
    records: list
    cells: list
    config: SweepConfig
    wall_time: float = 0.0

    def cell(self, algorithm: str, C: int, M: int) -> CellSummary:
        for c in self.cells:
            if (c.algorithm, c.C, c.M) == (algorithm, C, M):
                return c
        raise KeyError((algorithm, C, M))

    def best_cell(self, algorithm: str) -> CellSummary:
        """Valid cell with the lowest mean RNMSE."""
        cands = [c for c in self.cells if c.algorithm == algorithm and not c.invalid and c.n_ok]
        if not cands:
            raise ValueError(f"no valid cells for {algorithm}")
        return min(cands, key=lambda c: (c.mean, c.C, c.M))

    @property
    def invalid_cells(self) -> list:
        return [c for c in self.cells if c.invalid]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.records:
            writer.writerow([r.algorithm, r.C, r.M, r.repeat, r.state + 1, _num(r.rnmse),
                             _num(r.precision), _num(r.recall), int(r.failed)])
        return buf.getvalue()

    def heatmap_csv(self, algorithm: str) -> str:
        """Mean RNMSE matrix: one row per C, one column per M (empty when no valid runs)."""
        Ms = sorted(self.config.M_grid)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["C\\M"] + Ms)
        for C in sorted(self.config.C_grid):
            row = [C]
            for M in Ms:
                c = self.cell(algorithm, C, M)
                row.append(_num(c.mean) if c.n_ok else "")
            writer.writerow(row)
        return buf.getvalue()

    def summary(self) -> dict:
        best = {}
        for alg in self.config.algorithms:
            try:
                b = self.best_cell(alg)
                best[alg] = {"C": b.C, "M": b.M, "mean_rnmse": _jsonnum(b.mean)}
            except ValueError:
                best[alg] = None
        cfg = self.config
        return {
            "config": {
                "C_grid": list(cfg.C_grid),
                "M_grid": list(cfg.M_grid),
                "repeats": cfg.repeats,
                "algorithms": list(cfg.algorithms),
                "seed": cfg.seed,
                "lambda": cfg.lam,
                "generation": {k: v for k, v in asdict(cfg.generation).items() if k != "mean_params"},
                "derivative_k": cfg.derivative.k,
                "solver": {k: v for k, v in asdict(cfg.solver).items() if k != "admm"},
                "admm": asdict(cfg.solver.admm),
                "dictionary": cfg.spec.names,
            },
            "cells": [{k: _jsonnum(v) if isinstance(v, float) else v for k, v in asdict(c).items()}
                      for c in self.cells],
            "best": best,
            "invalid_cells": [[c.algorithm, c.C, c.M] for c in self.invalid_cells],
        }

    def write(self, directory) -> dict:
        """Write ``runs.csv``, ``summary.json``, ``heatmap_<alg>.csv`` and ``timing.json``.

        All files except ``timing.json`` are byte-identical for a fixed
        configuration, whatever the number of worker processes.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"runs": directory / "runs.csv", "summary": directory / "summary.json"}
        paths["runs"].write_text(self.to_csv())
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        for alg in self.config.algorithms:
            p = directory / f"heatmap_{alg}.csv"
            p.write_text(self.heatmap_csv(alg))
            paths[f"heatmap_{alg}"] = p
        paths["timing"] = directory / "timing.json"
        paths["timing"].write_text(json.dumps({"wall_time_s": self.wall_time}) + "\n")
        return paths


def _num(x: float) -> str:
    return "nan" if not math.isfinite(x) else repr(float(x))


def _jsonnum(x: float):
    return float(x) if math.isfinite(x) else None


def task_seed(seed: int, C: int, M: int, repeat: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(C), int(M), int(repeat)])


_EXPECTED_FAILURES = (IntegrationError, SolverError, np.linalg.LinAlgError, FloatingPointError, ValueError)


def run_task(config: SweepConfig, C: int, M: int, repeat: int) -> list:
    """All records of one (C, M, repeat) task: every algorithm on every state."""
    spec = config.spec
    gen = replace(config.generation, C=C, seed=config.seed)
    n_states = gen.mean_params.n
    with threadpool_limits(limits=1):
        try:
            ds = generate_dataset(gen, seed=task_seed(config.seed, C, M, repeat)).head(M)
            problems = state_problems(ds, config.derivative, spec)
        except _EXPECTED_FAILURES as exc:
            log.warning("C=%d M=%d repeat=%d: data generation failed: %s", C, M, repeat, exc)
            return [RunRecord(a, C, M, repeat, n, math.nan, math.nan, math.nan, True, error=str(exc))
                    for a in config.algorithms for n in range(n_states)]
        out = []
        for alg in config.algorithms:
            for n, problem in enumerate(problems):
                out.append(_score(alg, problem, ds, spec, n, config, C, M, repeat))
    return out


def _score(alg: str, problem: StackedProblem, ds, spec, n, config, C, M, repeat) -> RunRecord:
    try:
        if alg == "group_lasso":
            res = group_lasso_baseline(problem, config.lam, config.solver.admm, config.solver.support_tol)
        else:
            res = identify(problem, config.solver)
        truth = stacked_truth(ds, spec, n)
        err = rnmse(res.w, truth)
        if not math.isfinite(err):
            raise FloatingPointError("non-finite weights")
    except _EXPECTED_FAILURES as exc:
        log.warning("%s C=%d M=%d repeat=%d state=%d failed: %s", alg, C, M, repeat, n + 1, exc)
        return RunRecord(alg, C, M, repeat, n, math.nan, math.nan, math.nan, True, error=str(exc))
    prec, rec = support_recovery(res, truth)
    exact = set(res.support) == set(np.flatnonzero(np.linalg.norm(truth, axis=1) > 0).tolist())
    return RunRecord(alg, C, M, repeat, n, err, prec, rec, False, exact)


def _run_task_tuple(args):
    return run_task(*args)


def summarize(records: list, config: SweepConfig) -> list:
    cells = []
    for alg in config.algorithms:
        for C in config.C_grid:
            for M in config.M_grid:
                rows = [r for r in records if (r.algorithm, r.C, r.M) == (alg, C, M)]
                ok = [r for r in rows if not r.failed]
                vals = np.array([r.rnmse for r in ok])
                n_fail = len(rows) - len(ok)
                cells.append(CellSummary(
                    alg, C, M,
                    mean=float(vals.mean()) if vals.size else math.nan,
                    std=float(vals.std()) if vals.size else math.nan,
                    min=float(vals.min()) if vals.size else math.nan,
                    max=float(vals.max()) if vals.size else math.nan,
                    n_ok=len(ok),
                    n_failed=n_fail,
                    support_rate=float(np.mean([r.exact_support for r in ok])) if ok else math.nan,
                    invalid=bool(rows) and n_fail > FAILURE_LIMIT * len(rows),
                ))
    return cells


def run_sweep(config: SweepConfig, threads: Optional[int] = None) -> SweepReport:
    """Run every (C, M, repeat) task, in worker processes when ``threads > 1``.

    Records come back sorted by ``(algorithm, C, M, repeat, state)``, so the
    report is identical for any worker count.
    """
    threads = config.threads if threads is None else threads
    tasks = [(config, C, M, r) for C in config.C_grid for M in config.M_grid for r in range(config.repeats)]
    t0 = time.perf_counter()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_run_task_tuple, tasks))
    else:
        chunks = [_run_task_tuple(t) for t in tasks]
    records = [r for chunk in chunks for r in chunk]
    order = {a: i for i, a in enumerate(config.algorithms)}
    records.sort(key=lambda r: (order[r.algorithm], r.C, r.M, r.repeat, r.state))
    return SweepReport(records, summarize(records, config), config, time.perf_counter() - t0)
