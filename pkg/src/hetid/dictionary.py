"""Candidate basis functions and per-experiment dictionary matrices."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from hetid.datamodel import TimeSeriesExperiment

log = logging.getLogger(__name__)

KINDS = ("linear", "hill", "constant", "mass_action", "michaelis_menten")
_NONNEGATIVE_KINDS = ("hill", "michaelis_menten")


class NegativeStateError(ValueError):
    """A nonlinear basis function was evaluated on a negative concentration."""


def hill(x, K: float, h_num: float, h_den: float):
    """``x**h_num / (K**h_den + x**h_den)``; repression for ``h_num = 0``, activation for ``h_num = h_den``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise NegativeStateError("hill function is undefined for negative inputs")
    if K <= 0:
        raise ValueError("K must be positive")
    return x**h_num / (K**h_den + x**h_den)


@dataclass(frozen=True)
class BasisFunction:
    """One dictionary column.

    ``params`` by kind (state indices are zero-based):

    * linear: ``state``
    * hill: ``state, K, h_num, h_den``
    * constant: none
    * mass_action: ``states`` (pair)
    * michaelis_menten: ``state, K`` giving ``x / (K + x)``
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        p = dict(self.params)
        if self.kind in ("linear", "hill", "michaelis_menten"):
            p["state"] = int(p["state"])
        if self.kind == "hill":
            p["K"], p["h_num"], p["h_den"] = float(p["K"]), float(p["h_num"]), float(p["h_den"])
            if p["K"] <= 0 or p["h_den"] < 1 or p["h_num"] not in (0.0, p["h_den"]):
                raise ValueError(f"invalid hill parameters {p}")
        if self.kind == "michaelis_menten":
            p["K"] = float(p["K"])
            if p["K"] <= 0:
                raise ValueError("Michaelis-Menten K must be positive")
        if self.kind == "mass_action":
            p["states"] = tuple(int(s) for s in p["states"])
            if len(p["states"]) != 2:
                raise ValueError("mass_action needs exactly two state indices")
        object.__setattr__(self, "params", p)

    @property
    def states(self) -> tuple:
        if self.kind == "constant":
            return ()
        if self.kind == "mass_action":
            return self.params["states"]
        return (self.params["state"],)

    @property
    def name(self) -> str:
        p = self.params
        if self.kind == "constant":
            return "1"
        if self.kind == "linear":
            return f"x{p['state'] + 1}"
        if self.kind == "mass_action":
            i, j = p["states"]
            return f"x{i + 1}*x{j + 1}"
        if self.kind == "michaelis_menten":
            return f"mm(x{p['state'] + 1},{_num(p['K'])})"
        return f"hill(x{p['state'] + 1},{_num(p['K'])},{_num(p['h_num'])},{_num(p['h_den'])})"

    def evaluate(self, states: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            return np.ones(states.shape[0])
        if self.kind == "linear":
            return states[:, p["state"]].copy()
        if self.kind == "mass_action":
            i, j = p["states"]
            return states[:, i] * states[:, j]
        x = states[:, p["state"]]
        if self.kind == "michaelis_menten":
            if np.any(x < 0):
                raise NegativeStateError("Michaelis-Menten term is undefined for negative inputs")
            return x / (p["K"] + x)
        return hill(x, p["K"], p["h_num"], p["h_den"])

    def to_json(self) -> dict:
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()}
        return {"kind": self.kind, "params": params}


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass(frozen=True)
class DictionarySpec:
    basis: tuple

    def __post_init__(self):
        basis = tuple(self.basis)
        if not basis:
            raise ValueError("dictionary needs at least one basis function")
        object.__setattr__(self, "basis", basis)

    @property
    def N(self) -> int:
        return len(self.basis)

    @property
    def names(self) -> list:
        return [b.name for b in self.basis]

    def check(self, n_x: int) -> None:
        for b in self.basis:
            for s in b.states:
                if not 0 <= s < n_x:
                    raise ValueError(f"{b.name} references state {s + 1}, data has {n_x}")

    def to_json(self) -> str:
        return json.dumps([b.to_json() for b in self.basis], indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DictionarySpec":
        return cls(tuple(BasisFunction(d["kind"], d.get("params", {})) for d in json.loads(text)))


def repressilator_spec(n: int = 8, K: float = 1.0, h: float = 3.0) -> DictionarySpec:
    """Linear terms, repressing Hill terms, activating Hill terms, then a constant: ``3n + 1`` columns."""
    basis = [BasisFunction("linear", {"state": i}) for i in range(n)]
    basis += [BasisFunction("hill", {"state": i, "K": K, "h_num": 0, "h_den": h}) for i in range(n)]
    basis += [BasisFunction("hill", {"state": i, "K": K, "h_num": h, "h_den": h}) for i in range(n)]
    basis.append(BasisFunction("constant"))
    return DictionarySpec(tuple(basis))


@dataclass(frozen=True)
class DictionaryMatrix:
    values: np.ndarray
    spec: DictionarySpec
    experiment_id: int
    rows: np.ndarray
    n_clamped: int = 0

    def to_csv(self) -> str:
        lines = [",".join(["row"] + self.spec.names)]
        for r, row in zip(self.rows, self.values):
            lines.append(",".join([str(int(r))] + [repr(float(v)) for v in row]))
        return "\n".join(lines) + "\n"


def build_dictionary(experiment: TimeSeriesExperiment, spec: DictionarySpec,
                     rows: Optional[Sequence[int]] = None, strict: bool = False) -> DictionaryMatrix:
    """Evaluate ``spec`` on the retained sample rows of ``experiment``.

    Negative states feeding Hill or Michaelis-Menten columns are clamped at
    zero (count logged and stored in ``n_clamped``) unless ``strict`` is set,
    in which case :class:`NegativeStateError` is raised.
    """
    spec.check(experiment.n_x)
    rows = np.arange(experiment.n_samples) if rows is None else np.asarray(rows, dtype=int)
    if rows.size and (rows.min() < 0 or rows.max() >= experiment.n_samples):
        raise IndexError("row range outside the experiment")
    states = experiment.states[rows]
    negative = states < 0
    n_clamped = 0
    clamped = states
    if np.any(negative):
        used = sorted({s for b in spec.basis if b.kind in _NONNEGATIVE_KINDS for s in b.states})
        n_clamped = int(negative[:, used].sum()) if used else 0
        if n_clamped:
            if strict:
                raise NegativeStateError(f"experiment {experiment.id}: {n_clamped} negative states in nonlinear terms")
            log.info("experiment %s: clamped %d negative state values to 0", experiment.id, n_clamped)
        clamped = np.maximum(states, 0.0)
    cols = [b.evaluate(clamped if b.kind in _NONNEGATIVE_KINDS else states) for b in spec.basis]
    values = np.column_stack(cols)
    values.setflags(write=False)
    return DictionaryMatrix(values, spec, experiment.id, rows, n_clamped)


def true_weights(params, spec: DictionarySpec, n: int) -> np.ndarray:
    """Ground-truth weights of state ``n`` (zero-based) in the default repressilator dictionary.

    Three nonzeros: production on the repressing Hill term of the predecessor,
    minus degradation on the own linear term, basal rate on the constant.
    """
    p = np.asarray(getattr(params, "p", params), dtype=float)
    n_species = p.shape[0]
    if spec != repressilator_spec(n_species):
        raise ValueError("true_weights is only defined for the default repressilator dictionary")
    w = np.zeros(spec.N)
    pred = (n - 1) % n_species
    w[n_species + pred] = p[n, 0]
    w[n] = -p[n, 4]
    w[-1] = p[n, 3]
    return w
