"""Problem specifications and CSV/JSON formats used by the command line."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .discretise import PiecewiseConstantPath
from .marginals import DiscreteMarginal, PutPriceCurve
from .mot_lp import (DEFAULT_PATH_BUDGET, LatticeModel, QuotedOption, pinning_puts, quoted_call,
                     quoted_put)
from .paths import ALL, GridPath, PredictionSet, SupNormBall
from .payoffs import AsianAverage, Basket, Constant, LookbackMax, Payoff, TableGrid, call, forward, put


class SpecError(ValueError):
    """Malformed input file."""


def fmt(x) -> str:
    """Round-trippable, platform-independent number formatting."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])


def _float(tok: str, line: int, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise SpecError(f"line {line}: {what} {tok!r} is not a number") from None
    if not np.isfinite(v):
        raise SpecError(f"line {line}: {what} must be finite")
    return v


def _rows(path: str, header: Optional[str] = None):
    """Yield (line number, fields), skipping blank lines and a header on line 1:
    any non-numeric first field, or exactly ``header`` when given."""
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise SpecError(f"cannot read {path}: {e.strerror}") from None
    with fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if i == 1 and header is not None:
                if row[0].strip() == header:
                    continue
            elif i == 1:
                try:
                    float(row[0])
                except ValueError:
                    continue
            yield i, [c.strip() for c in row]


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------

def read_path_csv(path: str) -> GridPath:
    """Rows ``time,x_1,...,x_dim``."""
    times, vals, width = [], [], None
    for line, row in _rows(path):
        if len(row) < 2:
            raise SpecError(f"line {line}: expected time and at least one value")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise SpecError(f"line {line}: expected {width} fields, got {len(row)}")
        t = _float(row[0], line, "time")
        if times and t <= times[-1]:
            raise SpecError(f"line {line}: times must increase strictly")
        if not times and t != 0:
            raise SpecError(f"line {line}: the path must start at time 0")
        x = [_float(c, line, "value") for c in row[1:]]
        if not times and any(v != 1.0 for v in x):
            raise SpecError(f"line {line}: the path must start at (1, ..., 1)")
        if any(v < 0 for v in x):
            raise SpecError(f"line {line}: values must be nonnegative")
        times.append(t)
        vals.append(x)
    if len(times) < 2:
        raise SpecError("a path needs at least two rows")
    return GridPath(np.array(times), np.array(vals))


def pcp_to_json(f: PiecewiseConstantPath) -> dict:
    """{N, horizon, jumps: [{t, v}], terminal} with exact rationals as "p/q"
    strings; the first entry (t = "0") carries the starting value."""
    return {
        "N": f.N,
        "horizon": str(f.horizon),
        "jumps": [{"t": str(t), "v": [str(x) for x in v]} for t, v in zip(f.jump_times, f.values)],
        "terminal": [str(x) for x in f.terminal],
    }


def pcp_from_json(doc: dict) -> PiecewiseConstantPath:
    try:
        jumps = doc["jumps"]
        return PiecewiseConstantPath(tuple(Fraction(j["t"]) for j in jumps),
                                     tuple(tuple(Fraction(x) for x in j["v"]) for j in jumps),
                                     Fraction(doc["horizon"]), doc.get("N"),
                                     tuple(Fraction(x) for x in doc["terminal"]))
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as e:
        raise SpecError(f"malformed discretised path: {e}") from None


def read_puts_csv(path: str) -> PutPriceCurve:
    ks, ps = [], []
    for line, row in _rows(path):
        if len(row) != 2:
            raise SpecError(f"line {line}: expected strike,price")
        ks.append(_float(row[0], line, "strike"))
        ps.append(_float(row[1], line, "price"))
    if not ks:
        raise SpecError("no put prices")
    try:
        return PutPriceCurve(tuple(ks), tuple(ps))
    except ValueError as e:
        raise SpecError(str(e)) from None


def read_marginal(path: str) -> DiscreteMarginal:
    """Marginal from JSON {support, probs} (``.json``) or CSV support,prob."""
    if path.endswith(".json"):
        try:
            with open(path) as fh:
                doc = json.load(fh)
            xs, ps = _need(doc, "support", path), _need(doc, "probs", path)
        except OSError as e:
            raise SpecError(f"cannot read {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise SpecError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
        try:
            return DiscreteMarginal(tuple(float(x) for x in xs), tuple(float(q) for q in ps))
        except (TypeError, ValueError) as e:
            raise SpecError(f"{path}: {e}") from None
    xs, ps = [], []
    for line, row in _rows(path):
        if len(row) != 2:
            raise SpecError(f"line {line}: expected support,prob")
        xs.append(_float(row[0], line, "support point"))
        ps.append(_float(row[1], line, "probability"))
    try:
        return DiscreteMarginal(tuple(xs), tuple(ps))
    except ValueError as e:
        raise SpecError(str(e)) from None


# ---------------------------------------------------------------------------
# problem specifications
# ---------------------------------------------------------------------------

@dataclass
class ProblemSpec:
    model: LatticeModel
    payoff: Payoff
    options: List[QuotedOption]
    pset: PredictionSet
    eta: float = 0.0
    eta_schedule: List[float] = field(default_factory=list)
    penalty_N: List[float] = field(default_factory=list)
    mesh_N: List[int] = field(default_factory=list)
    seed: int = 0


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise SpecError(f"{where}: missing field {key!r}")
    return d[key]


def _maturity(times, d: dict, where: str) -> Optional[float]:
    if "maturity_index" not in d:
        return None
    j = d["maturity_index"]
    if not isinstance(j, int) or not 1 <= j < len(times):
        raise SpecError(f"{where}: maturity_index {j!r} is not a lattice time index")
    return float(times[j])


def _payoff(d: dict, times, where: str = "payoff") -> Payoff:
    """Accepts {type, ...} or {kind, params: {...}, kappa?}."""
    if "kind" in d:
        d = {**d.get("params", {}), **{k: v for k, v in d.items() if k != "params"}, "type": d["kind"]}
    G = _payoff_of_type(d, times, where)
    if d.get("kappa") is not None:
        G.kappa = float(d["kappa"])
    return G


def _payoff_of_type(d: dict, times, where: str) -> Payoff:
    kind = _need(d, "type", where)
    asset = int(d.get("asset", 0))
    T = _maturity(times, d, where)
    if kind == "call":
        return call(float(_need(d, "strike", where)), asset, T)
    if kind == "put":
        return put(float(_need(d, "strike", where)), asset, T)
    if kind == "forward":
        return forward(asset, T)
    if kind == "constant":
        return Constant(float(_need(d, "value", where)))
    if kind == "lookback":
        return LookbackMax(asset)
    if kind == "asian":
        return AsianAverage(asset, d.get("sampling_times"), horizon=float(times[-1]))
    if kind == "basket":
        return Basket(_need(d, "weights", where), T, d.get("strike"))
    if kind == "table":
        return _TableValues(np.asarray(_need(d, "values", where), dtype=float))
    raise SpecError(f"{where}: unknown payoff type {kind!r}")


class _TableValues(Payoff):
    """Values listed in lattice path order; ``bind`` turns them into a TableGrid."""

    kind = "table_values"

    def __init__(self, values: np.ndarray):
        super().__init__()
        self.values = values

    def bind(self, model: LatticeModel) -> TableGrid:
        if model.n_paths != self.values.size:
            raise SpecError(f"table lists {self.values.size} values for {model.n_paths} lattice paths")
        return TableGrid.from_values(model.times, model.paths, self.values)


def _bind(p: Payoff, model: LatticeModel) -> Payoff:
    return p.bind(model) if isinstance(p, _TableValues) else p


def _options(spec: dict, times) -> List[QuotedOption]:
    out = []
    for j, o in enumerate(spec.get("options", [])):
        where = f"options[{j}]"
        kind = _need(o, "type", where)
        price = float(_need(o, "price", where))
        asset = int(o.get("asset", 0))
        T = _maturity(times, o, where)
        if kind == "put":
            out.append(quoted_put(float(_need(o, "strike", where)), price, asset, T))
        elif kind == "call":
            out.append(quoted_call(float(_need(o, "strike", where)), price, asset, T))
        elif kind == "custom":
            out.append(QuotedOption(_TableValues(np.asarray(_need(o, "values", where), dtype=float)), price,
                                    o.get("name", f"custom{j}")))
        else:
            raise SpecError(f"{where}: unknown option type {kind!r}")
    for j, mdef in enumerate(spec.get("marginals", [])):
        where = f"marginals[{j}]"
        try:
            mu = DiscreteMarginal(tuple(map(float, _need(mdef, "support", where))),
                                  tuple(map(float, _need(mdef, "probs", where))))
        except ValueError as e:
            raise SpecError(f"{where}: {e}") from None
        strikes = mdef.get("strikes", list(mu.support) + [max(mu.support) + 1.0])
        out += pinning_puts(mu, strikes, int(mdef.get("asset", 0)), _maturity(times, mdef, where))
    return out


def _pset(d: Optional[dict]) -> PredictionSet:
    if d is None:
        return ALL
    kind = _need(d, "type", "prediction_set")
    if kind == "all":
        return ALL
    if kind == "ball":
        try:
            return SupNormBall(float(_need(d, "b", "prediction_set")))
        except ValueError as e:
            raise SpecError(f"prediction_set: {e}") from None
    raise SpecError(f"prediction_set: unknown type {kind!r}")


def _float_list(spec: dict, key: str) -> List[float]:
    v = spec.get(key, [])
    if not isinstance(v, list):
        raise SpecError(f"{key} must be a list")
    return [float(x) for x in v]


def parse_spec(spec: dict, budget: Optional[int] = None) -> ProblemSpec:
    if not isinstance(spec, dict):
        raise SpecError("problem specification must be a JSON object")
    times = [float(t) for t in _need(spec, "times", "spec")]
    grids = _need(spec, "grids", "spec")
    d = int(spec.get("assets", 1))
    mats = spec.get("maturity_indices")
    try:
        model = LatticeModel(times, grids, mats, band=spec.get("band"),
                             budget=budget or int(spec.get("budget", DEFAULT_PATH_BUDGET)), dim=d)
    except (ValueError, TypeError, IndexError) as e:
        raise SpecError(f"lattice: {e}") from None
    payoff = _bind(_payoff(_need(spec, "payoff", "spec"), times), model)
    options = [QuotedOption(_bind(o.payoff, model), o.price, o.name) for o in _options(spec, times)]
    eta = float(spec.get("eta", 0.0))
    if eta < 0:
        raise SpecError("eta must be nonnegative")
    sched = _float_list(spec, "eta_schedule") or [eta]
    return ProblemSpec(model, payoff, options, _pset(spec.get("prediction_set")), eta, sched,
                       _float_list(spec, "penalty_N"), [int(x) for x in spec.get("mesh_N", [])],
                       int(spec.get("seed", 0)))


def load_spec(path: str, budget: Optional[int] = None) -> ProblemSpec:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise SpecError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return parse_spec(raw, budget)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

def write_strategy_csv(path: str, a0: float, static: Sequence[float], positions: np.ndarray,
                       times: Sequence[float]) -> None:
    """Rows ``path_id,rebalance_time,asset,position``.  Static holdings use
    path_id ``static`` with asset ``cash`` or ``option<j>``."""
    rows = [("static", 0.0, "cash", a0)]
    rows += [("static", 0.0, f"option{j}", c) for j, c in enumerate(static)]
    n, m, dim = positions.shape
    for w in range(n):
        for k in range(m):
            for i in range(dim):
                rows.append((str(w), times[k], str(i), positions[w, k, i]))
    write_csv(path, ["path_id", "rebalance_time", "asset", "position"], rows)


def read_strategy_csv(path: str, n_options: int, dim: int) -> Tuple[float, np.ndarray, Dict[int, Tuple[list, list]]]:
    a0, static = 0.0, np.zeros(n_options)
    per_path: Dict[int, Dict[float, np.ndarray]] = {}
    for line, row in _rows(path, header="path_id"):
        if len(row) != 4:
            raise SpecError(f"line {line}: expected path_id,rebalance_time,asset,position")
        pid, t, asset, pos = row
        val = _float(pos, line, "position")
        if pid == "static":
            if asset == "cash":
                a0 = val
            elif asset.startswith("option") and asset[6:].isdigit() and int(asset[6:]) < n_options:
                static[int(asset[6:])] = val
            else:
                raise SpecError(f"line {line}: unknown static holding {asset!r}")
            continue
        try:
            w, i = int(pid), int(asset)
        except ValueError:
            raise SpecError(f"line {line}: path_id and asset must be integers") from None
        if not 0 <= i < dim:
            raise SpecError(f"line {line}: asset {i} out of range")
        tt = _float(t, line, "rebalance time")
        per_path.setdefault(w, {}).setdefault(tt, np.zeros(dim))[i] = val
    sched = {w: (sorted(d), [d[t] for t in sorted(d)]) for w, d in per_path.items()}
    return a0, static, sched
