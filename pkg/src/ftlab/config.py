"""JSON protocol documents.

Numbers anywhere in a document may be written as arithmetic expressions over the
document's ``parameters`` (e.g. ``"sqrt(1-epsilon)"``). Complex entries are ``[re, im]``
pairs; a real entry may be given bare. See docs/config-schema.md for the full layout.
"""
from __future__ import annotations

import ast
import copy
import json
import math
import operator
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .protocol import (
    Control,
    ConstantSchedule,
    CosineDrive,
    Evolve,
    FeedbackAction,
    Measure,
    Monitor,
    PiecewiseSchedule,
    Protocol,
    ProtocolError,
    Reference,
    Thermalize,
)
from .qdyn import DensityMatrix, JumpChannel, KrausSet, QdynError, thermal_state


class ConfigError(ValueError):
    """Schema or validation failure, with the JSON location in the message."""


_FUNCS = {
    "sqrt": math.sqrt, "exp": math.exp, "log": math.log, "cos": math.cos, "sin": math.sin,
    "tanh": math.tanh, "abs": abs,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Div: operator.truediv, ast.Pow: operator.pow,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def evaluate(expr, params: Mapping[str, float], where: str = "") -> float:
    if isinstance(expr, bool):
        raise ConfigError(f"{where}: expected a number, got {expr!r}")
    if isinstance(expr, (int, float)):
        return float(expr)
    if not isinstance(expr, str):
        raise ConfigError(f"{where}: expected a number or expression, got {expr!r}")
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as e:
        raise ConfigError(f"{where}: cannot parse {expr!r}: {e.msg}") from None

    def ev(n):
        if isinstance(n, ast.Expression):
            return ev(n.body)
        if isinstance(n, ast.Constant) and isinstance(n.value, (int, float)):
            return float(n.value)
        if isinstance(n, ast.Name):
            if n.id in params:
                return float(params[n.id])
            if n.id in _CONSTS:
                return _CONSTS[n.id]
            raise ConfigError(f"{where}: unknown name {n.id!r} in {expr!r}")
        if isinstance(n, ast.BinOp) and type(n.op) in _BINOPS:
            return _BINOPS[type(n.op)](ev(n.left), ev(n.right))
        if isinstance(n, ast.UnaryOp) and type(n.op) in _UNOPS:
            return _UNOPS[type(n.op)](ev(n.operand))
        if isinstance(n, ast.Call) and isinstance(n.func, ast.Name) and n.func.id in _FUNCS and not n.keywords:
            return float(_FUNCS[n.func.id](*[ev(a) for a in n.args]))
        raise ConfigError(f"{where}: unsupported syntax in {expr!r}")

    try:
        return ev(tree)
    except (ValueError, ZeroDivisionError, OverflowError) as e:
        raise ConfigError(f"{where}: cannot evaluate {expr!r}: {e}") from None


def parse_scalar(x, params, where) -> complex:
    if isinstance(x, list):
        if len(x) != 2:
            raise ConfigError(f"{where}: complex entries are [re, im] pairs")
        return complex(evaluate(x[0], params, where), evaluate(x[1], params, where))
    return complex(evaluate(x, params, where))


def parse_matrix(m, params, where, dim: int | None = None) -> np.ndarray:
    if isinstance(m, dict):
        if "diag" in m:
            out = np.diag([parse_scalar(v, params, f"{where}.diag[{i}]") for i, v in enumerate(m["diag"])])
        elif "rows" in m:
            out = parse_matrix(m["rows"], params, where)
        else:
            raise ConfigError(f"{where}: matrix object needs 'diag' or 'rows'")
        if "scale" in m:
            out = out * parse_scalar(m["scale"], params, f"{where}.scale")
    elif isinstance(m, list) and m and all(isinstance(r, list) for r in m):
        rows = [[parse_scalar(v, params, f"{where}[{i}][{j}]") for j, v in enumerate(r)] for i, r in enumerate(m)]
        if len({len(r) for r in rows}) != 1 or len(rows) != len(rows[0]):
            raise ConfigError(f"{where}: matrix must be square")
        out = np.array(rows, dtype=complex)
    else:
        raise ConfigError(f"{where}: expected a matrix (list of rows or {{'diag': ...}})")
    if dim is not None and out.shape != (dim, dim):
        raise ConfigError(f"{where}: expected a {dim}x{dim} matrix, got {out.shape}")
    return out


def parse_vector(v, params, where, dim) -> np.ndarray:
    if not isinstance(v, list) or len(v) != dim:
        raise ConfigError(f"{where}: expected a vector of length {dim}")
    return np.array([parse_scalar(x, params, f"{where}[{i}]") for i, x in enumerate(v)])


def parse_schedule(doc, params, where, dim):
    if not isinstance(doc, dict) or "type" not in doc:
        raise ConfigError(f"{where}: schedule needs a 'type'")
    kind = doc["type"]
    if kind == "constant":
        return ConstantSchedule(parse_matrix(doc["matrix"], params, f"{where}.matrix", dim))
    if kind == "cosine":
        return CosineDrive(
            parse_matrix(doc["static"], params, f"{where}.static", dim),
            parse_matrix(doc["drive"], params, f"{where}.drive", dim),
            evaluate(doc["frequency"], params, f"{where}.frequency"),
            evaluate(doc.get("phase", 0.0), params, f"{where}.phase"),
        )
    if kind == "piecewise":
        ts = [evaluate(t, params, f"{where}.times[{i}]") for i, t in enumerate(doc["times"])]
        ms = [parse_matrix(m, params, f"{where}.matrices[{i}]", dim) for i, m in enumerate(doc["matrices"])]
        return PiecewiseSchedule(tuple(ts), tuple(ms))
    raise ConfigError(f"{where}: unknown schedule type {kind!r}")


def parse_channels(doc, params, where, dim):
    out = []
    for i, c in enumerate(doc or []):
        w = f"{where}[{i}]"
        try:
            out.append(
                JumpChannel(
                    str(c["label"]),
                    parse_matrix(c["operator"], params, f"{w}.operator", dim),
                    evaluate(c["heat"], params, f"{w}.heat"),
                    str(c["partner"]),
                )
            )
        except KeyError as e:
            raise ConfigError(f"{w}: missing field {e}") from None
    return tuple(out)


def _require(doc, key, where):
    if key not in doc:
        raise ConfigError(f"{where}: missing field {key!r}")
    return doc[key]


def build_protocol(doc: Mapping[str, Any], overrides: Mapping[str, float] | None = None) -> Protocol:
    """Validate a config document and build the Protocol it describes."""
    if not isinstance(doc, Mapping):
        raise ConfigError("config root must be an object")
    params = {k: evaluate(v, {}, f"parameters.{k}") if not isinstance(v, str) else v
              for k, v in (doc.get("parameters") or {}).items()}
    params.update({k: float(v) for k, v in (overrides or {}).items()})
    # parameters may refer to each other in any order; resolve until nothing changes
    resolved, pending = {}, dict(params)
    while pending:
        done = {}
        for k, v in pending.items():
            try:
                done[k] = evaluate(v, resolved, f"parameters.{k}")
            except ConfigError:
                pass
        if not done:
            k = next(iter(pending))
            evaluate(pending[k], resolved, f"parameters.{k}")  # raises the located error
            raise ConfigError(f"parameters: circular references among {sorted(pending)}")
        resolved.update(done)
        for k in done:
            del pending[k]
    params = {k: resolved[k] for k in params}
    unknown = set(overrides or {}) - set(doc.get("parameters") or {})
    if unknown:
        raise ConfigError(f"unknown parameter(s) {sorted(unknown)}")
    try:
        dim = int(_require(doc, "dim", "config"))
        beta = evaluate(_require(doc, "beta", "config"), params, "beta")
        base = Control(
            parse_schedule(_require(doc, "hamiltonian", "config"), params, "hamiltonian", dim),
            parse_channels(doc.get("channels"), params, "channels", dim),
            name="base",
        )
        controls = [base]
        names = {"base": 0}
        for name, c in (doc.get("controls") or {}).items():
            w = f"controls.{name}"
            sched = parse_schedule(c["hamiltonian"], params, f"{w}.hamiltonian", dim) if "hamiltonian" in c else base.schedule
            chans = parse_channels(c["channels"], params, f"{w}.channels", dim) if "channels" in c else base.channels
            names[name] = len(controls)
            controls.append(Control(sched, chans, name=name))

        def control_ref(x, where):
            if x is None:
                return None
            if x not in names:
                raise ConfigError(f"{where}: unknown control {x!r}")
            return names[x]

        def action(a, where):
            if not isinstance(a, dict):
                raise ConfigError(f"{where}: feedback entries are objects")
            u = parse_matrix(a["unitary"], params, f"{where}.unitary", dim) if "unitary" in a else None
            try:
                return FeedbackAction(u, control_ref(a.get("control"), f"{where}.control"))
            except ProtocolError as e:
                raise ConfigError(f"{where}: {e}") from None

        stages = []
        for i, s in enumerate(_require(doc, "stages", "config")):
            w = f"stages[{i}]"
            kind = _require(s, "type", w)
            if kind == "evolve":
                stages.append(Evolve(evaluate(_require(s, "duration", w), params, f"{w}.duration"),
                                     control_ref(s.get("control"), f"{w}.control")))
            elif kind == "measure":
                ops = _require(s, "kraus", w)
                if not isinstance(ops, dict) or not ops:
                    raise ConfigError(f"{w}.kraus: expected an object of label -> matrix")
                mats = {str(k): parse_matrix(m, params, f"{w}.kraus.{k}", dim) for k, m in ops.items()}
                try:
                    kr = KrausSet.from_dict(mats)
                except QdynError as e:
                    raise ConfigError(f"{w}.kraus: {e}") from None
                fb = {str(k): action(a, f"{w}.feedback.{k}") for k, a in (s.get("feedback") or {}).items()}
                stages.append(Measure(kr, fb))
            elif kind == "thermalize":
                stages.append(Thermalize(control_ref(s.get("control"), f"{w}.control")))
            else:
                raise ConfigError(f"{w}: unknown stage type {kind!r}")

        monitor = None
        if doc.get("monitor") is not None:
            m = doc["monitor"]
            ops = _require(m, "operators", "monitor")
            labels = [str(k) for k in ops]
            mats = [parse_matrix(v, params, f"monitor.operators.{k}", dim) for k, v in ops.items()]
            fb = {str(k): action(a, f"monitor.feedback.{k}") for k, a in (m.get("feedback") or {}).items()}
            monitor = Monitor(tuple(labels), tuple(mats), evaluate(_require(m, "rate", "monitor"), params, "monitor.rate"), fb)

        init_doc = doc.get("initial", {"type": "thermal"})
        kind = init_doc.get("type")
        if kind == "thermal":
            t0 = evaluate(init_doc.get("time", 0.0), params, "initial.time")
            initial = thermal_state(base.hamiltonian(t0), beta)
        elif kind == "explicit":
            initial = DensityMatrix(parse_matrix(init_doc["matrix"], params, "initial.matrix", dim))
        elif kind == "pure":
            initial = DensityMatrix.pure(parse_vector(init_doc["vector"], params, "initial.vector", dim))
        else:
            raise ConfigError(f"initial: unknown type {kind!r}")

        ref_doc = doc.get("reference", {"type": "thermal-final"})
        kind = ref_doc.get("type")
        if kind == "explicit":
            reference = Reference("explicit", DensityMatrix(parse_matrix(ref_doc["matrix"], params, "reference.matrix", dim)))
        elif kind == "initial":
            reference = Reference("explicit", initial)
        else:
            reference = Reference(kind)

        dt = evaluate(doc["dt"], params, "dt") if doc.get("dt") is not None else None
        return Protocol(
            beta=beta,
            controls=tuple(controls),
            stages=tuple(stages),
            initial=initial,
            reference=reference,
            monitor=monitor,
            dt=dt,
            p_step_max=evaluate(doc.get("p_step_max", 0.1), params, "p_step_max"),
            allow_complex=bool(doc.get("allow_complex", False)),
            name=str(doc.get("name", "")),
            parameters=dict(params),
        )
    except (ProtocolError, QdynError) as e:
        raise ConfigError(str(e)) from None
    except KeyError as e:
        raise ConfigError(f"missing field {e}") from None


def bundled_names() -> list:
    return sorted(p.name for p in resources.files("ftlab.configs").iterdir() if p.name.endswith(".json"))


def read_config(path_or_name: str | Path, _depth: int = 0) -> dict:
    """Read a JSON document from a path or a bundled config name, resolving 'extends'.

    A document with ``"extends": "<other config>"`` starts from the other document and
    overrides its top-level fields; ``parameters`` are merged key by key.
    """
    doc = _read_one(path_or_name)
    if "extends" in doc:
        if _depth > 8:
            raise ConfigError("config 'extends' chain is too deep")
        base = read_config(doc["extends"], _depth + 1)
        merged = {**base, **{k: v for k, v in doc.items() if k not in ("extends", "parameters")}}
        merged["parameters"] = {**base.get("parameters", {}), **doc.get("parameters", {})}
        return merged
    return doc


def _read_one(path_or_name) -> dict:
    p = Path(path_or_name)
    try:
        if p.exists():
            return json.loads(p.read_text())
        name = p.name if p.name.endswith(".json") else p.name + ".json"
        res = resources.files("ftlab.configs") / name
        if res.is_file():
            return json.loads(res.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path_or_name}: invalid JSON at line {e.lineno}: {e.msg}") from None
    raise ConfigError(f"config {str(path_or_name)!r} not found (bundled: {', '.join(bundled_names())})")


def load_protocol(source, overrides: Mapping[str, float] | None = None) -> Protocol:
    """Build a Protocol from a document, a file path, or a bundled config name."""
    doc = source if isinstance(source, Mapping) else read_config(source)
    return build_protocol(doc, overrides)


def with_parameters(doc: Mapping, **overrides) -> dict:
    out = copy.deepcopy(dict(doc))
    out.setdefault("parameters", {}).update(overrides)
    return out
