"""Command line entry point: ``ftlab <command> ...``.

Exit codes: 0 success, 2 config or protocol error, 3 a numerical invariant failed,
4 a sampled fluctuation-theorem average fell outside its standard-error band.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import math
import os
import sys
import warnings

import numpy as np

from .config import ConfigError, build_protocol, bundled_names, read_config
from .protocol import ProtocolError
from .qdyn import QdynError, detailed_balance_residual

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STAT = 0, 2, 3, 4
SEED_ENV, THREADS_ENV = "FTLAB_SEED", "FTLAB_THREADS"
FT_EXACT_TOL = 1e-10


class CliFailure(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------- argument helpers


def _env_int(name: str, default: int) -> int:
    v = os.environ.get(name)
    if v is None or v == "":
        return default
    try:
        return int(v)
    except ValueError:
        raise CliFailure(EXIT_CONFIG, f"{name}={v!r} is not an integer") from None


def resolve_seed(args) -> int:
    return args.seed if args.seed is not None else _env_int(SEED_ENV, 0)


def resolve_threads(args) -> int:
    t = args.threads if args.threads is not None else _env_int(THREADS_ENV, 1)
    return max(1, t)


def parse_sweep(text: str | None, doc: dict) -> tuple:
    """'name=v1,v2,...' or 'name' (values from the config) or None (the config's own sweep)."""
    if text is None:
        sw = doc.get("sweep")
        if not sw:
            return None, [None]
        return sw["parameter"], [float(v) for v in sw["values"]]
    if text == "none":
        return None, [None]
    name, _, vals = text.partition("=")
    name = name.strip()
    if not vals:
        sw = doc.get("sweep") or {}
        if sw.get("parameter") != name:
            raise CliFailure(EXIT_CONFIG, f"--sweep {name}: no values given and the config has no sweep over it")
        return name, [float(v) for v in sw["values"]]
    try:
        return name, [float(v) for v in vals.split(",") if v.strip()]
    except ValueError:
        raise CliFailure(EXIT_CONFIG, f"--sweep: cannot parse values {vals!r}") from None


def parse_sets(items) -> dict:
    out = {}
    for it in items or ():
        k, sep, v = it.partition("=")
        if not sep:
            raise CliFailure(EXIT_CONFIG, f"--set expects name=value, got {it!r}")
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise CliFailure(EXIT_CONFIG, f"--set {k}: {v!r} is not a number") from None
    return out


def load(config: str, overrides: dict):
    try:
        doc = read_config(config)
        return doc, build_protocol(doc, overrides)
    except (ConfigError, ProtocolError, QdynError) as e:
        raise CliFailure(EXIT_CONFIG, f"{config}: {e}") from None


@contextlib.contextmanager
def output(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def note(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- run-discrete / run-continuous


def _sampled(protocol, n, seed, threads, dt):
    from .engine import run_batch
    from .thermo import ensemble_averages

    try:
        batch = run_batch(protocol, n, seed=seed, dt=dt, threads=threads)
    except (ProtocolError, ConfigError) as e:
        raise CliFailure(EXIT_CONFIG, str(e)) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        stats = ensemble_averages(batch)
    for w in caught:
        note(f"warning: {w.message}")
    return stats


def _ft_band(stats, k: float) -> bool:
    e = stats["exp_minus_sigma_minus_cg"]
    return e.within(1.0, k)


def cmd_run_discrete(args) -> int:
    from .thermo import exact_averages, sweep_row, write_sweep_csv

    doc = read_config_or_fail(args.config)
    name, values = parse_sweep(args.sweep, doc)
    base = parse_sets(args.set)
    seed, threads = resolve_seed(args), resolve_threads(args)
    rows, bad_exact, bad_stat = [], [], []
    for v in values:
        over = dict(base)
        if name is not None:
            over[name] = v
        _, p = load(args.config, over)
        if p.mode != "discrete":
            raise CliFailure(EXIT_CONFIG, f"{args.config} is a continuous protocol; use run-continuous")
        kind = "i_mi" if len(p.measure_indices) == 1 else "i_te"
        ex = exact_averages(p, "exact")
        rows.append(sweep_row(name or "", v if v is not None else "", "exact", ex, p.beta, kind))
        ft = ex.get("exp_minus_sigma_minus_cg")
        if ft is not None and abs(ft - 1) > FT_EXACT_TOL:
            bad_exact.append(f"{name}={v}: exact <e^-(sigma-sigma_cg)> = {ft!r}")
        if args.n_traj > 0:
            st = _sampled(p, args.n_traj, seed, threads, args.dt)
            rows.append(sweep_row(name or "", v if v is not None else "", "sampled", st, p.beta, kind))
            if not _ft_band(st, args.k_se):
                bad_stat.append(f"{name}={v}")
    with output(args.out) as fh:
        write_sweep_csv(rows, fh)
    return _finish(bad_exact, bad_stat, args.k_se)


def cmd_run_continuous(args) -> int:
    from .thermo import exact_averages, sweep_row, write_sweep_csv

    doc = read_config_or_fail(args.config)
    name, values = parse_sweep(args.sweep, doc)
    base = parse_sets(args.set)
    seed, threads = resolve_seed(args), resolve_threads(args)
    rows, bad_stat = [], []
    for v in values:
        over = dict(base)
        if name is not None:
            over[name] = v
        _, p = load(args.config, over)
        if p.mode != "continuous":
            raise CliFailure(EXIT_CONFIG, f"{args.config} is a discrete protocol; use run-discrete")
        label = v if v is not None else ""
        ex = exact_averages(p, "exact", args.dt)
        rows.append(sweep_row(name or "", label, "exact", ex, p.beta, "i_te"))
        if args.n_traj > 0:
            st = _sampled(p, args.n_traj, seed, threads, args.dt)
            rows.append(sweep_row(name or "", label, "sampled", st, p.beta, "i_te"))
            if not _ft_band(st, args.k_se):
                bad_stat.append(f"{name}={v}")
    with output(args.out) as fh:
        write_sweep_csv(rows, fh)
    return _finish([], bad_stat, args.k_se)


def _finish(bad_exact, bad_stat, k) -> int:
    for b in bad_exact:
        note(f"FAIL {b}")
    if bad_exact:
        return EXIT_NUMERIC
    if bad_stat:
        note(f"FAIL <e^-(sigma-sigma_cg)> outside {k} SE of 1 at: {', '.join(bad_stat)}")
        return EXIT_STAT
    return EXIT_OK


def read_config_or_fail(config):
    try:
        return read_config(config)
    except ConfigError as e:
        raise CliFailure(EXIT_CONFIG, str(e)) from None


# ---------------------------------------------------------------- verify


class Checks:
    def __init__(self):
        self.items = []

    def add(self, scope, name, value, tol, code=EXIT_NUMERIC, ok=None):
        if ok is None:
            ok = bool(np.isfinite(value) and value <= tol)
        self.items.append({"scope": scope, "check": name, "value": value, "tol": tol, "ok": ok,
                           "code": EXIT_OK if ok else code})

    def info(self, scope, name, value):
        self.items.append({"scope": scope, "check": name, "value": value, "tol": None, "ok": True, "code": EXIT_OK})

    @property
    def code(self) -> int:
        return max((c["code"] for c in self.items), default=EXIT_OK)


def verify_protocol(name, p, checks: Checks, n_traj=0, seed=0, threads=1, dt=None, k_se=3.0):
    from .backward import validate_backward_measurement
    from .oracle import enumerate_protocol, row_summary
    from .propagation import HeatQuantizationError
    from .protocol import Measure

    for ci, c in enumerate(p.controls):
        if c.channels:
            checks.add(name, f"detailed balance, control {ci}", detailed_balance_residual(c.channels, p.beta), 1e-10)
    for i in p.measure_indices:
        k = p.stages[i].kraus
        checks.add(name, f"POVM completeness, stage {i}", k.completeness_residual(), 1e-10)
        rep = validate_backward_measurement(k)
        checks.info(name, f"reversed measurement stage {i} needs dilation", rep.dilation_required)
    if p.monitor is not None:
        ops = p.monitor.operators
        res = float(np.abs(sum(m.conj().T @ m for m in ops) - np.eye(p.dim)).max())
        # monitor operators only need sum M^dag M <= 1; the no-click branch completes it
        lam = float(np.linalg.eigvalsh(sum(m.conj().T @ m for m in ops)).max())
        checks.add(name, "monitor operators bounded (max eig of sum M^dag M - 1)", max(lam - 1.0, 0.0), 1e-10)
        checks.info(name, "monitor completeness residual", res)
    if p.mode == "discrete":
        try:
            rs = row_summary(enumerate_protocol(p), p.beta)
        except HeatQuantizationError as e:
            checks.info(name, "heat-resolved enumeration skipped", str(e))
            return
        checks.add(name, "total probability - 1", abs(rs["total_probability"] - 1), FT_EXACT_TOL)
        checks.add(name, "<e^-(sigma-sigma_cg)> - 1", abs(rs["exp_minus_sigma_minus_cg"] - 1), FT_EXACT_TOL)
        checks.add(name, "detailed FT max |P_tr - e^-sigma P|", rs["detailed_residual"], 1e-12)
        checks.info(name, "<e^-sigma>", rs["exp_minus_sigma"])
        fb = any(s.feedback for s in p.stages if isinstance(s, Measure))
        if not fb:
            checks.add(name, "<e^-sigma> - 1 (no feedback)", abs(rs["exp_minus_sigma"] - 1), FT_EXACT_TOL)
        gap = rs["sigma"] - rs["sigma_cg"]
        checks.add(name, "<sigma> - <sigma_cg> >= 0", max(-gap, 0.0), 1e-12)
    if n_traj > 0:
        st = _sampled(p, n_traj, seed, threads, dt)
        e = st["exp_minus_sigma_minus_cg"]
        z = abs(e.mean - 1) / e.se if e.se > 0 else (0.0 if abs(e.mean - 1) < 1e-12 else math.inf)
        checks.add(name, f"sampled <e^-(sigma-sigma_cg)> deviation in SE (n={n_traj})", z, k_se, code=EXIT_STAT)


def verify_global(checks: Checks, schedules: int = 20, seed: int = 0):
    from .oracle import dilated_verify, microreversibility_residual, random_dilated_preset

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(schedules):
        d = int(rng.choice([2, 4]))
        pieces = []
        for _ in range(int(rng.integers(2, 6))):
            a = rng.normal(size=(d, d))
            pieces.append((a + a.T, float(rng.uniform(0.1, 1.0))))
        worst = max(worst, microreversibility_residual(pieces))
    checks.add("global", f"microreversibility on {schedules} random real schedules", worst, 1e-8)
    for variant in ("classical", "quantum"):
        rep = dilated_verify(random_dilated_preset(seed, variant=variant))
        checks.add("global", f"dilated {variant} preset max |P_tr - e^-sigma P|", rep.residual, 1e-10)
        checks.add("global", f"dilated {variant} preset unitarity", rep.unitarity, 1e-10)


def cmd_verify(args) -> int:
    seed, threads = resolve_seed(args), resolve_threads(args)
    configs = args.config or bundled_names()
    checks = Checks()
    for c in configs:
        try:
            _, p = load(c, parse_sets(args.set))
        except CliFailure as e:
            checks.add(c, f"load: {e}", math.inf, 0.0, code=EXIT_CONFIG, ok=False)
            continue
        verify_protocol(c, p, checks, args.n_traj, seed, threads, args.dt, args.k_se)
    if not args.skip_global:
        verify_global(checks, seed=seed)
    for it in checks.items:
        tag = "INFO" if it["tol"] is None else ("ok  " if it["ok"] else "FAIL")
        tol = "" if it["tol"] is None else f" (tol {it['tol']:g})"
        note(f"{tag} {it['scope']}: {it['check']} = {it['value']}{tol}")
    if args.json:
        with output(args.json) as fh:
            json.dump({"exit_code": checks.code, "checks": checks.items}, fh, indent=1, default=str)
            fh.write("\n")
    return checks.code


# ---------------------------------------------------------------- verify-tables


def _amp_formula(variant: str, y: str, out: int, inp: int) -> str:
    """|<out| U_y M_y |inp>|^2 written out for the two qubit schemes."""
    if variant == "classical":
        if (out != inp) != (y == "1"):
            return "0"
        return "(1-eps)" if int(y) == inp else "eps"
    return "(1-eps)/2" if out == 0 else "eps/2"


def _boltz(q: int) -> str:
    return {0: "1", 1: "exp(-beta*omega)", -1: "exp(beta*omega)", 2: "exp(-2*beta*omega)",
            -2: "exp(2*beta*omega)"}[q]


def single_table_rows(variant, beta_omega, epsilon):
    from .oracle import enumerate_single_measurement

    for r in enumerate_single_measurement(variant, beta_omega, epsilon):
        q = int(round(r.q))
        b = r.f + q
        amp = _amp_formula(variant, r.y[0], b, r.a)
        yield r, b, {
            "P_formula": f"p{r.a}*{amp}*p{r.f}",
            "exp_minus_sigma_formula": f"(p{r.f}/p{r.a})*{_boltz(q)}",
            "P_tr_formula": f"p{r.f}*p{b}*{amp}",
        }


def double_table_rows(variant, beta_omega, epsilon, kappa_dt, omega_over_kappa):
    from .oracle import enumerate_two_measurements

    for r in enumerate_two_measurements(variant, beta_omega, epsilon, kappa_dt, omega_over_kappa):
        q1, q2 = (int(round(x)) for x in r.heats)
        b = r.f + q2
        y1, y2 = r.y
        if q1 == 1:
            mid = f"A[{y2}](0->{b})*A[{y1}]({r.a}->1)*E(1->0)"
            back = f"A[{y2}](0->{b})*E(0->1)*A[{y1}]({r.a}->1)"
        elif q1 == -1:
            mid = f"A[{y2}](1->{b})*A[{y1}]({r.a}->0)*E(0->1)"
            back = f"A[{y2}](1->{b})*E(1->0)*A[{y1}]({r.a}->0)"
        else:
            mid = f"sum_cd a[{y2}](c->{b})a[{y1}]({r.a}->c)a[{y1}]({r.a}->d)a[{y2}](d->{b})E0(c,d)"
            back = mid
        yield r, b, {
            "P_formula": f"p{r.a}*p{r.f}*{mid}",
            "exp_minus_sigma_formula": f"(p{r.f}/p{r.a})*{_boltz(q1 + q2)}",
            "P_tr_formula": f"p{r.f}*p{b}*{back}",
        }


TABLE_COLUMNS = ("table", "variant", "a", "y", "f", "b", "q", "P", "P_formula", "exp_minus_sigma",
                 "exp_minus_sigma_formula", "P_tr", "P_tr_formula", "generic_P", "generic_P_tr", "residual")


def _generic_index(config, overrides):
    from .config import load_protocol
    from .oracle import enumerate_protocol

    p = load_protocol(config, overrides)
    return {(r.a, r.y, r.f, tuple(round(q, 9) for q in r.heats)): r for r in enumerate_protocol(p)}


def cmd_verify_tables(args) -> int:
    bo, eps = args.beta_omega, args.epsilon
    out_rows, worst = [], 0.0
    for variant in args.variant:
        for table in args.tables:
            if table == "single":
                rows = single_table_rows(variant, bo, eps)
                gen = _generic_index(f"qubit-{variant}-single", {"beta_omega": bo, "epsilon": eps, "omega": 1.0})
            else:
                rows = double_table_rows(variant, bo, eps, args.kappa_dt, args.omega_over_kappa)
                gen = _generic_index(f"qubit-{variant}-double", {
                    "beta_omega": bo, "epsilon": eps, "omega": 1.0, "kappa_dt": args.kappa_dt,
                    "omega_over_kappa": args.omega_over_kappa})
            for r, b, forms in rows:
                key = (r.a, r.y, r.f, tuple(round(q, 9) for q in r.heats))
                g = gen.get(key)
                gp = g.probability if g is not None else 0.0
                gt = g.p_tr if g is not None else 0.0
                res = max(abs(gp - r.probability), abs(gt - r.p_tr))
                worst = max(worst, res)
                out_rows.append({
                    "table": table, "variant": variant, "a": r.a, "y": "/".join(r.y), "f": r.f, "b": b,
                    "q": "/".join(repr(float(q)) for q in r.heats), "P": r.probability,
                    "exp_minus_sigma": float(r.exp_minus_sigma), "P_tr": r.p_tr,
                    "generic_P": gp, "generic_P_tr": gt, "residual": res, **forms,
                })
    from .thermo import _fmt

    with output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in out_rows:
            w.writerow([_fmt(r[k]) for k in TABLE_COLUMNS])
    ok = worst <= 1e-12
    note(f"{'ok  ' if ok else 'FAIL'} closed-form tables vs generic enumeration: max residual {worst:.3e}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- sample / postselect


def cmd_sample(args) -> int:
    from .engine import run_batch

    _, p = load(args.config, parse_sets(args.set))
    seed, threads = resolve_seed(args), resolve_threads(args)
    try:
        batch = run_batch(p, args.n_traj, seed=seed, dt=args.dt, threads=threads, start=args.start)
    except ProtocolError as e:
        raise CliFailure(EXIT_CONFIG, str(e)) from None
    with output(args.out) as fh:
        batch.dump_jsonl(fh)
    return EXIT_OK


def cmd_postselect(args) -> int:
    from .backward import postselection_simulate, write_postselection_csv

    _, p = load(args.config, parse_sets(args.set))
    if p.mode != "discrete":
        raise CliFailure(EXIT_CONFIG, "postselect needs a discrete protocol")
    seed, threads = resolve_seed(args), resolve_threads(args)
    rows = postselection_simulate(p, args.n_traj, seed, args.dt, threads)
    with output(args.out) as fh:
        write_postselection_csv(rows, fh)
    bad = [r for r in rows if r.runs > 1 and r.se > 0 and abs(r.rate - r.p_tr) > args.k_se * r.se]
    for r in bad:
        note(f"FAIL {'/'.join(r.y)}: acceptance {r.rate:.5f} vs P_tr {r.p_tr:.5f} ({r.se:.2g} SE)")
    return EXIT_STAT if bad else EXIT_OK


# ---------------------------------------------------------------- parser


def _common(sp, *, traj_default: int, k_se: float, config_required=True, sweep=False):
    if config_required:
        sp.add_argument("--config", required=True, help="config path or bundled name")
    sp.add_argument("--set", action="append", metavar="NAME=VALUE", help="override a config parameter")
    if sweep:
        sp.add_argument("--sweep", help="NAME=v1,v2,... ; NAME alone uses the config's values; 'none' disables")
    sp.add_argument("--n-traj", type=int, default=traj_default, help="sampled trajectories per point")
    sp.add_argument("--seed", type=int, default=None, help=f"base seed (env {SEED_ENV}, default 0)")
    sp.add_argument("--threads", type=int, default=None, help=f"worker threads (env {THREADS_ENV}, default 1)")
    sp.add_argument("--dt", type=float, default=None, help="grid step; defaults to the config's dt")
    sp.add_argument("--k-se", type=float, default=k_se, help="standard-error band for sampled checks")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ftlab", description="Fluctuation-theorem lab for measured and fed-back quantum systems.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run-discrete", help="sweep a discrete protocol; exact and sampled rows")
    _common(sp, traj_default=10000, k_se=4.0, sweep=True)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_run_discrete)

    sp = sub.add_parser("run-continuous", help="sweep a continuously monitored protocol")
    _common(sp, traj_default=10000, k_se=3.0, sweep=True)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_run_continuous)

    sp = sub.add_parser("verify", help="numerical invariants for configs plus global checks")
    sp.add_argument("--config", action="append", help="config to check (repeatable; default all bundled)")
    _common(sp, traj_default=0, k_se=3.0, config_required=False)
    sp.add_argument("--skip-global", action="store_true", help="skip microreversibility and dilated checks")
    sp.add_argument("--json", help="write the check list as JSON")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("verify-tables", help="closed-form trajectory tables with formulas and generic cross-check")
    sp.add_argument("--beta-omega", type=float, default=1.0)
    sp.add_argument("--epsilon", type=float, default=0.1)
    sp.add_argument("--kappa-dt", type=float, default=1.0)
    sp.add_argument("--omega-over-kappa", type=float, default=1.0)
    sp.add_argument("--variant", nargs="+", choices=("classical", "quantum"), default=["classical", "quantum"])
    sp.add_argument("--tables", nargs="+", choices=("single", "double"), default=["single", "double"])
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_verify_tables)

    sp = sub.add_parser("sample", help="dump sampled trajectories as JSON lines")
    _common(sp, traj_default=100, k_se=3.0)
    sp.add_argument("--start", type=int, default=0, help="first trajectory index")
    sp.add_argument("--out", help="JSONL path (default stdout)")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("postselect", help="run backward experiments and compare acceptance with P_tr")
    _common(sp, traj_default=2000, k_se=4.0)
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_postselect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliFailure as e:
        note(f"error: {e}")
        return e.code
    except (ConfigError, ProtocolError, QdynError) as e:
        note(f"error: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
