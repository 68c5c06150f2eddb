"""Command-line front end.

Exit codes: 0 success, 1 computation or verification failure, 2 configuration error.
Every command writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from . import calibration as cal
from . import diameter as dia
from . import distance as dist
from . import hamiltonian as ham
from .errors import (CCError, ConstructionFailed, NotHorizontal, OutsideCalibratedSet,
                     PointOutsideDomain, PreconditionError, RegularityError, ShrinkExhausted,
                     StructureDefinitionError, UnknownStructure, ZeroFrame)
from .quasicalib import QuasiCalibration, build_quasicalibration, measure_quasicalibration_bounds
from .structures import BUILTIN_NAMES, C0, C11, builtin, resolve_structure

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

CONFIG_ERRORS = (UnknownStructure, StructureDefinitionError, PointOutsideDomain, PreconditionError,
                 RegularityError, NotHorizontal, ZeroFrame)

C11_RATIO_TARGET = 0.98


class ConfigError(Exception):
    pass


# ----------------------------------------------------------------- output


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n"


def write_manifest(out: Path, command: str, resolved: dict) -> None:
    doc = {
        "command": command,
        "resolved_config": resolved,
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    atomic_write(out / "manifest.json", dumps(doc))


# ----------------------------------------------------------------- config


def _vector(value, name: str, n: int | None = None) -> np.ndarray:
    if isinstance(value, str):
        value = [float(v) for v in value.replace(",", " ").split()]
    try:
        arr = np.array(value, dtype=float).ravel()
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a list of numbers") from None
    if n is not None and arr.size != n:
        raise ConfigError(f"{name}: expected {n} components, got {arr.size}")
    return arr


def _resolve(args, command: str, defaults: dict) -> dict:
    """Merge defaults < config file (top level + command section) < explicit flags."""
    cfg = dict(defaults)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key in ("structure", "seed"):
            if key in doc:
                cfg[key] = doc[key]
        section = doc.get(command, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {command!r} must be an object")
        cfg.update(section)
    for key, value in vars(args).items():
        if key in ("func", "config", "out", "json", "command") or value is None:
            continue
        cfg[key] = value
    return cfg


def _structure(cfg):
    if cfg.get("structure") is None:
        raise ConfigError("no structure given (use --structure or the config file)")
    return resolve_structure(cfg["structure"])


def _point(cfg, key, S, default=None):
    v = cfg.get(key, default)
    if v is None:
        return np.zeros(S.n)
    return _vector(v, key, S.n)


# --------------------------------------------------------------- commands


def cmd_list_structures(args) -> int:
    rows = []
    for name in BUILTIN_NAMES:
        S = builtin(name)
        rows.append({"name": name, "n": S.n, "m": S.m, "regularity": S.regularity,
                     "domain": S.domain.to_json()})
    if args.json:
        sys.stdout.write(dumps(rows))
    else:
        print(f"{'name':<16} {'n':>2} {'m':>2} regularity")
        for r in rows:
            print(f"{r['name']:<16} {r['n']:>2} {r['m']:>2} {r['regularity']}")
    return EXIT_OK


def cmd_extremal(args, cfg, out: Path) -> int:
    S = _structure(cfg)
    if S.regularity != C11:
        raise RegularityError(f"{S.name} is C0: normal extremals are only integrated for C11 structures "
                              "(the Hamiltonian vector field needs Lipschitz derivatives to be well posed)")
    q0 = _point(cfg, "q0", S)
    lam0 = _vector(cfg["lam0"], "lam0", S.n) if cfg.get("lam0") is not None else np.eye(S.n)[0]
    T = float(cfg.get("T", 1.0))
    steps = int(cfg.get("steps", 1000))
    traj = ham.integrate_extremal(S, ham.CotangentState(q0, lam0), T, steps)
    atomic_write(out / "trajectory.csv", ham.trajectory_csv(traj))
    summary = {"status": traj.status, "rows": len(traj.times), "H0": traj.H_values[0], "drift": traj.drift,
               "drift_bound": traj.drift_bound, "final_q": traj.q[-1]}
    atomic_write(out / "extremal.json", dumps(summary))
    _emit(args, summary, f"H drift {traj.drift:.3e} over {len(traj.times)} rows ({traj.status})")
    return EXIT_OK if traj.status == "ok" else EXIT_FAIL


def cmd_calibrate(args, cfg, out: Path) -> int:
    S = _structure(cfg)
    p = _point(cfg, "p", S)
    direction = _vector(cfg["direction"], "direction", S.m) if cfg.get("direction") is not None else None
    eps = float(cfg["eps"]) if cfg.get("eps") is not None else None
    CF = cal.build_calibration(S, p, eps, int(cfg.get("grid", 17)), direction=direction)
    rep = cal.verify_calibration(CF, int(cfg.get("samples", 10_000)), int(cfg.get("seed", 0)))
    atomic_write(out / "calibration.json", json.dumps(cal.calibration_to_json(CF)) + "\n")
    atomic_write(out / "verification.json", dumps(rep.to_json()))
    ok = _calibration_ok(rep)
    _emit(args, {"eps": CF.eps, "uprime": CF.uprime, **rep.to_json(), "passed": ok},
          f"eps {CF.eps:g}, U' half-width {CF.uprime:g}, margin {rep.margin:.12g}, "
          f"unit error {rep.unit_error:.3e}")
    return EXIT_OK if ok else EXIT_FAIL


def _calibration_ok(rep) -> bool:
    return rep.margin <= 1.0 + 1e-6 and rep.unit_error <= 1e-6 and rep.inversion_failures == 0


def cmd_quasi_calibrate(args, cfg, out: Path) -> int:
    S = _structure(cfg)
    p = _point(cfg, "p", S)
    target = float(cfg.get("target_eps", 0.05))
    QC = build_quasicalibration(S, p, target, sample_count=int(cfg.get("samples", 2000)),
                                seed=int(cfg.get("seed", 0)))
    atomic_write(out / "quasicalibration.json", dumps(QC.to_json()))
    _emit(args, QC.to_json(), f"U {QC.U.lo.tolist()}..{QC.U.hi.tolist()}, eps1 {QC.eps1:.3e}, eps2 {QC.eps2:.3e}")
    return EXIT_OK


def cmd_verify(args, cfg, out: Path) -> int:
    path = cfg.get("file")
    if not path:
        raise ConfigError("verify needs --file")
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        kind = doc.get("kind") if isinstance(doc, dict) else None
        if kind == "calibration":
            obj = cal.calibration_from_json(doc)
        elif kind == "quasicalibration":
            obj = QuasiCalibration.from_json(doc)
        else:
            raise StructureDefinitionError("unrecognized document kind")
    except (OSError, json.JSONDecodeError, StructureDefinitionError) as exc:
        print(f"error: schema error in {path}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    seed = int(cfg.get("seed", 0))
    if kind == "calibration":
        rep = cal.verify_calibration(obj, int(cfg.get("samples", 10_000)), seed)
        ok = _calibration_ok(rep)
        result = {**rep.to_json(), "passed": ok}
        text = f"margin {rep.margin:.12g}, unit error {rep.unit_error:.3e}"
    else:
        e1, e2 = measure_quasicalibration_bounds(obj, obj.structure, obj.U, int(cfg.get("samples", 2000)), seed)
        ok = e1 <= obj.target_eps and e2 <= obj.target_eps ** 2
        result = {"eps1": e1, "eps2": e2, "target_eps": obj.target_eps, "passed": ok}
        text = f"eps1 {e1:.3e}, eps2 {e2:.3e} (target {obj.target_eps:g})"
    atomic_write(out / "verification.json", dumps(result))
    _emit(args, result, text + ("" if ok else " FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


def distance_estimate(S, p, q, *, segments=32, restarts=3, seed=0) -> dist.DistanceEstimate:
    """Conserved-functional check, optimizer upper bound, and the best available certified lower bound."""
    sep = dist.infinite_distance_certificate(S, p, q)
    if sep is not None:
        return dist.DistanceEstimate(math.inf, math.inf, "infty_certified", "conserved_functional", None,
                                     {"functional": sep.tolist(), "gap": float(sep @ (q - p))})
    est = dist.distance_upper(S, p, q, segments=segments, restarts=restarts, seed=seed)
    diag = dict(est.diagnostics)
    lower = dist.chart_lower_bound(S, p, q)
    diag["lower_chart"] = lower
    if est.status == "finite" and np.linalg.norm(q - p) > 0:
        try:
            if S.regularity == C11:
                u0 = est.witness_path.controls[0]
                for eps, uprime in ((1.6 * est.upper, None), (3.0 * est.upper, 1.5 * est.upper)):
                    # a longer, thinner W when the escape bound, not the potential, is binding
                    CF = cal.build_calibration(S, p, eps, uprime=uprime, direction=u0 / np.linalg.norm(u0))
                    rep = cal.verify_calibration(CF, 2000, seed, n_loops=0)
                    lw = dist.distance_lower(CF, p, q, rep.margin)
                    esc = dist.escape_length(S, p, lambda b: cal.box_inside(CF, b), 2.0 * est.upper)
                    diag.update(calibration_eps=CF.eps, margin=rep.margin, lower_calibrated=lw, escape_length=esc)
                    lower = max(lower, min(lw, esc))
                    if esc >= lw:
                        break
            else:
                QC = build_quasicalibration(S, p, 0.05, seed=seed)
                lq = abs(float(QC.omega @ (q - p))) / (1.0 + QC.eps1)
                esc = dist.escape_length(S, p, lambda b: dist.box_in_box(b, QC.U), 2.0 * est.upper)
                diag.update(eps1=QC.eps1, eps2=QC.eps2, lower_quasicalibrated=lq, escape_length=esc)
                lower = max(lower, min(lq, esc))
        except (ConstructionFailed, OutsideCalibratedSet, ShrinkExhausted) as exc:
            diag["lower_calibrated_error"] = str(exc)
    return dist.DistanceEstimate(est.upper, lower, est.status, est.method, est.witness_path, diag)


def _witness_csv(path: dist.AdmissibleCurvePath) -> str:
    n, m = path.points.shape[1], path.controls.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"q{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
    for k, (t, x) in enumerate(zip(path.times, path.points)):
        u = path.controls[k] if k < len(path.controls) else [None] * m
        w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in x] + ["" if v is None else f"{v:.17g}" for v in u])
    return buf.getvalue()


def cmd_distance(args, cfg, out: Path) -> int:
    S = _structure(cfg)
    p = _point(cfg, "p", S)
    if cfg.get("q") is None:
        raise ConfigError("distance needs --q")
    q = _point(cfg, "q", S)
    est = distance_estimate(S, p, q, segments=int(cfg.get("segments", 32)), restarts=int(cfg.get("restarts", 3)),
                            seed=int(cfg.get("seed", 0)))
    doc = est.to_json(pair=[p.tolist(), q.tolist()])
    if est.witness_path is not None:
        atomic_write(out / "witness.csv", _witness_csv(est.witness_path))
        doc["witness"] = "witness.csv"
    else:
        doc["witness"] = None
    atomic_write(out / "distance.json", dumps(doc))
    _emit(args, doc, f"d in [{est.lower:.10g}, {est.upper:.10g}] ({est.status})")
    return EXIT_OK


def cmd_diameter(args, cfg, out: Path) -> int:
    S = _structure(cfg)
    regime = cfg.get("regime") or S.regularity
    if regime not in (C11, C0):
        raise ConfigError(f"unknown regime {regime!r}")
    if regime == C11 and S.regularity != C11:
        raise ConfigError(f"{S.name} is C0: the exact calibration certificate does not apply")
    q = _point(cfg, "q", S)
    radii = [float(r) for r in _vector(cfg.get("radii", [0.1, 0.05, 0.025]), "radii")]
    seed = int(cfg.get("seed", 0))
    delta = cfg.get("delta")
    frac = float(cfg.get("delta_fraction", 1e-3))
    if delta is not None:
        if not all(0 < float(delta) < r for r in radii):
            raise ConfigError(f"delta={delta} must lie in (0, r) for every radius")
        fractions = {float(delta) / r for r in radii}
        if len(fractions) > 1:
            raise ConfigError("an absolute delta needs a single radius; use delta_fraction for sweeps")
        frac = fractions.pop()
    if not 0.0 < frac < 1.0:
        raise ConfigError("delta_fraction must lie in (0, 1)")
    target_eps = float(cfg.get("target_eps", 0.05))
    if regime == C11:
        eps = float(cfg["eps"]) if cfg.get("eps") is not None else None
        construction = cal.build_calibration(S, q, eps)
        margin = cal.verify_calibration(construction, int(cfg.get("samples", 4000)), seed, n_loops=0).margin
        target = C11_RATIO_TARGET
    else:
        construction = build_quasicalibration(S, q, target_eps, seed=seed)
        margin = None
        target = (1.0 - target_eps) * C11_RATIO_TARGET
    rows = dia.diameter_sweep(S, q, radii, regime, construction, margin=margin, delta_fraction=frac,
                              cloud=int(cfg.get("cloud", 5)), seed=seed,
                              cross_check=bool(cfg.get("cross_check", False)))
    atomic_write(out / "sweep.csv", dia.sweep_csv(rows))
    atomic_write(out / "sweep.json", dia.sweep_json(rows) + "\n")
    bad = next((r for r in rows if r.report.certified_ratio < target or r.cross_check_ok is False), None)
    for r in rows:
        rep = r.report
        extra = f" eps1={rep.eps1:.3e} eps2={rep.eps2:.3e}" if regime == C0 else f" s={rep.margin:.12g}"
        if not args.json:
            print(f"q={rep.q} r={rep.r:g} ratio={rep.ratio:.6f} certified={rep.certified_ratio:.6f}{extra}")
    if args.json:
        sys.stdout.write(dia.sweep_json(rows) + "\n")
    if bad is not None:
        print(f"error: row q={bad.report.q} r={bad.report.r:g} misses the target "
              f"(certified ratio {bad.report.certified_ratio:.6f} < {target:g}, cross-check {bad.cross_check_ok})",
              file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _emit(args, doc, text: str) -> None:
    if args.json:
        sys.stdout.write(dumps(doc))
    else:
        print(text)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--structure", help="built-in name or definition file")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")

    parser = argparse.ArgumentParser(prog="ccdiam", description="Diameters of small sub-Riemannian balls")
    parser.add_argument("--version", action="version", version=f"ccdiam {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list-structures", parents=[common], help="list built-in structures")
    p.set_defaults(func=cmd_list_structures)

    p = sub.add_parser("extremal", parents=[common], help="integrate a normal extremal")
    p.add_argument("--q0")
    p.add_argument("--lam0")
    p.add_argument("--T", type=float)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_extremal)

    p = sub.add_parser("calibrate", parents=[common], help="build and verify a calibration")
    p.add_argument("--p")
    p.add_argument("--eps", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--direction")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quasi-calibrate", parents=[common], help="build a quasi-calibration (C0)")
    p.add_argument("--p")
    p.add_argument("--target-eps", dest="target_eps", type=float)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_quasi_calibrate)

    p = sub.add_parser("verify", parents=[common], help="re-verify a stored (quasi-)calibration")
    p.add_argument("--file")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("distance", parents=[common], help="bracket a CC distance")
    p.add_argument("--p")
    p.add_argument("--q")
    p.add_argument("--segments", type=int)
    p.add_argument("--restarts", type=int)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("diameter", parents=[common], help="certified ball-diameter sweep")
    p.add_argument("--q")
    p.add_argument("--radii")
    p.add_argument("--regime", choices=[C11, C0])
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-fraction", dest="delta_fraction", type=float)
    p.add_argument("--target-eps", dest="target_eps", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--cloud", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--cross-check", dest="cross_check", action="store_true", default=None)
    p.set_defaults(func=cmd_diameter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-structures":
        return cmd_list_structures(args)
    out = Path(args.out)
    try:
        cfg = _resolve(args, args.command, {"seed": 0})
        code = args.func(args, cfg, out)
        write_manifest(out, args.command, _jsonable(cfg))
        return code
    except (ConfigError, *CONFIG_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CCError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
