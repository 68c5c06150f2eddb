"""Certified two-sided bounds on the diameter of small CC balls.

For a ball B(q, r) the upper bound 2r is the triangle inequality.  The lower
bound follows a calibrated (or quasi-calibrated) curve through q for time
r - delta in both directions; its endpoints q1, q2 lie in the ball, and every
competitor joining them is at least as long as the potential increase, up to
the measured margin.  Competitors that leave the calibrated box are excluded
by requiring r below the safe radius of the box.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import hamiltonian as ham
from .calibration import CalibrationField, CalibrationReport, inner_box, verify_calibration
from .distance import calibration_potentials, distance_upper
from .errors import DegenerateBox, PreconditionError
from .quasicalib import QuasiCalibration, quasicalibrated_flow
from .rng import stream
from .structures import C0, C11, Box, SRStructure, sample_points

SAFETY = 1.05


@dataclass(frozen=True)
class BallDiameterReport:
    structure: str
    regime: str
    q: list
    r: float
    delta: float
    q1: list
    q2: list
    lower_bound: float
    upper_bound: float
    rbar: float
    margin: float | None = None  # C11: verified calibration margin s
    eps1: float | None = None  # C0 slacks
    eps2: float | None = None
    budget: dict = field(default_factory=dict)
    curve_length: float = math.nan

    @property
    def ratio(self) -> float:
        return self.lower_bound / self.upper_bound

    @property
    def budget_total(self) -> float:
        return float(sum(self.budget.values()))

    @property
    def certified_lower(self) -> float:
        return self.lower_bound - self.budget_total

    @property
    def certified_ratio(self) -> float:
        return self.certified_lower / self.upper_bound

    def to_json(self) -> dict:
        d = asdict(self)
        d.update(ratio=self.ratio, budget_total=self.budget_total,
                 certified_lower=self.certified_lower, certified_ratio=self.certified_ratio)
        return d


def safe_radius(S: SRStructure, q, W_box: Box, sample_count: int = 2000, seed: int = 0) -> float:
    """rbar = dist(q, boundary of W_box) / (2C), C = 1.05 * max frame operator norm over W_box.

    An admissible curve from q of length at most 2 rbar moves the chart point
    by at most C * 2 rbar, so it cannot reach the boundary.
    """
    q = np.asarray(q, dtype=float)
    d = float(np.min(W_box.boundary_distance(q)))
    if d <= 0.0:
        raise DegenerateBox(f"{q.tolist()} is not interior to the box")
    pts = sample_points(W_box, sample_count, seed)
    C = SAFETY * float(np.max(np.linalg.norm(S.frame_matrix(pts), ord=2, axis=(1, 2))))
    return d / (2.0 * C)


def _check_radii(r, delta):
    if not (0.0 < delta < r):
        raise PreconditionError(f"need 0 < delta < r, got delta={delta!r}, r={r!r}")


def ball_diameter_certificate_C11(S: SRStructure, CF: CalibrationField, q, r: float, delta: float, *,
                                  margin: float | None = None, W_box: Box | None = None,
                                  rbar: float | None = None, steps: int = 200) -> BallDiameterReport:
    """Certificate from an exact calibration; ``margin`` defaults to a 4000-sample verification."""
    if S.regularity != C11:
        raise PreconditionError("the calibration certificate needs a C11 structure")
    _check_radii(r, delta)
    q = np.asarray(q, dtype=float)
    W_box = inner_box(CF) if W_box is None else W_box
    if not W_box.contains(q):
        raise PreconditionError(f"{q.tolist()} is outside the calibrated box")
    rbar = safe_radius(S, q, W_box) if rbar is None else rbar
    if not r < rbar:
        raise PreconditionError(f"r={r:g} is not below the safe radius {rbar:g}")
    if margin is None:
        margin = verify_calibration(CF, 4000, 0, n_loops=0).margin
    s = max(1.0, float(margin))
    inv = CF.invert(q[None])
    if not inv.ok[0]:
        raise PreconditionError(f"{q.tolist()} is not in the calibrated set")
    tq, xq = inv.params[0, 0], inv.params[0, 1:]
    a = r - delta
    if abs(tq) + a > CF.eps:
        raise PreconditionError(f"|t_q| + r - delta = {abs(tq) + a:g} exceeds eps = {CF.eps:g}")
    P = np.array([np.r_[tq - a, xq], np.r_[tq + a, xq]])
    ends, _ = CF.forward(P)
    q1, q2 = ends
    # the same curve by direct integration from (q, Lam(q)): an independent endpoint check
    st = ham.CotangentState(q, inv.lam[0])
    fwd = ham.integrate_extremal(S, st, a, steps)
    bwd = ham.integrate_extremal(S, st, -a, steps)
    integ = max(np.linalg.norm(fwd.q[-1] - q2), np.linalg.norm(bwd.q[-1] - q1))
    hn = np.linalg.norm(ham.controls(S, np.r_[bwd.q[::-1], fwd.q[1:]], np.r_[bwd.lam[::-1], fwd.lam[1:]]), axis=1)
    length = float(np.trapezoid(hn, np.r_[bwd.times[::-1], fwd.times[1:]]))

    p1, p2 = calibration_potentials(CF, ends)
    raw = p2.value - p1.value
    lower = max(0.0, raw) / s
    lam_scale = float(np.max(np.linalg.norm(inv.lam, axis=1)))
    path_err = [e for e in (p1.path_error, p2.path_error) if math.isfinite(e)]
    budget = {
        "quadrature": (p1.quad_error + p2.quad_error) / s,
        "path_independence": float(sum(path_err)) / s,
        "newton": 2.0 * CF.newton_tol * (1.0 + float(np.linalg.norm(q))) * lam_scale / s,
        "integration": 2.0 * integ * lam_scale / s,
    }
    return BallDiameterReport(
        structure=S.name, regime=C11, q=q.tolist(), r=float(r), delta=float(delta),
        q1=q1.tolist(), q2=q2.tolist(), lower_bound=float(lower), upper_bound=2.0 * r, rbar=float(rbar),
        margin=float(margin), budget=budget, curve_length=length,
    )


def ball_diameter_certificate_C0(S: SRStructure, QC: QuasiCalibration, q, r: float, delta: float, *,
                                 rbar: float | None = None, steps: int = 400) -> BallDiameterReport:
    """Certificate from a quasi-calibration: lower = <omega, q2 - q1> / (1 + eps1)."""
    _check_radii(r, delta)
    q = np.asarray(q, dtype=float)
    if not QC.U.contains(q):
        raise PreconditionError(f"{q.tolist()} is outside the quasi-calibrated box")
    rbar = safe_radius(S, q, QC.U) if rbar is None else rbar
    if not r < rbar:
        raise PreconditionError(f"r={r:g} is not below the safe radius {rbar:g}")
    a = r - delta
    curve = quasicalibrated_flow(QC, S, q, a, steps)
    fine = quasicalibrated_flow(QC, S, q, a, 2 * steps)
    q1, q2 = curve.points[0], curve.points[-1]
    integ = max(np.linalg.norm(fine.points[0] - q1), np.linalg.norm(fine.points[-1] - q2))
    integral = float(QC.omega @ (q2 - q1))
    lower = max(0.0, integral) / (1.0 + QC.eps1)
    om = float(np.linalg.norm(QC.omega))
    budget = {"integration": 2.0 * integ * om / (1.0 + QC.eps1)}
    return BallDiameterReport(
        structure=S.name, regime=C0, q=q.tolist(), r=float(r), delta=float(delta),
        q1=q1.tolist(), q2=q2.tolist(), lower_bound=float(lower), upper_bound=2.0 * r, rbar=float(rbar),
        eps1=float(QC.eps1), eps2=float(QC.eps2), budget=budget,
        curve_length=2.0 * a,  # unit control hbar/|hbar| is the least-norm one
    )


# ---------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepRow:
    base_index: int  # 0 = the construction's base point, 1.. = cloud points
    report: BallDiameterReport
    cross_check_upper: float | None = None
    cross_check_ok: bool | None = None


CSV_HEADER = ["structure", "regime", "q", "r", "delta", "lower", "upper", "ratio", "budget"]


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def base_point_cloud(S: SRStructure, q, box: Box, count: int, r_max: float, seed: int = 0) -> np.ndarray:
    """q followed by ``count`` points of V = q + half of the box, kept at distance > 2.2 C r_max from its boundary."""
    q = np.asarray(q, dtype=float)
    pts = sample_points(box, 500, seed)
    C = SAFETY * float(np.max(np.linalg.norm(S.frame_matrix(pts), ord=2, axis=(1, 2))))
    half = 0.5 * box.half_widths
    room = np.min(box.boundary_distance(q)) - 2.2 * C * r_max
    reach = np.minimum(half, 0.9 * max(room, 0.0))
    rng = stream(seed, "base_point_cloud")
    offs = rng.uniform(-1.0, 1.0, size=(count, S.n)) * reach
    return np.vstack([q, q + offs])


def diameter_sweep(S: SRStructure, q, radii, regime: str, construction, *, margin: float | None = None,
                   delta_fraction: float = 1e-3, cloud: int = 5, seed: int = 0, cross_check: bool = False,
                   cross_check_allowance: float = 1e-3) -> list[SweepRow]:
    """Certificates for every radius at q and at a cloud of nearby base points, one construction for all.

    ``construction`` is the CalibrationField (C11) or QuasiCalibration (C0) built at q.
    Rows are independent given the shared construction; they run sequentially.
    """
    radii = [float(r) for r in radii]
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise PreconditionError("radii must be strictly decreasing")
    if regime == C11:
        box = inner_box(construction)
        if margin is None:
            margin = verify_calibration(construction, 4000, seed, n_loops=0).margin
    elif regime == C0:
        box = construction.U
    else:
        raise ValueError(f"unknown regime {regime!r}")
    points = base_point_cloud(S, q, box, cloud, radii[0], seed)
    rows = []
    for i, x in enumerate(points):
        rbar = safe_radius(S, x, box)
        for r in radii:
            delta = delta_fraction * r
            if regime == C11:
                rep = ball_diameter_certificate_C11(S, construction, x, r, delta, margin=margin, W_box=box, rbar=rbar)
            else:
                rep = ball_diameter_certificate_C0(S, construction, x, r, delta, rbar=rbar)
            up = ok = None
            if cross_check:
                est = distance_upper(S, rep.q1, rep.q2, restarts=1, seed=seed)
                up = est.upper
                ok = bool(rep.lower_bound <= up + cross_check_allowance)
            rows.append(SweepRow(i, rep, up, ok))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        rep = row.report
        w.writerow([rep.structure, rep.regime, ";".join(_fmt(v) for v in rep.q), _fmt(rep.r), _fmt(rep.delta),
                    _fmt(rep.lower_bound), _fmt(rep.upper_bound), _fmt(rep.ratio), _fmt(rep.budget_total)])
    return buf.getvalue()


def sweep_json(rows: list[SweepRow]) -> str:
    out = []
    for row in rows:
        d = row.report.to_json()
        d.update(base_index=row.base_index, cross_check_upper=row.cross_check_upper,
                 cross_check_ok=row.cross_check_ok)
        out.append(d)
    return json.dumps(out, indent=1, sort_keys=True, allow_nan=True)
