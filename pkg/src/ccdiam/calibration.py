"""Calibrations near a point of a C11 sub-Riemannian structure.

Construction, in an affine chart y = M (x - p) where the frame at p becomes
the first m unit vectors:

* seeds on the hyperplane {y_1 = 0}: covector xi(y') = c(y') e_1^* scaled so
  that H((0, y'), xi(y')) = 1/2;
* flow map (t, y') -> (Q, Lam)(t, y') of the Hamiltonian system started at
  the seed;
* on the image W of Q the covector field Lam is exact (it is the push-forward
  of dt), satisfies <Lam, v> <= |v| on horizontal vectors and equals 1 on the
  unit field Y = sum_i <Lam, X_i> X_i.

Points of W are mapped back to flow parameters by Newton/Broyden iteration
seeded from a precomputed table; covectors between table nodes always come
from a fresh integration, never from interpolation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import hamiltonian as ham
from .errors import (
    ConstructionFailed,
    OutsideCalibratedSet,
    RankDeficient,
    RegularityError,
    SeedDegenerate,
    StructureDefinitionError,
)
from .rng import stream
from .structures import C11, RANK_TOL, Box, SRStructure, _rank, structure_from_document

SEED_TOL = 1e-8
CONSERVATION_TOL = 1e-8
MAX_SHRINK_ROUNDS = 8


@dataclass(frozen=True)
class AdaptedChart:
    """Affine chart y = M (x - base) with M X'_i(base) = e_i, X' = frame rotated by R."""

    base: np.ndarray
    M: np.ndarray
    Minv: np.ndarray
    rotation: np.ndarray  # m x m orthogonal; X'_i = sum_j R_ij X_j

    def to_adapted(self, x):
        return (np.asarray(x, dtype=float) - self.base) @ self.M.T

    def to_chart(self, y):
        return self.base + np.asarray(y, dtype=float) @ self.Minv.T

    def covector_to_chart(self, eta):
        return np.asarray(eta, dtype=float) @ self.M

    def covector_to_adapted(self, lam):
        return np.asarray(lam, dtype=float) @ self.Minv

    def adapted_frame(self, S: SRStructure, x) -> np.ndarray:
        return self.M @ S.frame_matrix(x) @ self.rotation.T


def _rotation_with_first_row(d: np.ndarray) -> np.ndarray:
    m = d.size
    Q, _ = np.linalg.qr(np.column_stack([d, np.eye(m)]))
    if Q[:, 0] @ d < 0:
        Q = -Q
    return Q.T


def adapt_chart(S: SRStructure, p, direction=None) -> AdaptedChart:
    """Affine chart centred at p in which X_i(p) = e_i for i <= m.

    ``direction`` optionally rotates the orthonormal frame so that the first
    adapted field is sum_j d_j X_j; the structure (and its Hamiltonian) is
    unchanged by such a rotation.
    """
    if S.regularity != C11:
        raise RegularityError(f"{S.name} is C0; calibrations need a C11 structure")
    p = S.check_point(p)
    F = S.frame_matrix(p)
    if _rank(F, RANK_TOL) < S.m:
        raise RankDeficient(f"frame of {S.name} has rank < {S.m} at {p.tolist()}")
    if direction is None:
        R = np.eye(S.m)
    else:
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        R = _rotation_with_first_row(d)
    Fr = F @ R.T
    U, _, _ = np.linalg.svd(Fr)
    B = np.column_stack([Fr, U[:, S.m:]])
    Minv = B
    M = np.linalg.inv(B)
    return AdaptedChart(p.copy(), M, Minv, R)


def seed_covector(S: SRStructure, chart: AdaptedChart, xprime) -> np.ndarray:
    """Seed covector(s) xi(x') = c(x') e_1^* in adapted coordinates; batched over x'.

    Raises SeedDegenerate where sum_i (first adapted component of X_i)^2 is too small.
    """
    xprime = np.atleast_2d(np.asarray(xprime, dtype=float))
    y = np.column_stack([np.zeros(len(xprime)), xprime])
    row = chart.adapted_frame(S, chart.to_chart(y))[:, 0, :]
    s = np.sum(row * row, axis=-1)
    if np.any(s <= SEED_TOL):
        raise SeedDegenerate("first adapted component of the frame vanishes on the seed hyperplane; shrink U'")
    xi = np.zeros_like(y)
    xi[:, 0] = 1.0 / np.sqrt(s)
    return xi


@dataclass(frozen=True, eq=False)
class CalibrationField:
    structure: SRStructure
    chart: AdaptedChart
    eps: float
    uprime: float
    t_grid: np.ndarray
    x_grid: np.ndarray  # 1-D grid shared by every U' axis
    Q_table: np.ndarray  # (nt, nx, ..., nx, n) chart coordinates
    Lam_table: np.ndarray  # same shape, chart covectors
    steps: int
    newton_tol: float = 1e-10
    newton_maxit: int = 40
    jac_lower_bound: float = 0.25
    h_target: float = 0.01
    build_log: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.structure.n

    @property
    def base(self) -> np.ndarray:
        return self.chart.base

    @property
    def param_grid(self) -> np.ndarray:
        g = np.meshgrid(self.t_grid, *[self.x_grid] * (self.n - 1), indexing="ij")
        return np.stack(g, axis=-1)

    @property
    def adapted_Q(self) -> np.ndarray:
        if "aQ" not in self._cache:
            self._cache["aQ"] = self.chart.to_adapted(self.Q_table)
        return self._cache["aQ"]

    @property
    def DQ_table(self) -> np.ndarray:
        """Jacobian of (t, y') -> Q_adapted on the table, by finite differences."""
        if "DQ" not in self._cache:
            self._cache["DQ"] = _table_jacobian(self.adapted_Q, self.t_grid, self.x_grid)
        return self._cache["DQ"]

    def _tree(self):
        if "tree" not in self._cache:
            pts = self.adapted_Q.reshape(-1, self.n)
            self._cache["tree"] = cKDTree(pts)
        return self._cache["tree"]

    def forward(self, P) -> tuple[np.ndarray, np.ndarray]:
        """(Q, Lam) in chart coordinates for flow parameters P[:, 0]=t, P[:, 1:]=x'."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        xp = P[:, 1:]
        y0 = np.column_stack([np.zeros(len(P)), xp])
        q0 = self.chart.to_chart(y0)
        lam0 = self.chart.covector_to_chart(seed_covector(self.structure, self.chart, xp))
        q, lam, _ = ham.flow(self.structure, q0, lam0, P[:, 0], self.steps)
        return q, lam

    def in_hull(self, P, rtol: float = 1e-9) -> np.ndarray:
        P = np.atleast_2d(P)
        ok = np.abs(P[:, 0]) <= self.eps * (1 + rtol)
        if self.n > 1:
            ok &= np.all(np.abs(P[:, 1:]) <= self.uprime * (1 + rtol), axis=1)
        return ok

    def invert(self, X) -> "Inversion":
        return _invert(self, np.atleast_2d(np.asarray(X, dtype=float)))


@dataclass(frozen=True)
class Inversion:
    params: np.ndarray  # (B, n)
    lam: np.ndarray  # (B, n) chart covectors
    residual: np.ndarray  # (B,)
    ok: np.ndarray  # (B,) bool
    iterations: np.ndarray


def _table_jacobian(aQ: np.ndarray, t_grid, x_grid) -> np.ndarray:
    n = aQ.shape[-1]
    axes = tuple(range(n))
    spacings = [t_grid] + [x_grid] * (n - 1)
    grads = np.gradient(aQ, *spacings, axis=axes, edge_order=2)
    if n == 1:
        grads = [grads]
    return np.stack(grads, axis=-1)  # (..., n_out, n_param)


def _invert(CF: CalibrationField, X: np.ndarray) -> Inversion:
    n = CF.n
    B = len(X)
    Y = CF.chart.to_adapted(X)
    scale = np.maximum(1.0, np.linalg.norm(Y, axis=1))
    tol = CF.newton_tol * scale
    params = np.full((B, n), np.nan)
    lam_out = np.full((B, n), np.nan)
    res_out = np.full(B, np.inf)
    iters = np.zeros(B, dtype=int)
    ok = np.zeros(B, dtype=bool)

    grid = CF.param_grid.reshape(-1, n)
    aQ = CF.adapted_Q.reshape(-1, n)
    DQ = CF.DQ_table.reshape(-1, n, n)
    k = min(4, len(grid))
    _, nearest = CF._tree().query(Y, k=k)
    nearest = nearest.reshape(B, k)
    hull = np.concatenate([[CF.eps], np.full(n - 1, CF.uprime)])

    for attempt in range(k):
        todo = np.flatnonzero(~ok)
        if todo.size == 0:
            break
        node = nearest[todo, attempt]
        P = grid[node].copy()
        J = DQ[node].copy()
        r = aQ[node] - Y[todo]
        active = np.arange(todo.size)
        for it in range(CF.newton_maxit):
            try:
                dP = -np.linalg.solve(J[active], r[active][..., None])[..., 0]
            except np.linalg.LinAlgError:
                dP = -np.einsum("bij,bj->bi", np.linalg.pinv(J[active]), r[active])
            # keep iterates near the parameter box so the flow stays in the domain
            Pn = np.clip(P[active] + dP, -1.5 * hull, 1.5 * hull)
            dP = Pn - P[active]
            q, lam = CF.forward(Pn)
            rn = CF.chart.to_adapted(q) - Y[todo[active]]
            dr = rn - r[active]
            denom = np.sum(dP * dP, axis=1)
            denom[denom == 0] = 1.0
            J[active] += np.einsum("bi,bj->bij", dr - np.einsum("bij,bj->bi", J[active], dP), dP) / denom[:, None, None]
            P[active] = Pn
            r[active] = rn
            rnorm = np.linalg.norm(rn, axis=1)
            done = rnorm <= tol[todo[active]]
            idx = todo[active[done]]
            params[idx] = Pn[done]
            lam_out[idx] = lam[done]
            res_out[idx] = rnorm[done]
            iters[idx] = it + 1
            ok[idx] = CF.in_hull(Pn[done])
            active = active[~done]
            if active.size == 0:
                break
        # samples converged outside the hull are retried from the next seed
    return Inversion(params, lam_out, res_out, ok, iters)


# ----------------------------------------------------------------- building


def _default_eps(S: SRStructure) -> float:
    return 0.25 * float(np.min(S.domain.half_widths))


def _flow_table(S, chart, eps, uprime, resolution, n_time, h_target):
    n = S.n
    t_grid = np.linspace(-eps, eps, n_time)
    x_grid = np.linspace(-uprime, uprime, resolution)
    steps = max(1, math.ceil(eps / h_target))
    g = np.stack(np.meshgrid(t_grid, *[x_grid] * (n - 1), indexing="ij"), axis=-1)
    P = g.reshape(-1, n)
    xp = P[:, 1:]
    y0 = np.column_stack([np.zeros(len(P)), xp])
    q0 = chart.to_chart(y0)
    lam0 = chart.covector_to_chart(seed_covector(S, chart, xp))
    q, lam, inside = ham.flow(S, q0, lam0, P[:, 0], steps)
    shape = g.shape
    return t_grid, x_grid, steps, q.reshape(shape), lam.reshape(shape), inside.reshape(shape[:-1])


def _check_invariants(CF: CalibrationField, inside: np.ndarray) -> list[str]:
    S = CF.structure
    problems = []
    if not np.all(inside):
        problems.append(f"{int(np.sum(~inside))} flow lines leave the domain")
    H = ham.hamiltonian_values(S, CF.Q_table, CF.Lam_table)
    herr = float(np.max(np.abs(2.0 * H - 1.0)))
    if herr > CONSERVATION_TOL:
        problems.append(f"sum <Lam, X_i>^2 deviates from 1 by {herr:.3g}")
    det = np.linalg.det(CF.DQ_table)
    if np.min(np.abs(det)) < CF.jac_lower_bound:
        problems.append(f"|det DQ| drops to {np.min(np.abs(det)):.3g}")
    # slice t = 0 sits on the seed hyperplane with covectors along e_1^*
    i0 = len(CF.t_grid) // 2
    a0 = CF.adapted_Q[i0]
    eta0 = CF.chart.covector_to_adapted(CF.Lam_table[i0])
    if np.max(np.abs(a0[..., 0])) > 1e-12 or np.max(np.abs(eta0[..., 1:])) > 1e-12 or np.min(eta0[..., 0]) <= 0:
        problems.append("t=0 slice is not the seeded hyperplane")
    collisions = _collision_scan(CF)
    if collisions:
        problems.append(f"{collisions} grid-image collisions (flow map not injective)")
    return problems


def _collision_scan(CF: CalibrationField) -> int:
    n = CF.n
    aQ = CF.adapted_Q.reshape(-1, n)
    dt = CF.t_grid[1] - CF.t_grid[0]
    sep = dt if n == 1 else min(dt, CF.x_grid[1] - CF.x_grid[0])
    pairs = cKDTree(aQ).query_pairs(r=0.3 * sep, output_type="ndarray")
    if len(pairs) == 0:
        return 0
    idx = np.array(np.unravel_index(np.arange(len(aQ)), CF.Q_table.shape[:-1])).T
    far = np.max(np.abs(idx[pairs[:, 0]] - idx[pairs[:, 1]]), axis=1) >= 2
    return int(np.sum(far))


def build_calibration(
    S: SRStructure,
    p,
    eps: float | None = None,
    grid_resolution: int = 17,
    *,
    uprime: float | None = None,
    time_samples: int = 65,
    direction=None,
    h_target: float = 0.01,
    jac_lower_bound: float = 0.25,
    newton_tol: float = 1e-10,
) -> CalibrationField:
    """Integrate the seeded Hamiltonian flow on a (t, x') grid and check it is a calibration.

    On any invariant violation the time half-width and the U' half-width are
    halved alternately (eps first), for at most 8 rounds.
    """
    if S.regularity != C11:
        raise RegularityError(f"{S.name} is C0; use the quasi-calibration instead")
    chart = adapt_chart(S, p, direction)
    eps = _default_eps(S) if eps is None else float(eps)
    uprime = eps if uprime is None else float(uprime)
    if time_samples % 2 == 0:
        time_samples += 1  # keep t = 0 on the grid
    log = []
    for rnd in range(MAX_SHRINK_ROUNDS + 1):
        t_grid, x_grid, steps, Qt, Lt, inside = _flow_table(
            S, chart, eps, uprime, grid_resolution, time_samples, h_target)
        CF = CalibrationField(S, chart, eps, uprime, t_grid, x_grid, Qt, Lt, steps,
                              newton_tol=newton_tol, jac_lower_bound=jac_lower_bound,
                              h_target=h_target)
        problems = _check_invariants(CF, inside)
        log.append({"round": rnd, "eps": eps, "uprime": uprime, "problems": problems})
        if not problems:
            return replace(CF, build_log=tuple(log), _cache={})
        if rnd % 2 == 0:
            eps *= 0.5
        else:
            uprime *= 0.5
    raise ConstructionFailed(
        f"calibration at {np.asarray(p).tolist()} failed after {MAX_SHRINK_ROUNDS} shrink rounds: "
        + "; ".join(log[-1]["problems"]))


# ---------------------------------------------------------------- evaluation


def evaluate_calibration(CF: CalibrationField, x) -> np.ndarray:
    """Covector Lam(x) in chart coordinates; batched over leading axis."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    inv = CF.invert(x)
    if not np.all(inv.ok):
        bad = np.atleast_2d(x)[~inv.ok][0]
        raise OutsideCalibratedSet(f"point {bad.tolist()} is not in the calibrated set W")
    return inv.lam[0] if single else inv.lam


def calibrated_direction(CF: CalibrationField, x) -> tuple[np.ndarray, np.ndarray]:
    """Unit field Y(x) = sum_i h_i X_i(x) with h_i = <Lam(x), X_i(x)>; returns (Y, h)."""
    lam = evaluate_calibration(CF, x)
    F = CF.structure.frame_matrix(x)
    h = np.einsum("...a,...ai->...i", lam, F)
    Y = np.einsum("...ai,...i->...a", F, h)
    return Y, h


def box_inside(CF: CalibrationField, box: Box, face_samples: int = 9) -> bool:
    """True when a grid on every face of ``box`` inverts into the parameter box.

    W is a topological ball, so a box whose boundary lies in W lies in W
    (up to the resolution of the face grid).
    """
    n = CF.n
    if not (np.all(box.lo >= CF.structure.domain.lo) and np.all(box.hi <= CF.structure.domain.hi)):
        return False
    u = np.linspace(-1.0, 1.0, face_samples)
    grid = np.stack(np.meshgrid(*[u] * (n - 1), indexing="ij"), axis=-1).reshape(-1, n - 1)
    unit = np.concatenate([np.insert(grid, ax, sgn, axis=1) for ax in range(n) for sgn in (-1.0, 1.0)])
    return bool(np.all(CF.invert(box.center + unit * box.half_widths).ok))


def inner_box(CF: CalibrationField, face_samples: int = 9, max_rounds: int = 20) -> Box:
    """Large sup-norm box around the base point inside W (and inside the domain).

    The first guess is the minimal sup-distance from the base point to the
    images of the parameter-box faces, minus half a face cell.  It is then
    shrunk by 10% until ``box_inside`` accepts it.
    """
    n = CF.n
    Q = CF.Q_table
    dmin = np.inf
    gap = 0.0
    for ax in range(n):
        for end in (0, -1):
            s = [slice(None)] * n
            s[ax] = end
            face = Q[tuple(s)]
            dmin = min(dmin, float(np.min(np.max(np.abs(face.reshape(-1, n) - CF.base), axis=1))))
            cell = sum(float(np.max(np.abs(np.diff(face, axis=a)))) for a in range(face.ndim - 1) if face.shape[a] > 1)
            gap = max(gap, 0.5 * cell)
    rho = dmin - gap
    for _ in range(max_rounds):
        if rho <= 0:
            break
        box = Box.around(CF.base, rho).intersect(CF.structure.domain)
        if box_inside(CF, box, face_samples):
            return box
        rho *= 0.9
    raise ConstructionFailed("could not fit a box around the base point inside the calibrated set")


# ------------------------------------------------------------- verification


@dataclass(frozen=True)
class CalibrationReport:
    margin: float
    unit_error: float
    H_error: float
    param_error: float
    inversion_failures: int
    sample_count: int
    seed: int
    loop_etas: list
    loop_residuals: list  # per refinement level, max over loops
    loop_order: float  # fitted decay exponent (nan when below the floor)
    loop_constant: float  # residual / (perimeter * eta^2) at the finest level
    loops_used: int

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.__dict__.items()}


LOOP_FLOOR = 1e-12


def _loop_points(verts: np.ndarray, per_edge: int):
    """Nodes along each edge of a closed polyline; returns (points, weights-per-edge-vector)."""
    pts, dirs = [], []
    nv = len(verts)
    for j in range(nv):
        a, b = verts[j], verts[(j + 1) % nv]
        s = np.linspace(0.0, 1.0, per_edge + 1)
        pts.append(a + s[:, None] * (b - a))
        dirs.append(np.broadcast_to(b - a, (per_edge + 1, len(a))))
    return np.concatenate(pts), np.concatenate(dirs)


def loop_integral(lam: np.ndarray, dirs: np.ndarray, per_edge: int, n_edges: int) -> float:
    """Trapezoidal integral of Lam along a closed polyline (values from _loop_points)."""
    vals = np.sum(lam * dirs, axis=1).reshape(n_edges, per_edge + 1)
    w = np.full(per_edge + 1, 1.0 / per_edge)
    w[[0, -1]] *= 0.5
    return float(np.sum(vals @ w))


def verify_calibration(CF: CalibrationField, sample_count: int = 10_000, seed: int = 0,
                       n_loops: int = 6, levels: int = 3) -> CalibrationReport:
    S = CF.structure
    n = CF.n
    rng = stream(seed, "verify_calibration")
    P = np.empty((sample_count, n))
    P[:, 0] = rng.uniform(-0.95 * CF.eps, 0.95 * CF.eps, sample_count)
    P[:, 1:] = rng.uniform(-0.95 * CF.uprime, 0.95 * CF.uprime, (sample_count, n - 1))
    X, _ = CF.forward(P)
    inv = CF.invert(X)
    good = inv.ok
    F = S.frame_matrix(X[good])
    h = np.einsum("ba,bai->bi", inv.lam[good], F)
    hn = np.linalg.norm(h, axis=1)
    margin = float(np.max(hn)) if hn.size else math.nan
    unit_error = float(np.max(np.abs(hn * hn - 1.0))) if hn.size else math.nan
    param_error = float(np.max(np.abs(inv.params[good] - P[good]))) if hn.size else math.nan

    # closed triangles inside W
    rl = stream(seed, "verify_calibration", "loops")
    Pc = np.empty((n_loops, n))
    Pc[:, 0] = rl.uniform(-0.5 * CF.eps, 0.5 * CF.eps, n_loops)
    Pc[:, 1:] = rl.uniform(-0.5 * CF.uprime, 0.5 * CF.uprime, (n_loops, n - 1))
    centers, _ = CF.forward(Pc)
    rho = 0.2 * min(CF.eps, CF.uprime) / max(1.0, float(np.linalg.norm(CF.chart.M, 2)))
    base_edges = 4
    levels_pts = []
    for li in range(n_loops):
        v = rl.normal(size=(3, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        verts = centers[li] + rho * v
        per_level = [_loop_points(verts, base_edges * 2 ** lv) for lv in range(levels)]
        perim = float(sum(np.linalg.norm(verts[(j + 1) % 3] - verts[j]) for j in range(3)))
        levels_pts.append((per_level, perim))
    chunks = [pp for per_level, _ in levels_pts for pp, _ in per_level]
    linv = CF.invert(np.concatenate(chunks)) if chunks else None
    residuals = np.full((levels, n_loops), np.nan)
    etas = np.zeros((levels, n_loops))
    offset = 0
    for li, (per_level, perim) in enumerate(levels_pts):
        for lv, (pp, dd) in enumerate(per_level):
            sl = slice(offset, offset + len(pp))
            offset += len(pp)
            if not np.all(linv.ok[sl]):
                continue
            per_edge = base_edges * 2 ** lv
            residuals[lv, li] = abs(loop_integral(linv.lam[sl], dd, per_edge, 3))
            etas[lv, li] = perim / (3 * per_edge)
    used = ~np.any(np.isnan(residuals), axis=0)
    res_levels = [float(np.max(residuals[lv, used])) if used.any() else math.nan for lv in range(levels)]
    eta_levels = [float(np.max(etas[lv, used])) if used.any() else math.nan for lv in range(levels)]
    order = math.nan
    const = math.nan
    if used.any() and res_levels[0] > LOOP_FLOOR and res_levels[-1] > 0:
        order = float(np.polyfit(np.log(eta_levels), np.log(res_levels), 1)[0])
        perims = np.array([levels_pts[i][1] for i in np.flatnonzero(used)])
        const = float(np.max(residuals[-1, used] / (perims * etas[-1, used] ** 2)))
    return CalibrationReport(
        margin=margin,
        unit_error=unit_error,
        H_error=unit_error,
        param_error=param_error,
        inversion_failures=int(np.sum(~good)),
        sample_count=sample_count,
        seed=seed,
        loop_etas=eta_levels,
        loop_residuals=res_levels,
        loop_order=order,
        loop_constant=const,
        loops_used=int(used.sum()),
    )


# ------------------------------------------------------------ geodesics


@dataclass(frozen=True)
class GeodesicCertificate:
    times: np.ndarray
    points: np.ndarray
    controls: np.ndarray
    length: float
    margin: float
    field: CalibrationField


def minimizing_geodesic_through(S: SRStructure, p, r: float, *, eps: float | None = None,
                                steps: int = 1000, margin_samples: int = 2000, seed: int = 0,
                                grid_resolution: int = 17) -> GeodesicCertificate:
    """Integral curve of Y through p on [-r, r], calibrated hence length minimizing in W."""
    if eps is None:
        eps = max(1.5 * r, _default_eps(S))
    CF = build_calibration(S, p, eps, grid_resolution)
    if CF.eps <= r:
        raise ConstructionFailed(f"calibration at {np.asarray(p).tolist()} only reaches eps={CF.eps:g} <= r={r:g}")
    lam0 = CF.chart.covector_to_chart(seed_covector(S, CF.chart, np.zeros((1, S.n - 1))))[0]
    st0 = ham.CotangentState(CF.base, lam0)
    fwd = ham.integrate_extremal(S, st0, r, steps)
    bwd = ham.integrate_extremal(S, st0, -r, steps)
    if fwd.status != "ok" or bwd.status != "ok":
        raise ConstructionFailed("geodesic leaves the domain")
    times = np.concatenate([bwd.times[::-1], fwd.times[1:]])
    pts = np.concatenate([bwd.q[::-1], fwd.q[1:]])
    lams = np.concatenate([bwd.lam[::-1], fwd.lam[1:]])
    h = ham.controls(S, pts, lams)
    hn = np.linalg.norm(h, axis=1)
    length = float(np.trapezoid(hn, times))
    report = verify_calibration(CF, margin_samples, seed, n_loops=0)
    return GeodesicCertificate(times, pts, h, length, max(1.0, report.margin), CF)


# ----------------------------------------------------------------- file io


def calibration_to_json(CF: CalibrationField) -> dict:
    if not CF.structure.definition:
        raise ValueError("structure has no serializable definition")
    return {
        "kind": "calibration",
        "format": 1,
        "structure": CF.structure.definition,
        "base": CF.chart.base.tolist(),
        "M": CF.chart.M.tolist(),
        "Minv": CF.chart.Minv.tolist(),
        "rotation": CF.chart.rotation.tolist(),
        "eps": CF.eps,
        "uprime": CF.uprime,
        "t_grid": CF.t_grid.tolist(),
        "x_grid": CF.x_grid.tolist(),
        "Q_table": CF.Q_table.tolist(),
        "Lam_table": CF.Lam_table.tolist(),
        "settings": {
            "steps": CF.steps,
            "newton_tol": CF.newton_tol,
            "newton_maxit": CF.newton_maxit,
            "jac_lower_bound": CF.jac_lower_bound,
            "h_target": CF.h_target,
        },
        "build_log": list(CF.build_log),
    }


def calibration_from_json(doc: dict) -> CalibrationField:
    try:
        if doc.get("kind") != "calibration":
            raise KeyError("kind")
        S = structure_from_document(doc["structure"])
        chart = AdaptedChart(np.array(doc["base"], dtype=float), np.array(doc["M"], dtype=float),
                             np.array(doc["Minv"], dtype=float), np.array(doc["rotation"], dtype=float))
        st = doc["settings"]
        CF = CalibrationField(
            S, chart, float(doc["eps"]), float(doc["uprime"]),
            np.array(doc["t_grid"], dtype=float), np.array(doc["x_grid"], dtype=float),
            np.array(doc["Q_table"], dtype=float), np.array(doc["Lam_table"], dtype=float),
            int(st["steps"]), newton_tol=float(st["newton_tol"]), newton_maxit=int(st["newton_maxit"]),
            jac_lower_bound=float(st["jac_lower_bound"]), h_target=float(st["h_target"]),
            build_log=tuple(doc.get("build_log", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StructureDefinitionError(f"invalid calibration document: {exc}") from None
    expect = (len(CF.t_grid),) + (len(CF.x_grid),) * (S.n - 1) + (S.n,)
    if CF.Q_table.shape != expect or CF.Lam_table.shape != expect:
        raise StructureDefinitionError("invalid calibration document: table shape mismatch")
    return CF


def save_calibration(CF: CalibrationField, path) -> None:
    Path(path).write_text(json.dumps(calibration_to_json(CF)), encoding="utf-8")


def load_calibration(path) -> CalibrationField:
    return calibration_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
