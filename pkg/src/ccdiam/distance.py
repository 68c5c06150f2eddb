"""Carnot-Caratheodory distance estimates.

Upper bounds come from explicit admissible curves (a penalized energy
minimization over piecewise-constant controls, and a lattice Dijkstra oracle).
Lower bounds come from calibrations: the potential of an exact 1-form that is
at most |v| on unit horizontal vectors can only grow by the length of a curve.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import hamiltonian as ham
from .calibration import CalibrationField, OutsideCalibratedSet
from .errors import CapExceeded, NotAdmissible
from .quasicalib import min_norm_controls
from .rng import stream
from .structures import C11, Box, SRStructure, sample_points

ENDPOINT_TOL = 1e-6
ADMISSIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class AdmissibleCurvePath:
    times: np.ndarray  # (N+1,)
    points: np.ndarray  # (N+1, n)
    controls: np.ndarray  # (N, m), constant on each interval


@dataclass(frozen=True)
class DistanceEstimate:
    upper: float  # math.inf when no feasible curve was found
    lower: float
    status: str  # finite | infty_suspect | infty_certified
    method: str
    witness_path: AdmissibleCurvePath | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self, pair=None) -> dict:
        def num(v):
            return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v

        return {
            "pair": pair,
            "upper": num(self.upper),
            "lower": num(self.lower),
            "status": self.status,
            "method": self.method,
            "diagnostics": self.diagnostics,
        }


# ------------------------------------------------------------ control flows


def _f(S, x, u):
    return np.einsum("...ai,...i->...a", S.frame_matrix(x), u)


def control_step(S: SRStructure, x, u, dt: float):
    """One RK4 step of x' = sum_j u_j X_j(x) with constant control u (batched)."""
    k1 = _f(S, x, u)
    k2 = _f(S, x + 0.5 * dt * k1, u)
    k3 = _f(S, x + 0.5 * dt * k2, u)
    k4 = _f(S, x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def path_from_controls(S: SRStructure, p, controls, horizon: float = 1.0) -> AdmissibleCurvePath:
    controls = np.asarray(controls, dtype=float)
    N = len(controls)
    dt = horizon / N
    pts = [np.asarray(p, dtype=float)]
    for u in controls:
        pts.append(control_step(S, pts[-1], u, dt))
    return AdmissibleCurvePath(np.linspace(0.0, horizon, N + 1), np.array(pts), controls)


def curve_length(S: SRStructure, path: AdmissibleCurvePath) -> float:
    """Sum over intervals of |h_min| dt, h_min the least-norm control of the node velocity."""
    dts = np.diff(path.times)
    pred = control_step(S, path.points[:-1], path.controls, dts[:, None])
    err = np.linalg.norm(path.points[1:] - pred, axis=1)
    if np.any(err > ADMISSIBILITY_TOL * (1.0 + np.linalg.norm(path.points[1:], axis=1))):
        raise NotAdmissible(f"path violates discrete admissibility by {err.max():.3g}")
    A = S.frame_matrix(path.points[:-1])
    v = np.einsum("kai,ki->ka", A, path.controls)
    h = min_norm_controls(A, v)
    return float(np.sum(np.linalg.norm(h, axis=1) * dts))


# ------------------------------------------------------ discrete adjoint


def _stage(S, x, u):
    A = S.frame_matrix(x)
    J = S.frame_jacobian(x)
    return np.einsum("rai,ri->ra", A, u), np.einsum("raic,ri->rac", J, u), A


def _step_with_jacobians(S, x, u, dt):
    """RK4 step for a batch (R, n) with derivatives d x_next / d x and d x_next / d u."""
    n = x.shape[1]
    eye = np.eye(n)
    f1, F1, A1 = _stage(S, x, u)
    K1x, K1u = F1, A1
    f2, F2, A2 = _stage(S, x + 0.5 * dt * f1, u)
    K2x = F2 @ (eye + 0.5 * dt * K1x)
    K2u = F2 @ (0.5 * dt * K1u) + A2
    f3, F3, A3 = _stage(S, x + 0.5 * dt * f2, u)
    K3x = F3 @ (eye + 0.5 * dt * K2x)
    K3u = F3 @ (0.5 * dt * K2u) + A3
    f4, F4, A4 = _stage(S, x + dt * f3, u)
    K4x = F4 @ (eye + dt * K3x)
    K4u = F4 @ (dt * K3u) + A4
    xn = x + (dt / 6.0) * (f1 + 2 * f2 + 2 * f3 + f4)
    Jx = eye + (dt / 6.0) * (K1x + 2 * K2x + 2 * K3x + K4x)
    Ju = (dt / 6.0) * (K1u + 2 * K2u + 2 * K3u + K4u)
    return xn, Jx, Ju


def penalized_objective(S: SRStructure, p, q, U, mu, nu):
    """Value and gradient of sum_r [E_r + nu_r . res_r + mu_r |res_r|^2] for controls U (R, N, m).

    E = 1/2 sum_k |u_k|^2 dt with horizon 1; the gradient comes from a backward
    (adjoint) sweep through the RK4 steps.
    """
    R, N, m = U.shape
    dt = 1.0 / N
    x = np.broadcast_to(np.asarray(p, dtype=float), (R, len(p))).copy()
    Jxs, Jus = [], []
    for k in range(N):
        x, Jx, Ju = _step_with_jacobians(S, x, U[:, k], dt)
        Jxs.append(Jx)
        Jus.append(Ju)
    res = x - q
    energy = 0.5 * dt * np.sum(U * U, axis=(1, 2))
    val = energy + np.sum(nu * res, axis=1) + mu * np.sum(res * res, axis=1)
    a = nu + 2.0 * mu[:, None] * res
    grad = dt * U.copy()
    for k in range(N - 1, -1, -1):
        grad[:, k] += np.einsum("ra,rai->ri", a, Jus[k])
        a = np.einsum("ra,rac->rc", a, Jxs[k])
    return val, grad, res, energy


def endpoint_jacobian(S: SRStructure, p, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint x_N of controls U (N, m) and its Jacobian d x_N / d U, shape (n, N*m)."""
    N, m = U.shape
    x = np.asarray(p, dtype=float)[None].copy()
    Jxs, Jus = [], []
    for k in range(N):
        x, Jx, Ju = _step_with_jacobians(S, x, U[None, k], 1.0 / N)
        Jxs.append(Jx[0])
        Jus.append(Ju[0])
    A = np.eye(S.n)
    G = np.empty((S.n, N, m))
    for k in range(N - 1, -1, -1):
        G[:, k] = A @ Jus[k]
        A = A @ Jxs[k]
    return x[0], G.reshape(S.n, N * m)


def polish_endpoint(S: SRStructure, p, q, U: np.ndarray, max_iter: int = 12) -> tuple[np.ndarray, float]:
    """Least-norm Gauss-Newton corrections of U until the endpoint hits q to roundoff."""
    U = U.copy()
    tol = 1e-13 * (1.0 + float(np.linalg.norm(q)))
    best = (U.copy(), math.inf)
    for _ in range(max_iter):
        x, J = endpoint_jacobian(S, p, U)
        r = q - x
        rn = float(np.linalg.norm(r))
        if rn < best[1]:
            best = (U.copy(), rn)
        if rn <= tol or not np.isfinite(rn):
            break
        U = U + (np.linalg.pinv(J, rcond=1e-12) @ r).reshape(U.shape)
    return best


def _endpoint(S, p, U):
    x = np.broadcast_to(np.asarray(p, dtype=float), (U.shape[0], len(p))).copy()
    for k in range(U.shape[1]):
        x = control_step(S, x, U[:, k], 1.0 / U.shape[1])
    return x


def _shooting_seed(S: SRStructure, p, q, N: int, rng, samples: int = 64) -> np.ndarray | None:
    """Controls of the normal extremal (over a covector sample) passing closest to q."""
    if S.regularity != C11:
        return None
    n = S.n
    d = q - p
    chord = np.linalg.norm(d)
    A = S.frame_matrix(p)
    cov = [A @ min_norm_controls(A, d)] if chord > 0 else []
    cov += list(np.eye(n)) + list(-np.eye(n)) + list(rng.normal(size=(samples, n)))
    cov = np.array(cov)
    H = ham.hamiltonian_values(S, np.broadcast_to(p, cov.shape), cov)
    cov = cov[H > 1e-12]
    if len(cov) == 0:
        return None
    lam = ham.unit_covectors(S, np.broadcast_to(p, cov.shape), cov)
    Tmax = 4.0 * max(chord, math.sqrt(chord), 1e-3)
    steps = 200
    hstep = Tmax / steps
    x = np.broadcast_to(p, lam.shape).copy()
    best = (np.linalg.norm(x - q, axis=1), np.zeros(len(lam)))
    for k in range(1, steps + 1):
        x, lam = ham._rk4(S, x, lam, hstep)
        dist = np.linalg.norm(x - q, axis=1)
        better = dist < best[0]
        best[0][better] = dist[better]
        best[1][better] = k * hstep
    i = int(np.argmin(best[0]))
    tstar = best[1][i]
    if tstar == 0:
        return None
    lam0 = ham.unit_covectors(S, np.broadcast_to(p, cov.shape), cov)[i]
    traj = ham.integrate_extremal(S, ham.CotangentState(p, lam0), tstar, 2 * N)
    if len(traj.q) < 2 * N + 1:
        return None
    h = ham.extremal_controls(S, traj)[1::2]
    return tstar * h


def distance_upper(S: SRStructure, p, q, *, segments: int = 32, restarts: int = 3, seed: int = 0,
                   max_escalations: int = 8, inner_maxiter: int = 400) -> DistanceEstimate:
    """Upper bound on d(p, q) from the best feasible energy minimizer.

    Augmented endpoint penalty: E + nu.res + mu |res|^2 with multiplier updates,
    mu escalated x10 (at most ``max_escalations`` times) whenever the residual
    fails to shrink by 4x.  Length = sqrt(2 E), which bounds the curve's length
    from above by Cauchy-Schwarz.
    """
    p = S.check_point(p)
    q = S.check_point(q)
    n, m, N = S.n, S.m, segments
    rng = stream(seed, "distance_upper")
    seeds = []
    shoot = _shooting_seed(S, p, q, N, stream(seed, "distance_upper", "shoot"))
    if shoot is not None:
        seeds.append(shoot)
    A = S.frame_matrix(p)
    seeds.append(np.broadcast_to(min_norm_controls(A, q - p), (N, m)).copy())
    scale = max(np.linalg.norm(q - p), 1e-3)
    for _ in range(restarts):
        seeds.append(scale * rng.normal(size=(N, m)))
    U = np.array(seeds)
    R = len(U)
    # the penalty must dominate the energy of short loops, whose squared length scales like |q - p|
    mu = np.full(R, 10.0 * max(1.0, 1.0 / scale ** 2))
    nu = np.zeros((R, n))
    escal = np.zeros(R, dtype=int)
    prev = np.full(R, np.inf)
    evals = 0
    gnorm = math.nan
    for outer in range(40):
        def fun(z):
            nonlocal evals
            evals += 1
            v, g, _, _ = penalized_objective(S, p, q, z.reshape(R, N, m), mu, nu)
            return float(np.sum(v)), g.ravel()

        sol = minimize(fun, U.ravel(), jac=True, method="L-BFGS-B",
                       options={"maxiter": inner_maxiter, "gtol": 1e-10, "ftol": 1e-15})
        U = sol.x.reshape(R, N, m)
        _, g, res, _ = penalized_objective(S, p, q, U, mu, nu)
        gnorm = float(np.linalg.norm(g))
        rn = np.linalg.norm(res, axis=1)
        if np.all((rn <= ENDPOINT_TOL) | (escal >= max_escalations)):
            break
        nu = nu + 2.0 * mu[:, None] * res
        # U = 0 is a critical point when q - p is not horizontal at p; kick such restarts off it
        stuck = (np.abs(U).max(axis=(1, 2)) < 1e-8) & (rn > ENDPOINT_TOL)
        if stuck.any():
            U[stuck] = scale * rng.normal(size=(int(stuck.sum()), N, m))
        stall = (rn > 0.25 * prev) & (rn > ENDPOINT_TOL) & (escal < max_escalations)
        mu[stall] *= 10.0
        escal[stall] += 1
        prev = rn
    x_end = _endpoint(S, p, U)
    rn = np.linalg.norm(x_end - q, axis=1)
    for i in np.flatnonzero(rn <= 1e-3):
        U[i], rn[i] = polish_endpoint(S, p, q, U[i])
    energy = 0.5 / N * np.sum(U * U, axis=(1, 2))
    feasible = rn <= ENDPOINT_TOL
    diag = {
        "restarts": R,
        "outer_iterations": outer + 1,
        "evaluations": evals,
        "gradient_norm": gnorm,
        "residuals": rn.tolist(),
        "mu": mu.tolist(),
        "shooting_seed": shoot is not None,
    }
    if not feasible.any():
        return DistanceEstimate(math.inf, 0.0, "infty_suspect", "optimizer", None, diag)
    # deterministic tie-break by restart index
    best = int(np.flatnonzero(feasible)[np.argmin(energy[feasible])])
    path = path_from_controls(S, p, U[best])
    diag["best_restart"] = best
    diag["witness_length"] = curve_length(S, path)
    return DistanceEstimate(float(math.sqrt(2.0 * energy[best])), 0.0, "finite", "optimizer", path, diag)


# -------------------------------------------------------------- lattice oracle


def distance_oracle_graph(S: SRStructure, p, q, step: float, radius_cap: float, *, kappa: float = 0.5,
                          max_vertices: int = 400_000) -> float:
    """Dijkstra on a lattice of spacing kappa*step; returns math.inf if unreachable within the cap.

    Edges are one RK4 step of +-X_i of parameter length ``step`` from each
    vertex, snapped to the nearest lattice point, weighted by step times the
    norm of the least-norm control of the move.  CapExceeded is raised when the
    vertex budget runs out before the search settles.
    """
    p = S.check_point(p)
    q = S.check_point(q)
    a = kappa * step
    target = tuple(np.rint((q - p) / a).astype(int))
    m = S.m
    moves = np.vstack([np.eye(m), -np.eye(m)])
    dist = {(0,) * S.n: 0.0}
    heap = [(0.0, (0,) * S.n)]
    settled = set()
    while heap:
        d, key = heapq.heappop(heap)
        if key in settled:
            continue
        if key == target:
            return d
        settled.add(key)
        if len(settled) > max_vertices:
            raise CapExceeded(f"oracle explored more than {max_vertices} vertices")
        x = p + a * np.array(key)
        xs = np.broadcast_to(x, (2 * m, S.n))
        nxt = control_step(S, xs, moves, step)
        A = S.frame_matrix(xs)
        v = np.einsum("kai,ki->ka", A, moves)
        w = step * np.linalg.norm(min_norm_controls(A, v), axis=1)
        for j in range(2 * m):
            if not (S.domain.contains(nxt[j]) and np.linalg.norm(nxt[j] - p) <= radius_cap):
                continue
            k2 = tuple(np.rint((nxt[j] - p) / a).astype(int))
            if k2 == key or k2 in settled:
                continue
            nd = d + w[j]
            if nd < dist.get(k2, math.inf):
                dist[k2] = nd
                heapq.heappush(heap, (nd, k2))
    return math.inf


# ------------------------------------------------------- calibration bounds


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class PotentialValue:
    value: float
    quad_error: float
    path_error: float  # |difference| with a second path (nan if unavailable)


def _rule(verts: np.ndarray, panels: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes on a polyline and weights times edge vectors."""
    pts, wd = [], []
    edges = np.linspace(0.0, 1.0, panels + 1)
    s = (0.5 * (edges[:-1] + edges[1:])[:, None] + 0.5 * np.diff(edges)[:, None] * _GL_X).ravel()
    w = (0.5 * np.diff(edges)[:, None] * _GL_W).ravel()
    for a, b in zip(verts[:-1], verts[1:]):
        pts.append(a + s[:, None] * (b - a))
        wd.append(w[:, None] * (b - a))
    return np.concatenate(pts), np.concatenate(wd)


def _integrate_rules(CF: CalibrationField, rules: list) -> list:
    """Integrals of Lam for several rules with one batched inversion; None where W is left."""
    pts = np.concatenate([r[0] for r in rules])
    inv = CF.invert(pts)
    out, off = [], 0
    for p_, wd in rules:
        sl = slice(off, off + len(p_))
        off += len(p_)
        out.append(float(np.sum(inv.lam[sl] * wd)) if np.all(inv.ok[sl]) else None)
    return out


def _offset_midpoint(base, x, frac):
    d = x - base
    k = int(np.argmin(np.abs(d)))
    w = np.zeros_like(d)
    w[k] = 1.0
    w -= (w @ d) / (d @ d) * d
    nw = np.linalg.norm(w)
    if nw == 0:
        return None
    return base + 0.5 * d + frac * np.linalg.norm(d) * w / nw


def calibration_potentials(CF: CalibrationField, X, *, tol: float = 1e-13, max_panels: int = 64) -> list:
    """phi at each row of X: integral of Lam along the segment from the base point (batched).

    Panels double until two successive values agree to ``tol`` (relative);
    the path-independence check uses a polyline through an offset midpoint.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    base = CF.base
    verts = [np.array([base, x]) for x in X]
    alts = []
    for x in X:
        if np.linalg.norm(x - base) == 0:
            alts.append([])
            continue
        alts.append([np.array([base, m, x]) for f in (0.1, 0.03)
                     if (m := _offset_midpoint(base, x, f)) is not None])
    live = [i for i in range(len(X)) if np.linalg.norm(X[i] - base) > 0]
    rules, tags = [], []
    for i in live:
        rules += [_rule(verts[i], 2), _rule(verts[i], 4)]
        tags += [(i, "c"), (i, "f")]
        for j, av in enumerate(alts[i]):
            rules.append(_rule(av, 4))
            tags.append((i, f"a{j}"))
    vals = dict(zip(tags, _integrate_rules(CF, rules))) if rules else {}
    for i in live:
        if vals[(i, "f")] is None:
            raise OutsideCalibratedSet(f"segment to {X[i].tolist()} leaves the calibrated set")
    panels = 4
    cur = {i: vals[(i, "f")] for i in live}
    err = {i: abs(vals[(i, "f")] - vals[(i, "c")]) for i in live}
    todo = [i for i in live if err[i] > tol * (1.0 + abs(cur[i]))]
    while todo and panels < max_panels:
        panels *= 2
        res = _integrate_rules(CF, [_rule(verts[i], panels) for i in todo])
        nxt = []
        for i, v in zip(todo, res):
            err[i] = abs(v - cur[i])
            cur[i] = v
            if err[i] > tol * (1.0 + abs(v)):
                nxt.append(i)
        todo = nxt
    out = []
    for i in range(len(X)):
        if i not in cur:
            out.append(PotentialValue(0.0, 0.0, 0.0))
            continue
        alt = next((vals[(i, f"a{j}")] for j in range(len(alts[i])) if vals[(i, f"a{j}")] is not None), None)
        out.append(PotentialValue(cur[i], err[i], math.nan if alt is None else abs(alt - cur[i])))
    return out


def calibration_potential(CF: CalibrationField, x) -> PotentialValue:
    """phi(x) = integral of Lam from the field's base point to x along the straight segment."""
    return calibration_potentials(CF, x)[0]


def distance_lower(CF: CalibrationField, p, q, margin: float = 1.0) -> float:
    """|phi(q) - phi(p)| / s: lower bound on the length of curves from p to q that stay in W."""
    s = max(1.0, float(margin))
    php, phq = calibration_potentials(CF, np.array([p, q], dtype=float))
    return max(0.0, abs(phq.value - php.value)) / s


def axis_speed_bounds(S: SRStructure, box: Box, sample_count: int = 2000, seed: int = 0) -> np.ndarray:
    """C_j = 1.05 * max over the box of |row j of the frame|: bound on |x_j'| per unit control."""
    pts = sample_points(box, sample_count, seed)
    rows = np.linalg.norm(S.frame_matrix(pts), axis=2)
    return 1.05 * np.max(rows, axis=0)


def _row_bounds(S: SRStructure, box: Box, sample_count: int, seed: int) -> np.ndarray:
    pts = sample_points(box, sample_count, seed)
    return 1.05 * np.max(np.linalg.norm(S.frame_matrix(pts), axis=2), axis=0)


def escape_length(S: SRStructure, x, contains, L_max: float, *, steps: int = 64, sample_count: int = 200,
                  seed: int = 0) -> float:
    """Lower bound on the length of any admissible curve from x that leaves a region.

    ``contains(box) -> bool`` tells whether a box lies in the region.  Half-widths
    a(L) of a box holding every curve of length L grow like a_j' = C_j(box), with
    C_j a bound on the j-th frame row over the box; the answer is the largest
    grid value of L whose box is contained.
    """
    x = np.asarray(x, dtype=float)
    dL = L_max / steps
    a = np.zeros(S.n)
    C = 1.05 * np.linalg.norm(S.frame_matrix(x), axis=1)
    boxes = []
    for _ in range(steps):
        grow = 2.0 * dL * np.maximum(C, 1e-12)
        while True:
            outer = Box(x - a - grow, x + a + grow)
            if not (np.all(outer.lo >= S.domain.lo) and np.all(outer.hi <= S.domain.hi)):
                C = None
                break
            C = _row_bounds(S, outer, sample_count, seed)
            if np.all(dL * C <= grow):
                break
            grow = 2.0 * dL * C
        if C is None:
            break
        a = a + dL * C
        boxes.append(Box(x - a, x + a))
    lo, hi = -1, len(boxes)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if contains(boxes[mid]):
            lo = mid
        else:
            hi = mid
    return (lo + 1) * dL


def box_in_box(inner: Box, outer: Box) -> bool:
    return bool(np.all(inner.lo >= outer.lo) and np.all(inner.hi <= outer.hi))


def chart_lower_bound(S: SRStructure, p, q, sample_count: int = 2000, seed: int = 0) -> float:
    """max_j |q_j - p_j| / C_j with C_j over the whole domain (curves never leave it)."""
    C = axis_speed_bounds(S, S.domain, sample_count, seed)
    d = np.abs(np.asarray(q, dtype=float) - np.asarray(p, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(C > 0, d / np.where(C > 0, C, 1.0), np.where(d > 0, math.inf, 0.0))
    return float(np.max(ratios))


def conserved_functionals(S: SRStructure, sample_count: int = 200, seed: int = 0) -> np.ndarray:
    """Rows c with <c, X_i(x)> = 0 at every sampled x: linear functionals constant along admissible curves."""
    pts = sample_points(S.domain, sample_count, seed)
    stack = S.frame_matrix(pts).transpose(1, 0, 2).reshape(S.n, -1)
    U, s, _ = np.linalg.svd(stack)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > 1e-10 * smax)) if smax > 0 else 0
    return U[:, rank:].T


def infinite_distance_certificate(S: SRStructure, p, q) -> np.ndarray | None:
    """A conserved functional separating p from q, if one exists."""
    C = conserved_functionals(S)
    if C.size == 0:
        return None
    gap = C @ (np.asarray(q, dtype=float) - np.asarray(p, dtype=float))
    i = int(np.argmax(np.abs(gap)))
    if abs(gap[i]) > 1e-9:
        return C[i]
    return None
