"""Sub-Riemannian Hamiltonian, its Hamiltonian system and normal extremals.

H(q, lam) = 1/2 * sum_i <lam, X_i(q)>^2.  The system

    q'   =  dH/dlam = sum_i h_i X_i(q)
    lam' = -dH/dq   = -sum_i h_i (DX_i(q))^T lam,        h_i = <lam, X_i(q)>

is integrated with classical fixed-step RK4.  All array routines accept a
leading batch axis; per-sample horizons are supported by integrating in
normalized time, which keeps a batch's results independent of its other
members.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteState, RegularityError
from .structures import C11, SRStructure

DRIFT_BOUND_ANALYTIC = 1e-9
DRIFT_BOUND_FD = 1e-6


@dataclass(frozen=True)
class CotangentState:
    q: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        if self.q.shape != self.lam.shape:
            raise ValueError("q and lam must have the same dimension")


@dataclass(frozen=True)
class ExtremalTrajectory:
    times: np.ndarray
    q: np.ndarray  # (N+1, n)
    lam: np.ndarray  # (N+1, n)
    H_values: np.ndarray
    step: float
    status: str  # "ok" or "boundary_hit"
    drift_bound: float

    @property
    def states(self) -> list[CotangentState]:
        return [CotangentState(a, b) for a, b in zip(self.q, self.lam)]

    @property
    def drift(self) -> float:
        return float(np.max(np.abs(self.H_values - self.H_values[0])))


def controls(S: SRStructure, q, lam) -> np.ndarray:
    """h_i = <lam, X_i(q)>, batched; shape (..., m)."""
    F = S.frame_matrix(q)
    return np.einsum("...a,...ai->...i", np.asarray(lam, dtype=float), F)


def hamiltonian_values(S: SRStructure, q, lam) -> np.ndarray:
    h = controls(S, q, lam)
    return 0.5 * np.sum(h * h, axis=-1)


def hamiltonian(S: SRStructure, st: CotangentState) -> float:
    S.check_point(st.q)
    return float(hamiltonian_values(S, st.q, st.lam))


def hamiltonian_rhs(S: SRStructure, q: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    F = S.frame_matrix(q)
    h = np.matmul(lam[..., None, :], F)[..., 0, :]
    qdot = np.matmul(F, h[..., None])[..., 0]
    # K[a, c] = sum_i h_i dX_i^a/dx_c
    K = np.sum(S.frame_jacobian(q) * h[..., None, :, None], axis=-2)
    lamdot = -np.matmul(lam[..., None, :], K)[..., 0, :]
    return qdot, lamdot


def hamiltonian_vector_field(S: SRStructure, st: CotangentState) -> tuple[np.ndarray, np.ndarray]:
    S.check_point(st.q)
    return hamiltonian_rhs(S, st.q, st.lam)


def _rk4(S: SRStructure, q, lam, h):
    """One RK4 step; h is a scalar or an array broadcasting against q[..., :1]."""
    k1q, k1l = hamiltonian_rhs(S, q, lam)
    k2q, k2l = hamiltonian_rhs(S, q + 0.5 * h * k1q, lam + 0.5 * h * k1l)
    k3q, k3l = hamiltonian_rhs(S, q + 0.5 * h * k2q, lam + 0.5 * h * k2l)
    k4q, k4l = hamiltonian_rhs(S, q + h * k3q, lam + h * k3l)
    q = q + (h / 6.0) * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    lam = lam + (h / 6.0) * (k1l + 2.0 * k2l + 2.0 * k3l + k4l)
    return q, lam


def _require_c11(S: SRStructure):
    if S.regularity != C11:
        raise RegularityError(
            f"{S.name} is a C0 structure: the Hamiltonian flow needs C11 fields to be well posed")


def flow(S: SRStructure, q0, lam0, T, steps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched endpoint of the Hamiltonian flow.

    ``q0, lam0`` have shape (B, n), ``T`` is a scalar or (B,) array of horizons.
    Returns (q(T), lam(T), inside) where ``inside`` flags samples whose path
    stayed in the closed domain at every step.
    """
    _require_c11(S)
    q = np.array(q0, dtype=float)
    lam = np.array(lam0, dtype=float)
    h = (np.asarray(T, dtype=float) / steps)[..., None] if np.ndim(T) else float(T) / steps
    inside = S.domain.contains(q)
    for _ in range(steps):
        q, lam = _rk4(S, q, lam, h)
        inside &= S.domain.contains(q)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(lam))):
        raise NonFiniteState("non-finite state during flow integration")
    return q, lam, inside


def batch_drift(S: SRStructure, q0, lam0, T: float, steps: int) -> np.ndarray:
    """Per-sample max_k |H(t_k) - H(0)| for a batch of states (B, n), same RK4 steps as integrate_extremal."""
    _require_c11(S)
    q = np.array(q0, dtype=float)
    lam = np.array(lam0, dtype=float)
    H0 = hamiltonian_values(S, q, lam)
    worst = np.zeros_like(H0)
    h = float(T) / steps
    for _ in range(steps):
        q, lam = _rk4(S, q, lam, h)
        worst = np.maximum(worst, np.abs(hamiltonian_values(S, q, lam) - H0))
    if not np.all(np.isfinite(worst)):
        raise NonFiniteState("non-finite state during batched integration")
    return worst


def integrate_extremal(S: SRStructure, st0: CotangentState, T: float, steps: int) -> ExtremalTrajectory:
    """Fixed-step RK4 solution of the Hamiltonian system over [0, T] (T may be negative).

    The trajectory is truncated at the last in-domain node and flagged
    ``boundary_hit`` if q leaves the domain box.
    """
    _require_c11(S)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    q = S.check_point(st0.q).copy()
    lam = st0.lam.copy()
    h = float(T) / steps
    qs, lams = [q], [lam]
    status = "ok"
    for _ in range(steps):
        q, lam = _rk4(S, q, lam, h)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(lam))):
            raise NonFiniteState(f"non-finite state after t={h * len(qs):.6g}")
        if not S.domain.contains(q):
            status = "boundary_hit"
            break
        qs.append(q)
        lams.append(lam)
    qa, la = np.array(qs), np.array(lams)
    return ExtremalTrajectory(
        times=h * np.arange(len(qa)),
        q=qa,
        lam=la,
        H_values=hamiltonian_values(S, qa, la),
        step=h,
        status=status,
        drift_bound=DRIFT_BOUND_ANALYTIC if S.has_analytic_jacobian else DRIFT_BOUND_FD,
    )


def extremal_controls(S: SRStructure, traj: ExtremalTrajectory) -> np.ndarray:
    """Controls h_i(t_k) = <lam(t_k), X_i(q(t_k))>, shape (N+1, m)."""
    return controls(S, traj.q, traj.lam)


def trajectory_csv(traj: ExtremalTrajectory) -> str:
    n = traj.q.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"q{i + 1}" for i in range(n)] + [f"lam{i + 1}" for i in range(n)] + ["H"])
    for t, q, lam, H in zip(traj.times, traj.q, traj.lam, traj.H_values):
        w.writerow([f"{v:.17g}" for v in (t, *q, *lam, H)])
    return buf.getvalue()


def unit_covectors(S: SRStructure, q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Rescale covectors so that H(q, lam) = 1/2 (arclength normalization)."""
    H = hamiltonian_values(S, q, lam)
    return lam / np.sqrt(2.0 * H)[..., None]
