"""Quasi-calibrations for C0 Carnot-Caratheodory structures.

At a base point p with frame matrix A = A(p):

* hbar is the minimal-norm preimage of the pivot field X_pivot(p);
* lam is the covector on R^m with <lam, hbar> = |hbar| and lam = 0 on hbar-perp,
  i.e. lam = hbar / |hbar|; it vanishes on ker A because hbar is orthogonal to it;
* omega is the constant covector on R^n with omega o A = lam, taken in the column
  space of A.  It is exact, with potential <omega, x>.

On a box U around p two slacks are measured,

    eps1 = max_q |omega o A(q)| - 1          (operator norm, exact per q)
    eps2 = 1 - min_q <omega, A(q) hbar/|hbar|>,

and U is shrunk until eps1 <= target and eps2 <= target^2.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NotHorizontal, PointOutsideDomain, ShrinkExhausted, StructureDefinitionError, ZeroFrame
from .rng import stream
from .structures import Box, SRStructure, sample_points, structure_from_document

SVD_RCOND = 1e-10
MAX_BISECTION_ROUNDS = 40


def minimal_norm_preimage(S: SRStructure, p, v) -> np.ndarray:
    """Least-norm h with sum_j h_j X_j(p) = v (truncated SVD, relative threshold 1e-10)."""
    p = S.check_point(p)
    return _min_norm(S.frame_matrix(p), np.asarray(v, dtype=float))


def _min_norm(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > SVD_RCOND * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    coef = (U[:, keep].T @ v) / s[keep]
    h = Vt[keep].T @ coef
    if np.linalg.norm(A @ h - v) > 1e-8 * (1.0 + np.linalg.norm(v)):
        raise NotHorizontal(f"vector {v.tolist()} is not in the span of the frame")
    return h


def min_norm_controls(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched least-norm controls via the pseudoinverse (no residual check)."""
    return np.einsum("...ia,...a->...i", np.linalg.pinv(A, rcond=SVD_RCOND), v)


@dataclass(frozen=True, eq=False)
class QuasiCalibration:
    structure: SRStructure
    p: np.ndarray
    pivot: int  # 0-based index of X_pivot
    hbar: np.ndarray
    omega: np.ndarray
    U: Box
    eps1: float
    eps2: float
    target_eps: float
    sample_count: int
    seed: int

    @property
    def lam(self) -> np.ndarray:
        return self.hbar / np.linalg.norm(self.hbar)

    @property
    def direction(self) -> np.ndarray:
        """Unit control hbar/|hbar| driving the quasi-calibrated curves."""
        return self.lam

    def potential(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.omega

    def to_json(self) -> dict:
        if not self.structure.definition:
            raise ValueError("structure has no serializable definition")
        return {
            "kind": "quasicalibration",
            "format": 1,
            "structure": self.structure.definition,
            "p": self.p.tolist(),
            "pivot": self.pivot,
            "hbar": self.hbar.tolist(),
            "omega": self.omega.tolist(),
            "U": self.U.to_json(),
            "eps1": self.eps1,
            "eps2": self.eps2,
            "target_eps": self.target_eps,
            "seed": self.seed,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "QuasiCalibration":
        try:
            if doc.get("kind") != "quasicalibration":
                raise KeyError("kind")
            return cls(
                structure_from_document(doc["structure"]),
                np.array(doc["p"], dtype=float), int(doc["pivot"]),
                np.array(doc["hbar"], dtype=float), np.array(doc["omega"], dtype=float),
                Box.from_json(doc["U"]), float(doc["eps1"]), float(doc["eps2"]),
                float(doc["target_eps"]), int(doc["sample_count"]), int(doc["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise StructureDefinitionError(f"invalid quasi-calibration document: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "QuasiCalibration":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def measure_quasicalibration_bounds(QC: QuasiCalibration, S: SRStructure, U_test: Box,
                                    sample_count: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Slacks (eps1, eps2) on a box; only q is sampled, the h-maximization is exact."""
    if not (np.all(U_test.lo >= S.domain.lo) and np.all(U_test.hi <= S.domain.hi)):
        raise PointOutsideDomain("test box is not contained in the domain")
    pts = sample_points(U_test, sample_count, seed)
    A = S.frame_matrix(pts)
    pulled = np.einsum("a,bai->bi", QC.omega, A)  # omega o A(q)
    eps1 = max(0.0, float(np.max(np.linalg.norm(pulled, axis=1))) - 1.0)
    eps2 = max(0.0, 1.0 - float(np.min(pulled @ QC.direction)))
    return eps1, eps2


def lambda_kernel_defect(QC: QuasiCalibration, count: int = 100, seed: int = 0) -> float:
    """max |<lam, k>| / |k| over random null-space vectors k of A(p) (0 when ker A = 0)."""
    A = QC.structure.frame_matrix(QC.p)
    _, s, Vt = np.linalg.svd(A)
    rank = int(np.sum(s > SVD_RCOND * s[0]))
    N = Vt[rank:].T
    if N.shape[1] == 0:
        return 0.0
    k = N @ stream(seed, "kernel").normal(size=(N.shape[1], count))
    return float(np.max(np.abs(QC.lam @ k) / np.linalg.norm(k, axis=0)))


def build_quasicalibration(S: SRStructure, p, target_eps: float, *, sample_count: int = 2000,
                           seed: int = 0) -> QuasiCalibration:
    if not 0.0 < target_eps < 1.0:
        raise ValueError("target_eps must lie in (0, 1)")
    p = S.check_point(p)
    A = S.frame_matrix(p)
    norms = np.linalg.norm(A, axis=0)
    if np.all(norms == 0.0):
        raise ZeroFrame(f"every frame vector vanishes at {p.tolist()}")
    pivot = int(np.argmax(norms))
    hbar = _min_norm(A, A[:, pivot])
    lam = hbar / np.linalg.norm(hbar)
    omega = np.linalg.pinv(A.T, rcond=SVD_RCOND) @ lam

    def slacks(box):
        qc = QuasiCalibration(S, p, pivot, hbar, omega, box, 0.0, 0.0, target_eps, sample_count, seed)
        return measure_quasicalibration_bounds(qc, S, box, sample_count, seed)

    def good(e):
        return e[0] <= target_eps and e[1] <= target_eps ** 2

    full = S.domain
    e = slacks(full)
    rounds = 0
    if not good(e):
        # geometric halving to a passing half-width, then log-scale bisection
        hi = float(np.max(np.maximum(p - full.lo, full.hi - p)))
        lo = None
        while rounds < MAX_BISECTION_ROUNDS:
            rounds += 1
            rho = hi * 0.5
            box = Box.around(p, rho).intersect(full)
            e_try = slacks(box)
            if good(e_try):
                lo, e = rho, e_try
                break
            hi = rho
        if lo is None:
            raise ShrinkExhausted(f"slacks still above target after {MAX_BISECTION_ROUNDS} rounds")
        while rounds < MAX_BISECTION_ROUNDS and hi / lo > 1.01:
            rounds += 1
            mid = math.sqrt(lo * hi)
            e_try = slacks(Box.around(p, mid).intersect(full))
            if good(e_try):
                lo, e = mid, e_try
            else:
                hi = mid
        full = Box.around(p, lo).intersect(full)
    return QuasiCalibration(S, p, pivot, hbar, omega, full, e[0], e[1], target_eps, sample_count, seed)


@dataclass(frozen=True)
class QuasiCurve:
    times: np.ndarray
    points: np.ndarray
    control: np.ndarray  # constant unit control hbar/|hbar|
    status: str


def quasicalibrated_flow(QC: QuasiCalibration, S: SRStructure, q, r: float, steps: int = 400) -> QuasiCurve:
    """Curve through q with velocity sum_j (hbar_j/|hbar|) X_j, on [-r, r] (RK4, fixed step).

    Truncated at the last in-domain node if the domain is left.
    """
    q = S.check_point(q)
    u = QC.direction

    def f(x):
        return S.frame_matrix(x) @ u

    def run(T):
        h = T / steps
        x = q.copy()
        out = [x]
        for _ in range(steps):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not S.domain.contains(x):
                return np.array(out), "boundary_hit"
            out.append(x)
        return np.array(out), "ok"

    fwd, s1 = run(r)
    bwd, s2 = run(-r)
    h = r / steps
    pts = np.concatenate([bwd[::-1], fwd[1:]])
    times = np.concatenate([-h * np.arange(len(bwd))[::-1], h * np.arange(1, len(fwd))])
    status = "ok" if s1 == s2 == "ok" else "boundary_hit"
    return QuasiCurve(times, pts, u, status)
