"""Sub-Riemannian and Carnot-Caratheodory structures given by vector-field frames.

A structure lives on one closed, axis-aligned box of R^n.  Its frame is a
vectorized callable ``x[..., n] -> F[..., n, m]`` whose column ``i`` is the
field X_i.  For C11 structures the frame is declared orthonormal, which fixes
the metric; for C0 structures lengths are measured through minimal-norm
controls instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import qmc

from . import expr
from .errors import PointOutsideDomain, StructureDefinitionError, UnknownStructure
from .rng import scramble_seed

C11 = "C11"
C0 = "C0"
RANK_TOL = 1e-9


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.hi < self.lo):
            raise ValueError("box needs matching bounds with lo <= hi")

    @classmethod
    def around(cls, center, half_width) -> "Box":
        c = np.asarray(center, dtype=float)
        hw = np.broadcast_to(np.asarray(half_width, dtype=float), c.shape)
        return cls(c - hw, c + hw)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_widths(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, x, rtol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        slack = rtol * np.maximum(1.0, np.abs(self.hi - self.lo))
        return np.all((x >= self.lo - slack) & (x <= self.hi + slack), axis=-1)

    def intersect(self, other: "Box") -> "Box":
        return Box(np.maximum(self.lo, other.lo), np.minimum(self.hi, other.hi))

    def boundary_distance(self, x) -> np.ndarray:
        """Euclidean distance from interior points to the box boundary, per axis."""
        x = np.asarray(x, dtype=float)
        return np.minimum(x - self.lo, self.hi - x)

    def to_json(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Box":
        return cls(np.array(d["min"], dtype=float), np.array(d["max"], dtype=float))


@dataclass(frozen=True)
class FrameField:
    """One field X_i of a frame, evaluable at single points."""

    index: int  # 1-based, as in X_1..X_m
    evaluate: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True, eq=False)
class SRStructure:
    name: str
    n: int
    m: int
    domain: Box
    regularity: str
    frame_fn: Callable[[np.ndarray], np.ndarray]
    jacobian_fn: Callable[[np.ndarray], np.ndarray] | None = None
    # JSON-able description sufficient to rebuild the structure from file
    definition: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regularity not in (C11, C0):
            raise ValueError(f"regularity must be C11 or C0, got {self.regularity!r}")
        if self.domain.dim != self.n:
            raise ValueError("domain dimension does not match n")
        if self.regularity == C11 and self.m > self.n:
            raise ValueError("C11 structures need m <= n")

    @property
    def has_analytic_jacobian(self) -> bool:
        return self.jacobian_fn is not None

    def frame_matrix(self, x) -> np.ndarray:
        """Frame at points x[..., n] without domain checks; shape (..., n, m)."""
        x = np.asarray(x, dtype=float)
        return self.frame_fn(x)

    def frame_jacobian(self, x) -> np.ndarray:
        """J[..., a, i, c] = d X_i^a / d x_c, analytic when available."""
        x = np.asarray(x, dtype=float)
        if self.jacobian_fn is not None:
            return self.jacobian_fn(x)
        return fd_jacobian(self.frame_fn, x)

    @property
    def frame(self) -> list[FrameField]:
        fields = []
        for i in range(self.m):
            ev = lambda p, i=i: self.frame_matrix(p)[..., i]
            jac = None
            if self.jacobian_fn is not None:
                jac = lambda p, i=i: self.frame_jacobian(p)[..., :, i, :]
            fields.append(FrameField(i + 1, ev, jac))
        return fields

    def with_regularity(self, tag: str) -> "SRStructure":
        return replace(self, regularity=tag, name=f"{self.name}[{tag}]")

    def scaled(self, c: float) -> "SRStructure":
        """Same fields multiplied by the constant c."""
        f, j = self.frame_fn, self.jacobian_fn
        return replace(
            self,
            name=f"{self.name}*{c:g}",
            frame_fn=lambda x: c * f(x),
            jacobian_fn=None if j is None else (lambda x: c * j(x)),
            definition={"scaled": c, "base": self.definition},
        )

    def check_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape[-1:] != (self.n,):
            raise PointOutsideDomain(f"point has dimension {p.shape[-1:]}, structure has n={self.n}")
        if not np.all(np.isfinite(p)):
            raise PointOutsideDomain("point has non-finite coordinates")
        if not np.all(self.domain.contains(p)):
            raise PointOutsideDomain(f"point {p.tolist()} outside domain of {self.name}")
        return p


def fd_jacobian(frame_fn, x: np.ndarray) -> np.ndarray:
    """Central finite differences with step 1e-5 * (1 + |x|)."""
    n = x.shape[-1]
    h = 1e-5 * (1.0 + np.linalg.norm(x, axis=-1))
    cols = []
    for c in range(n):
        dx = np.zeros_like(x)
        dx[..., c] = h
        d = (frame_fn(x + dx) - frame_fn(x - dx)) / (2.0 * h[..., None, None])
        cols.append(d)
    return np.stack(cols, axis=-1)


def evaluate_frame(S: SRStructure, p) -> np.ndarray:
    """n x m matrix whose column i is X_i(p)."""
    p = S.check_point(p)
    return S.frame_matrix(p)


def frame_rank(S: SRStructure, p, tol: float = RANK_TOL) -> int:
    F = evaluate_frame(S, p)
    return _rank(F, tol)


def _rank(F: np.ndarray, tol: float) -> int:
    s = np.linalg.svd(F, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


# ---------------------------------------------------------------- built-ins


def _stack_frame(*cols):
    return np.stack([np.stack(c, axis=-1) for c in cols], axis=-1)


def _euclidean(n: int) -> SRStructure:
    def frame(x):
        return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()

    def jac(x):
        return np.zeros(x.shape[:-1] + (n, n, n))

    return SRStructure(f"euclidean{n}", n, n, Box.around(np.zeros(n), 20.0), C11, frame, jac,
                       {"builtin": f"euclidean{n}"})


def _heisenberg() -> SRStructure:
    def frame(x):
        o, z = np.ones(x.shape[:-1]), np.zeros(x.shape[:-1])
        return _stack_frame((o, z, -0.5 * x[..., 1]), (z, o, 0.5 * x[..., 0]))

    def jac(x):
        J = np.zeros(x.shape[:-1] + (3, 2, 3))
        J[..., 2, 0, 1] = -0.5
        J[..., 2, 1, 0] = 0.5
        return J

    return SRStructure("heisenberg", 3, 2, Box.around(np.zeros(3), 4.0), C11, frame, jac,
                       {"builtin": "heisenberg"})


def _martinet() -> SRStructure:
    def frame(x):
        o, z = np.ones(x.shape[:-1]), np.zeros(x.shape[:-1])
        return _stack_frame((o, z, z), (z, o, x[..., 0] ** 2))

    def jac(x):
        J = np.zeros(x.shape[:-1] + (3, 2, 3))
        J[..., 2, 1, 0] = 2.0 * x[..., 0]
        return J

    return SRStructure("martinet", 3, 2, Box.around(np.zeros(3), 4.0), C11, frame, jac,
                       {"builtin": "martinet"})


def _grushin() -> SRStructure:
    def frame(x):
        o, z = np.ones(x.shape[:-1]), np.zeros(x.shape[:-1])
        return _stack_frame((o, z), (z, x[..., 0]))

    def jac(x):
        J = np.zeros(x.shape[:-1] + (2, 2, 2))
        J[..., 1, 1, 0] = 1.0
        return J

    return SRStructure("grushin", 2, 2, Box.around(np.zeros(2), 2.0), C0, frame, jac,
                       {"builtin": "grushin"})


def _flat_nonbracket() -> SRStructure:
    def frame(x):
        o, z = np.ones(x.shape[:-1]), np.zeros(x.shape[:-1])
        return _stack_frame((o, z, z), (z, o, z))

    def jac(x):
        return np.zeros(x.shape[:-1] + (3, 2, 3))

    return SRStructure("flat_nonbracket", 3, 2, Box.around(np.zeros(3), 4.0), C11, frame, jac,
                       {"builtin": "flat_nonbracket"})


def _duplicated_line() -> SRStructure:
    def frame(x):
        return np.ones(x.shape[:-1] + (1, 2))

    def jac(x):
        return np.zeros(x.shape[:-1] + (1, 2, 1))

    return SRStructure("duplicated_line", 1, 2, Box.around(np.zeros(1), 4.0), C0, frame, jac,
                       {"builtin": "duplicated_line"})


_BUILTINS = {
    "euclidean2": lambda: _euclidean(2),
    "euclidean3": lambda: _euclidean(3),
    "heisenberg": _heisenberg,
    "martinet": _martinet,
    "grushin": _grushin,
    "flat_nonbracket": _flat_nonbracket,
    "duplicated_line": _duplicated_line,
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name: str) -> SRStructure:
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise UnknownStructure(f"unknown structure {name!r}; known: {', '.join(BUILTIN_NAMES)}") from None


# ------------------------------------------------------- definition files


def _locate(raw: str, needle: str) -> tuple[int, int]:
    """Line/column (1-based) of the first occurrence of a JSON string literal in raw text."""
    lit = json.dumps(needle)
    pos = raw.find(lit)
    if pos < 0:
        return 0, 0
    pos += 1  # skip the opening quote
    return raw.count("\n", 0, pos) + 1, pos - (raw.rfind("\n", 0, pos) + 1) + 1


def structure_from_document(doc: dict, raw: str | None = None, source: str = "<document>") -> SRStructure:
    """Build a structure from a parsed definition document.

    ``frame`` is a list of m lists, each holding n coordinate expressions for one
    field.  Expression errors are reported as ``source:line:column`` pointing into
    the raw text when it is available.
    """
    if "builtin" in doc:
        return builtin(doc["builtin"])
    try:
        name = str(doc["name"])
        n, m = int(doc["n"]), int(doc["m"])
        regularity = doc["regularity"]
        domain = Box.from_json(doc["domain"])
        fields = doc["frame"]
    except (KeyError, TypeError, ValueError) as exc:
        raise StructureDefinitionError(f"{source}: missing or invalid field: {exc}") from None
    if len(fields) != m or any(len(f) != n for f in fields):
        raise StructureDefinitionError(f"{source}: frame must be {m} lists of {n} expressions")
    asts = []
    for i, comps in enumerate(fields):
        row = []
        for a, text in enumerate(comps):
            try:
                row.append(expr.parse(str(text), n))
            except expr.ExpressionError as exc:
                line, col = _locate(raw, str(text)) if raw else (0, 0)
                where = f"{source}:{line}:{col + exc.column - 1}" if line else source
                raise StructureDefinitionError(
                    f"{where}: field {i + 1} component {a + 1}: {exc}") from None
        asts.append(row)
    derivs = [[[expr.derivative(node, c) for c in range(n)] for node in row] for row in asts]

    def frame(x):
        return np.stack([np.stack([expr.evaluate(node, x) for node in row], axis=-1) for row in asts], axis=-1)

    def jac(x):
        # J[..., a, i, c]
        return np.stack(
            [np.stack([np.stack([expr.evaluate(d, x) for d in derivs[i][a]], axis=-1) for i in range(m)], axis=-2)
             for a in range(n)], axis=-3)

    try:
        return SRStructure(name, n, m, domain, regularity, frame, jac, doc)
    except ValueError as exc:
        raise StructureDefinitionError(f"{source}: {exc}") from None


def load_structure(path: str | Path) -> SRStructure:
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise StructureDefinitionError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return structure_from_document(doc, raw, str(path))


def resolve_structure(spec: str | dict) -> SRStructure:
    """Built-in name, path to a definition file, or an already parsed document."""
    if isinstance(spec, dict):
        return structure_from_document(spec)
    if spec in _BUILTINS:
        return builtin(spec)
    if Path(spec).is_file():
        return load_structure(spec)
    raise UnknownStructure(f"{spec!r} is neither a built-in structure nor a definition file")


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    rule: str
    points: int
    min_rank: int
    max_rank: int
    min_frame_norm: float  # min over points of max_i |X_i(p)|
    worst_point: list


def sample_points(box: Box, count: int, seed: int) -> np.ndarray:
    """Deterministic sample: center, face centers, corners (n <= 6) and scrambled Halton points.

    The structured points sit on the coordinate mid-planes of the box, where
    built-in degeneracy loci (e.g. the Grushin line x=0) are placed.
    """
    n = box.dim
    pts = [box.center]
    for c in range(n):
        for s in (-1.0, 1.0):
            p = box.center.copy()
            p[c] += s * box.half_widths[c]
            pts.append(p)
    if n <= 6:
        grid = np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T
        pts.extend(box.center + grid * box.half_widths)
    if count > 0:
        h = qmc.Halton(d=n, scramble=True, seed=scramble_seed(seed, "halton"))
        u = h.random(count)
        pts.extend(box.lo + u * (box.hi - box.lo))
    return np.array(pts)


def validate(S: SRStructure, sample_count: int = 1000, seed: int = 0) -> ValidationReport:
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    pts = sample_points(S.domain, sample_count, seed)
    F = S.frame_matrix(pts)
    s = np.linalg.svd(F, compute_uv=False)
    smax = s[:, 0] if s.shape[1] else np.zeros(len(pts))
    ranks = np.where(smax > 0, np.sum(s > RANK_TOL * smax[:, None], axis=1), 0)
    norms = np.max(np.linalg.norm(F, axis=-2), axis=-1)
    if S.regularity == C11:
        rule = "rank == m"
        bad = ranks != S.m
        worst = int(np.argmin(ranks))
    else:
        rule = "some X_i(p) != 0"
        bad = norms == 0.0
        worst = int(np.argmin(norms))
    return ValidationReport(
        passed=not bool(np.any(bad)),
        rule=rule,
        points=len(pts),
        min_rank=int(ranks.min()),
        max_rank=int(ranks.max()),
        min_frame_norm=float(norms.min()),
        worst_point=pts[worst].tolist(),
    )
