import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .discretize import Mesh, MeshKind, mesh_spherical_polytope, refine
from .fem import SphericalLocator, assemble_mass, assemble_stiffness, reduce_dirichlet
from .tiling import SphericalPolytope, Tiling

_dense_limit = 1500
_default_window_top = 0.2


@dataclass(kw_only=True)
class EigenPair:
    lam: float
    phi: np.ndarray
    index: int
    mesh: Mesh
    residual: float = 0.0


@dataclass(kw_only=True)
class IndicialExponents:
    gamma_minus: float
    gamma_plus: float
    n: int
    m: int


@dataclass(kw_only=True)
class VertexFit:
    vertex: int
    exponent: float
    amplitude: float
    radii: np.ndarray
    amplitudes: np.ndarray


@dataclass(kw_only=True)
class EquivariantReport:
    index: int
    max_trace: float
    wall_jumps: list[float]
    vertex_fits: list[VertexFit]
    warnings: list[str] = field(default_factory=list)


@dataclass(kw_only=True)
class EigenSequence:
    h: list[float]
    values: np.ndarray
    extrapolated: np.ndarray
    orders: np.ndarray
    finest: list[EigenPair] = field(default_factory=list)


def assemble(m: Mesh) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    if m.kind != MeshKind.SURFACE:
        raise NotSurfaceMeshError(m.kind)
    return assemble_stiffness(m.nodes, m.elements), assemble_mass(m.nodes, m.elements)


def dirichlet_eigs(
    m: Mesh,
    count: int,
    *,
    tolerance: float = 1e-8,
    max_iterations: int = 5,
) -> list[EigenPair]:
    """The `count` smallest Dirichlet eigenpairs of K φ = λ M φ, ascending."""
    if count < 1:
        raise InvalidCountError(count)
    stiffness, mass = assemble(m)
    free = m.free_mask()
    if free.all():
        raise MissingDirichletBoundaryError()
    reduced_stiffness = reduce_dirichlet(stiffness, free)
    reduced_mass = reduce_dirichlet(mass, free)
    n = reduced_stiffness.shape[0]
    if count >= n:
        raise InvalidCountError(count)

    if n <= _dense_limit:
        values, vectors = scipy.linalg.eigh(
            reduced_stiffness.toarray(),
            reduced_mass.toarray(),
            subset_by_index=[0, count - 1],
        )
        residuals = _residuals(reduced_stiffness, reduced_mass, values, vectors)
    else:
        values, vectors, residuals = _shift_invert(
            reduced_stiffness, reduced_mass, count, tolerance, max_iterations
        )
    if np.max(residuals) >= tolerance:
        raise EigenSolverError(float(np.max(residuals)))

    vectors = _mass_orthonormalize(vectors, reduced_mass)
    pairs = []
    for k in range(count):
        phi = np.zeros(m.n_nodes)
        phi[free] = vectors[:, k]
        pairs.append(
            EigenPair(
                lam=float(values[k]),
                phi=_fix_sign(phi, mass),
                index=k + 1,
                mesh=m,
                residual=float(residuals[k]),
            )
        )
    return pairs


def _shift_invert(
    stiffness: sp.csr_matrix,
    mass: sp.csr_matrix,
    count: int,
    tolerance: float,
    max_iterations: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    start = np.ones(stiffness.shape[0])
    start /= math.sqrt(start @ (mass @ start))
    shift = 0.0
    residuals = np.full(count, np.inf)
    for _ in range(max_iterations):
        try:
            values, vectors = eigsh(
                stiffness.tocsc(),
                k=count,
                M=mass.tocsc(),
                sigma=shift,
                which="LM",
                v0=start,
            )
        except ArpackNoConvergence as e:
            values, vectors = e.eigenvalues, e.eigenvectors
            if len(values) < count:
                continue
        order = np.argsort(values)
        values, vectors = values[order], vectors[:, order]
        residuals = _residuals(stiffness, mass, values, vectors)
        if np.max(residuals) < tolerance:
            return values, vectors, residuals
        shift = 0.9 * float(values[0])
        start = vectors[:, 0]
    raise EigenSolverError(float(np.max(residuals)))


def _residuals(
    stiffness: sp.spmatrix, mass: sp.spmatrix, values: np.ndarray, vectors: np.ndarray
) -> np.ndarray:
    weighted = mass @ vectors
    defect = stiffness @ vectors - weighted * values[None, :]
    return np.linalg.norm(defect, axis=0) / (np.abs(values) * np.linalg.norm(weighted, axis=0))


def _mass_orthonormalize(vectors: np.ndarray, mass: sp.spmatrix) -> np.ndarray:
    gram = vectors.T @ (mass @ vectors)
    factor = np.linalg.cholesky(gram)
    return scipy.linalg.solve_triangular(factor, vectors.T, lower=True).T


def _fix_sign(phi: np.ndarray, mass: sp.spmatrix) -> np.ndarray:
    total = float(np.sum(mass @ phi))
    if abs(total) <= 1e-10 * float(np.max(np.abs(phi))):
        total = float(phi[np.argmax(np.abs(phi))])
    return phi if total >= 0.0 else -phi


def indicial_exponents(lam: float, n: int, m: int) -> IndicialExponents:
    discriminant = (n - m - 2) ** 2 + 4.0 * lam
    if discriminant < 0.0:
        raise OscillatoryRegimeError(lam, n, m)
    centre = (2 + m - n) / 2
    root = 0.5 * math.sqrt(discriminant)
    return IndicialExponents(gamma_minus=centre - root, gamma_plus=centre + root, n=n, m=m)


def richardson(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Extrapolate rows of eigenvalues computed on meshes halving h each time.

    The observed order from the last three rows is used when it lies in [1, 3];
    otherwise order 2 is assumed.
    """
    values = np.atleast_2d(values)
    orders = np.full(values.shape[1], 2.0)
    if len(values) < 2:
        return values[-1].copy(), orders
    if len(values) >= 3:
        coarse = values[-3] - values[-2]
        fine = values[-2] - values[-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            observed = np.log2(coarse / fine)
        usable = np.isfinite(observed) & (observed >= 1.0) & (observed <= 3.0)
        orders[usable] = observed[usable]
    extrapolated = values[-1] + (values[-1] - values[-2]) / (2.0**orders - 1.0)
    return extrapolated, orders


def eigen_sequence(
    p: SphericalPolytope,
    h: float,
    grading: float,
    levels: int,
    count: int,
    tolerance: float = 1e-8,
) -> EigenSequence:
    mesh = mesh_spherical_polytope(p, h, grading)
    sizes = []
    values = []
    pairs: list[EigenPair] = []
    for level in range(levels):
        if level > 0:
            mesh = refine(mesh)
        sizes.append(mesh.h)
        pairs = dirichlet_eigs(mesh, count, tolerance=tolerance)
        values.append([pair.lam for pair in pairs])
    values = np.array(values)
    extrapolated, orders = richardson(values)
    return EigenSequence(
        h=sizes, values=values, extrapolated=extrapolated, orders=orders, finest=pairs
    )


def vertex_frame(
    p: SphericalPolytope, vertex: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Polar frame at a polytope vertex: (v, t1, t2, opening angle).

    θ = 0 points along the side with the lowest index through the vertex and
    θ grows into the polytope.
    """
    v = p.vertices[vertex]
    sides = [facet for facet in p.facets if vertex in facet]
    ends = [next(i for i in facet if i != vertex) for facet in sides]
    tangents = []
    for end in ends:
        w = p.vertices[end]
        t = w - (w @ v) * v
        tangents.append(t / np.linalg.norm(t))
    t1 = tangents[0]
    inward = p.interior - (p.interior @ v) * v - (p.interior @ t1) * t1
    t2 = inward / np.linalg.norm(inward)
    cosine = float(np.clip(tangents[0] @ tangents[1], -1.0, 1.0))
    return v, t1, t2, math.acos(cosine)


def vertex_polar(m: Mesh, vertex: int) -> tuple[np.ndarray, np.ndarray]:
    """Geodesic distance ρ and angle θ of every surface node about a polytope vertex."""
    v, t1, t2, _ = vertex_frame(m.polytope, vertex)
    tangent = m.nodes - (m.nodes @ v)[:, None] * v
    rho = np.arctan2(np.linalg.norm(tangent, axis=1), m.nodes @ v)
    theta = np.arctan2(tangent @ t2, tangent @ t1)
    return rho, theta


def fit_vertex_exponent(
    m: Mesh,
    values: np.ndarray,
    vertex: int,
    window: tuple[float, float] | None = None,
    *,
    n_radii: int = 12,
    n_angles: int = 24,
) -> VertexFit:
    """Log-log fit of the polar RMS amplitude of `values` about a polytope vertex."""
    low, high = window if window is not None else (4.0 * m.h, _default_window_top)
    if not 0.0 < low < high:
        raise InsufficientSamplesError(f"empty fit window ({low}, {high})")
    v, t1, t2, opening = vertex_frame(m.polytope, vertex)
    radii = np.geomspace(low, high, n_radii)
    angles = (np.arange(n_angles) + 0.5) * opening / n_angles
    directions = np.cos(angles)[:, None] * t1 + np.sin(angles)[:, None] * t2
    points = (
        np.cos(radii)[:, None, None] * v
        + np.sin(radii)[:, None, None] * directions[None, :, :]
    ).reshape(-1, 3)
    locator = SphericalLocator(m.nodes, m.elements)
    samples = locator.interpolate(values, points).reshape(n_radii, n_angles)
    amplitudes = np.sqrt(np.mean(samples**2, axis=1))
    if np.any(amplitudes <= 0.0):
        raise InsufficientSamplesError("field vanishes on a sampled arc")
    slope, intercept = np.polyfit(np.log(radii), np.log(amplitudes), 1)
    return VertexFit(
        vertex=vertex,
        exponent=float(slope),
        amplitude=float(math.exp(intercept)),
        radii=radii,
        amplitudes=amplitudes,
    )


def equivariant_check(
    pair: EigenPair,
    t: Tiling | None = None,
    window: tuple[float, float] | None = None,
) -> EquivariantReport:
    """Check the odd-reflected extension of an eigenfunction and fit vertex exponents.

    The reflected value across a wall is −φ, so the jump there is 2|φ| on the
    wall nodes.
    """
    m = pair.mesh
    warnings = []
    walls = [m.tags[f"side:{k}"] for k in range(len(m.polytope.facets))]
    wall_jumps = [float(2.0 * np.max(np.abs(pair.phi[w]), initial=0.0)) for w in walls]
    boundary = m.dirichlet_nodes()
    max_trace = float(np.max(np.abs(pair.phi[boundary]), initial=0.0))
    if t is not None:
        base = t.cells[t.base_cell_index]
        matched = all(
            np.min(np.linalg.norm(base.vertices - v, axis=1)) < 1e-10
            for v in m.polytope.vertices
        )
        if not matched:
            warnings.append("mesh polytope is not the base cell of the tiling")
    fits = []
    for vertex in range(len(m.polytope.vertices)):
        try:
            fits.append(fit_vertex_exponent(m, pair.phi, vertex, window))
        except InsufficientSamplesError as e:
            warnings.append(f"vertex {vertex}: {e}")
    return EquivariantReport(
        index=pair.index,
        max_trace=max_trace,
        wall_jumps=wall_jumps,
        vertex_fits=fits,
        warnings=warnings,
    )


class Error(Exception):
    pass


class NotSurfaceMeshError(Error):
    def __init__(self, kind: MeshKind) -> None:
        super().__init__(f"eigenproblems need a surface mesh, got {kind.name.lower()}")


class MissingDirichletBoundaryError(Error):
    def __init__(self) -> None:
        super().__init__("mesh has no Dirichlet-tagged nodes")


class InvalidCountError(Error):
    def __init__(self, count: int) -> None:
        super().__init__(f"invalid eigenpair count {count}")


class EigenSolverError(Error):
    def __init__(self, residual: float) -> None:
        super().__init__(f"eigensolver did not converge, relative residual {residual:.3e}")
        self.residual = residual


class OscillatoryRegimeError(Error):
    def __init__(self, lam: float, n: int, m: int) -> None:
        super().__init__(
            f"negative indicial discriminant for lambda={lam}, n={n}, m={m}"
        )


class InsufficientSamplesError(Error):
    def __init__(self, description: str) -> None:
        super().__init__(description)
