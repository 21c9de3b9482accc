import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .discretize import Mesh, MeshKind
from .fem import SphericalLocator, assemble, element_geometry, reduce_dirichlet
from .harmonic import RadialFit, VolumeField, fit_radial_exponent
from .spectral import EigenPair, vertex_frame

_edge_tolerance = 1e-12


@dataclass(kw_only=True)
class BoundaryData:
    """Dirichlet data: `values` is read on the cap (cone) or the boundary (box)."""

    values: np.ndarray
    scale: float
    generator: str


@dataclass(kw_only=True)
class SolveOptions:
    tolerance: float = 1e-10
    max_newton: int = 30
    step: float = 0.25
    min_step: float = 1.0 / 64.0
    max_halvings: int = 30


@dataclass(kw_only=True)
class SolveReport:
    residual_history: list[float] = field(default_factory=list)
    continuation_steps: list[float] = field(default_factory=list)
    damping: list[float] = field(default_factory=list)
    final_residual: float = math.inf
    converged: bool = False
    last_good: float = 0.0
    decay_fits: dict[str, float] = field(default_factory=dict)
    edge_gradient: float = 0.0


@dataclass(kw_only=True)
class BoundaryCheck:
    max_value: float
    edge_gradient: float


@dataclass(kw_only=True)
class BarrierResult:
    passed: bool
    margin: float
    checked: int


@dataclass(kw_only=True)
class DecayFit:
    stratum: str
    exponent: float
    amplitude: float
    distances: np.ndarray
    magnitudes: np.ndarray


def eigen_boundary_data(m: Mesh, pair: EigenPair, scale: float) -> BoundaryData:
    """scale·φ on the cap of a cone mesh, zero elsewhere."""
    _check_kind(m, MeshKind.CONE)
    cap = m.tagged("cap")
    values = np.zeros(m.n_nodes)
    locator = SphericalLocator(pair.mesh.nodes, pair.mesh.elements)
    values[cap] = scale * locator.interpolate(pair.phi, m.nodes[cap])
    values[m.tagged("flat_face")] = 0.0
    return BoundaryData(values=values, scale=scale, generator=f"eigen:{pair.index}")


def affine_boundary_data(m: Mesh, gradient: np.ndarray, offset: float = 0.0) -> BoundaryData:
    values = m.nodes @ np.asarray(gradient, dtype=float) + offset
    return BoundaryData(
        values=values,
        scale=float(np.linalg.norm(gradient)),
        generator="affine",
    )


def check_boundary_data(m: Mesh, g: BoundaryData, tolerance: float = 1e-12) -> BoundaryCheck:
    """Cone data must vanish at cap nodes on flat faces and on cone edges.

    The discrete surface gradient of the data at cap nodes on cone edges is
    reported alongside; it only tends to zero under refinement.
    """
    if len(g.values) != m.n_nodes:
        raise InvalidBoundaryDataError(f"{len(g.values)} values for {m.n_nodes} nodes")
    if not np.all(np.isfinite(g.values)):
        raise InvalidBoundaryDataError("non-finite boundary values")
    if m.kind != MeshKind.CONE:
        return BoundaryCheck(max_value=0.0, edge_gradient=0.0)
    cap = m.tagged("cap")
    worst = 0.0
    for prefix in ("flat_face", "edge"):
        nodes = np.intersect1d(cap, m.tagged(prefix))
        worst = max(worst, float(np.max(np.abs(g.values[nodes]), initial=0.0)))
        if worst > tolerance:
            raise InvalidBoundaryDataError(f"data is {worst:.3e} on cap nodes tagged {prefix}")
    corners = np.intersect1d(cap, m.tagged("edge"))
    gradient = cap_gradient(m, g.values)[corners]
    return BoundaryCheck(
        max_value=worst,
        edge_gradient=float(np.max(np.linalg.norm(gradient, axis=1), initial=0.0)),
    )


def cap_gradient(m: Mesh, values: np.ndarray) -> np.ndarray:
    """Area-weighted nodal surface gradient of `values` over the cap triangles of a cone mesh."""
    _check_kind(m, MeshKind.CONE)
    on_cap = np.zeros(m.n_nodes, dtype=bool)
    on_cap[m.tagged("cap")] = True
    faces = np.concatenate([np.delete(m.elements, k, axis=1) for k in range(m.elements.shape[1])])
    faces = np.unique(np.sort(faces[np.all(on_cap[faces], axis=1)], axis=1), axis=0)
    result = np.zeros((m.n_nodes, m.nodes.shape[1]))
    if len(faces) == 0:
        return result
    measures, grads = element_geometry(m.nodes, faces)
    local = np.einsum("ei,eid->ed", values[faces], grads)
    weight = np.zeros(m.n_nodes)
    for i in range(faces.shape[1]):
        np.add.at(result, faces[:, i], measures[:, None] * local)
        np.add.at(weight, faces[:, i], measures)
    result[on_cap] /= weight[on_cap, None]
    return result


def area_functional(m: Mesh, values: np.ndarray) -> float:
    measures, gradients = _gradients(m, values)
    return float(np.sum(measures * np.sqrt(1.0 + np.einsum("ed,ed->e", gradients, gradients))))


def area_gradient(m: Mesh, values: np.ndarray) -> np.ndarray:
    """Derivative of the discrete area with respect to every nodal value."""
    measures, grads = element_geometry(m.nodes, m.elements)
    gradients = np.einsum("ei,eid->ed", values[m.elements], grads)
    weight = measures / np.sqrt(1.0 + np.einsum("ed,ed->e", gradients, gradients))
    local = weight[:, None] * np.einsum("ed,eid->ei", gradients, grads)
    result = np.zeros(m.n_nodes)
    np.add.at(result, m.elements, local)
    return result


def mse_residual(u: VolumeField) -> np.ndarray:
    """Weak residual of div(∇u/√(1+|∇u|²)) with zero rows at Dirichlet nodes."""
    residual = area_gradient(u.mesh, u.values)
    residual[u.mesh.dirichlet_nodes()] = 0.0
    return residual


def jacobian(m: Mesh, values: np.ndarray) -> sp.csr_matrix:
    """Second variation of the discrete area (the Newton matrix)."""
    measures, grads = element_geometry(m.nodes, m.elements)
    gradients = np.einsum("ei,eid->ed", values[m.elements], grads)
    w = np.sqrt(1.0 + np.einsum("ed,ed->e", gradients, gradients))
    projected = np.einsum("ed,eid->ei", gradients, grads)
    local = (measures / w)[:, None, None] * (grads @ grads.transpose(0, 2, 1))
    local -= (measures / w**3)[:, None, None] * (projected[:, :, None] * projected[:, None, :])
    return assemble(m.elements, local, m.n_nodes)


def solve_mse(
    m: Mesh, g: BoundaryData, options: SolveOptions | None = None
) -> tuple[VolumeField, SolveReport]:
    """Damped Newton with continuation in the data scale s ∈ [0, 1].

    Each continuation step starts from a linear predictor and halves its
    length after a failed Newton solve; below `options.min_step` the solve is
    abandoned with the partial report attached to the error.
    """
    options = options or SolveOptions()
    check = check_boundary_data(m, g)
    dirichlet = m.dirichlet_nodes()
    free = m.free_mask()
    target = np.zeros(m.n_nodes)
    boundary = _data_nodes(m)
    target[boundary] = g.values[boundary]
    report = SolveReport(edge_gradient=check.edge_gradient)

    current = np.zeros(m.n_nodes)
    previous: np.ndarray | None = None
    s, s_previous = 0.0, 0.0
    step = 1.0 if np.all(target[dirichlet] == 0.0) else options.step
    while s < 1.0:
        s_next = min(1.0, s + step)
        guess = current.copy()
        if previous is not None and s > s_previous:
            guess += (s_next - s) / (s - s_previous) * (current - previous)
        guess[dirichlet] = s_next * target[dirichlet]
        solution = _newton(m, guess, free, options, report)
        if solution is None:
            step /= 2.0
            if step < options.min_step:
                report.last_good = s
                raise NewtonDivergenceError(report)
            continue
        previous, current = current, solution
        s_previous, s = s, s_next
        report.continuation_steps.append(s)
        report.last_good = s
    report.converged = True
    return VolumeField(mesh=m, values=current, origin="solve_mse"), report


def _newton(
    m: Mesh,
    u: np.ndarray,
    free: np.ndarray,
    options: SolveOptions,
    report: SolveReport,
) -> np.ndarray | None:
    index = np.flatnonzero(free)
    residual = area_gradient(m, u)[index]
    norm = float(np.linalg.norm(residual))
    report.residual_history.append(norm)
    for _ in range(options.max_newton):
        if norm < options.tolerance:
            report.final_residual = norm
            return u
        matrix = reduce_dirichlet(jacobian(m, u), free).tocsc()
        try:
            delta = splu(matrix).solve(-residual)
        except RuntimeError:
            return None
        damping = 1.0
        for _ in range(options.max_halvings):
            trial = u.copy()
            trial[index] += damping * delta
            trial_residual = area_gradient(m, trial)[index]
            trial_norm = float(np.linalg.norm(trial_residual))
            if np.isfinite(trial_norm) and trial_norm < norm:
                break
            damping /= 2.0
        else:
            return None
        u, residual, norm = trial, trial_residual, trial_norm
        report.damping.append(damping)
        report.residual_history.append(norm)
    if norm < options.tolerance:
        report.final_residual = norm
        return u
    return None


def edge_polar(m: Mesh, edge: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Distance ρ to the cone edge, angle θ from its first flat face, height along it, dihedral angle."""
    v, t1, t2, opening = vertex_frame(m.polytope, edge)
    height = m.nodes @ v
    rho = np.linalg.norm(m.nodes - height[:, None] * v, axis=1)
    theta = np.arctan2(m.nodes @ t2, m.nodes @ t1)
    return rho, np.clip(theta, 0.0, opening), height, opening


def _barrier_profile(theta: np.ndarray, beta: float) -> np.ndarray:
    eps = 0.05 * beta
    return np.cos(math.pi * (theta - 0.5 * beta) / (beta + eps))


def barrier_check(
    u: VolumeField,
    edge: int,
    beta: float,
    gamma: float,
    constant: float,
    r0: float = 0.3,
    tolerance: float = 1e-10,
) -> BarrierResult:
    """Check |u| ≤ B ρ^γ cos(π θ/(β+ε)) near a cone edge, θ measured from the bisector."""
    _check_kind(u.mesh, MeshKind.CONE)
    if not 1.0 < gamma < math.pi / beta:
        raise InvalidBarrierExponentError(gamma, beta)
    rho, theta, _, _ = edge_polar(u.mesh, edge)
    magnitude = np.abs(u.values)
    on_edge = rho <= _edge_tolerance
    near = (rho <= r0) & ~on_edge
    barrier = constant * rho[near] ** gamma * _barrier_profile(theta[near], beta)
    margin = float(np.min(barrier - magnitude[near], initial=math.inf))
    edge_ok = bool(np.all(magnitude[on_edge] <= tolerance))
    return BarrierResult(
        passed=edge_ok and margin >= -tolerance,
        margin=margin,
        checked=int(np.count_nonzero(near) + np.count_nonzero(on_edge)),
    )


def tune_barrier_constant(
    u: VolumeField,
    edge: int,
    beta: float,
    gamma: float,
    r0: float = 0.3,
    safety: float = 1.2,
) -> float:
    """Smallest B (times `safety`) dominating |u| on the outer boundary of the edge region.

    That boundary is the shell 0.8·r0 ≤ ρ ≤ r0 together with the cap.
    """
    if not 1.0 < gamma < math.pi / beta:
        raise InvalidBarrierExponentError(gamma, beta)
    rho, theta, _, _ = edge_polar(u.mesh, edge)
    shell = (rho >= 0.8 * r0) & (rho <= r0)
    cap = np.zeros(u.mesh.n_nodes, dtype=bool)
    cap[u.mesh.tagged("cap")] = True
    outer = (shell | (cap & (rho <= r0))) & (rho > _edge_tolerance)
    profile = rho[outer] ** gamma * _barrier_profile(theta[outer], beta)
    ratios = np.abs(u.values[outer]) / profile
    return safety * float(np.max(ratios, initial=0.0))


def gradient_decay_fit(
    u: VolumeField,
    stratum: str,
    window: tuple[float, float] | None = None,
    *,
    stations: tuple[float, float] = (0.3, 0.8),
    n_bins: int = 10,
) -> DecayFit:
    """Log-log fit of element gradient magnitudes against the distance to a stratum.

    `stratum` is "edge:<k>" (distance to the cone edge, elements between the
    given heights along it) or "origin".
    """
    m = u.mesh
    _check_kind(m, MeshKind.CONE)
    low, high = window if window is not None else (4.0 * m.h, 0.3)
    measures, grads = element_geometry(m.nodes, m.elements)
    magnitude = np.linalg.norm(np.einsum("ei,eid->ed", u.values[m.elements], grads), axis=1)
    centroids = m.nodes[m.elements].mean(axis=1)
    match stratum.split(":"):
        case ["origin"]:
            distance = np.linalg.norm(centroids, axis=1)
            selected = np.ones(len(distance), dtype=bool)
        case ["edge", k]:
            v = m.polytope.vertices[int(k)]
            height = centroids @ v
            distance = np.linalg.norm(centroids - height[:, None] * v, axis=1)
            selected = (height >= stations[0]) & (height <= stations[1])
        case _:
            raise UnknownStratumError(stratum)
    edges = np.geomspace(low, high, n_bins + 1)
    distances = []
    magnitudes = []
    for a, b in zip(edges[:-1], edges[1:]):
        in_bin = selected & (distance >= a) & (distance < b)
        if not np.any(in_bin):
            continue
        weights = measures[in_bin]
        distances.append(math.sqrt(a * b))
        magnitudes.append(math.sqrt(np.sum(weights * magnitude[in_bin] ** 2) / np.sum(weights)))
    return _log_fit(stratum, np.array(distances), np.array(magnitudes))


def value_decay_fit(
    u: VolumeField, stratum: str = "origin", window: tuple[float, float] = (0.05, 0.5)
) -> RadialFit:
    if stratum != "origin":
        raise UnknownStratumError(stratum)
    return fit_radial_exponent(u.mesh, u.values, window)


def _log_fit(stratum: str, distances: np.ndarray, magnitudes: np.ndarray) -> DecayFit:
    usable = magnitudes > 0.0
    if np.count_nonzero(usable) < 3:
        raise InsufficientSamplesError(stratum, int(np.count_nonzero(usable)))
    slope, intercept = np.polyfit(np.log(distances[usable]), np.log(magnitudes[usable]), 1)
    return DecayFit(
        stratum=stratum,
        exponent=float(slope),
        amplitude=float(math.exp(intercept)),
        distances=distances[usable],
        magnitudes=magnitudes[usable],
    )


def _gradients(m: Mesh, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    measures, grads = element_geometry(m.nodes, m.elements)
    return measures, np.einsum("ei,eid->ed", values[m.elements], grads)


def _data_nodes(m: Mesh) -> np.ndarray:
    match m.kind:
        case MeshKind.CONE:
            return m.tagged("cap")
        case MeshKind.BOX:
            return m.tagged("boundary")
        case _:
            raise UnsupportedMeshError(m.kind)


def _check_kind(m: Mesh, kind: MeshKind) -> None:
    if m.kind != kind:
        raise UnsupportedMeshError(m.kind)


class Error(Exception):
    pass


class UnsupportedMeshError(Error):
    def __init__(self, kind: MeshKind) -> None:
        super().__init__(f"unsupported mesh kind {kind.name.lower()}")


class InvalidBoundaryDataError(Error):
    def __init__(self, description: str) -> None:
        super().__init__(f"invalid boundary data: {description}")


class NewtonDivergenceError(Error):
    def __init__(self, report: SolveReport) -> None:
        super().__init__(
            f"Newton iteration failed; last good continuation parameter {report.last_good:.6g}"
        )
        self.report = report


class InvalidBarrierExponentError(Error):
    def __init__(self, gamma: float, beta: float) -> None:
        super().__init__(f"barrier exponent {gamma} outside (1, {math.pi / beta})")


class UnknownStratumError(Error):
    def __init__(self, stratum: str) -> None:
        super().__init__(f"unknown stratum {repr(stratum)}")


class InsufficientSamplesError(Error):
    def __init__(self, stratum: str, count: int) -> None:
        super().__init__(f"only {count} usable distance bins for stratum {repr(stratum)}")
