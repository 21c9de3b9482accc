import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .discretize import Mesh, MeshKind
from .fem import PointLocator, element_geometry
from .harmonic import VolumeField
from .mse import edge_polar
from .tiling import Face, Tiling, classify_points, cycle_sign, odd_skeleton

_branch_tolerance = 1e-10


class TwoValuedField:
    """A field on the base cone transported to the whole ball by odd reflection.

    The value at x in the cone over cell c is parity(g)·u(gᵀx), g being the
    stored transport of the base cell onto c. Only the branch ũ is kept; the
    other sheet is −ũ.
    """

    __slots__ = (
        "base",
        "tiling",
        "_locator",
        "_odd",
    )

    def __init__(self, base: VolumeField, tiling: Tiling) -> None:
        self.base = base
        self.tiling = tiling
        self._locator = PointLocator(base.mesh.nodes, base.mesh.elements)
        self._odd = [tiling.vertices[list(face.vertices)] for face in odd_skeleton(tiling)]

    @property
    def mesh(self) -> Mesh:
        return self.base.mesh

    def evaluate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values of ũ at `points` and a flag for points on the branch locus (value 0)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(points, axis=1)
        values = np.zeros(len(points))
        on_branch = r <= _branch_tolerance
        inner = np.flatnonzero(~on_branch)
        if len(inner) == 0:
            return values, on_branch
        directions = points[inner] / r[inner, None]
        on_branch[inner] = self._on_odd_skeleton(directions)
        cells = classify_points(self.tiling, directions)
        for cell in np.unique(cells):
            g = self.tiling.transport(int(cell))
            rows = inner[cells == cell]
            pulled = g.inverse_apply(points[rows])
            values[rows] = g.parity * self._locator.interpolate(self.base.values, pulled)
        values[on_branch] = 0.0
        return values, on_branch

    def gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        result = np.zeros_like(points)
        r = np.linalg.norm(points, axis=1)
        inner = np.flatnonzero(r > _branch_tolerance)
        cells = classify_points(self.tiling, points[inner] / r[inner, None])
        for cell in np.unique(cells):
            g = self.tiling.transport(int(cell))
            rows = inner[cells == cell]
            local = self._locator.gradient_at(self.base.values, g.inverse_apply(points[rows]))
            result[rows] = g.parity * (local @ g.matrix.T)
        return result

    def negated(self) -> "TwoValuedField":
        flipped = VolumeField(
            mesh=self.base.mesh, values=-self.base.values, origin=self.base.origin
        )
        return TwoValuedField(flipped, self.tiling)

    def _on_odd_skeleton(self, directions: np.ndarray) -> np.ndarray:
        flags = np.zeros(len(directions), dtype=bool)
        for vertices in self._odd:
            coefficients, *_ = np.linalg.lstsq(vertices.T, directions.T, rcond=None)
            residual = np.linalg.norm(vertices.T @ coefficients - directions.T, axis=0)
            flags |= (residual <= _branch_tolerance) & np.all(
                coefficients >= -_branch_tolerance, axis=0
            )
        return flags


@dataclass(kw_only=True)
class FrequencySample:
    center: np.ndarray
    radii: np.ndarray
    values: np.ndarray
    dirichlet: np.ndarray
    height: np.ndarray


@dataclass(kw_only=True)
class LeadingFit:
    ray: int
    exponent: float
    stations: np.ndarray
    coefficients: np.ndarray
    correlation: float
    samples: int


@dataclass(kw_only=True)
class SheetSample:
    points: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    on_branch: np.ndarray


def extend_two_valued(u: VolumeField, t: Tiling, tolerance: float = 1e-10) -> TwoValuedField:
    m = u.mesh
    if m.kind != MeshKind.CONE:
        raise NotConeFieldError(m.kind)
    base = t.cells[t.base_cell_index]
    for v in m.polytope.vertices:
        if np.min(np.linalg.norm(base.vertices - v, axis=1)) > 1e-10:
            raise TilingMismatchError()
    flat = m.tagged("flat_face")
    scale = max(float(np.max(np.abs(u.values))), 1.0)
    worst = float(np.max(np.abs(u.values[flat]), initial=0.0))
    if worst > tolerance * scale:
        raise NonVanishingTraceError(worst)
    return TwoValuedField(u, t)


def frequency(
    f: TwoValuedField,
    center: np.ndarray,
    radii: list[float] | np.ndarray,
    *,
    n_polar: int = 24,
    n_azimuth: int = 48,
    workers: int | None = None,
) -> FrequencySample:
    """Almgren frequency N(r) = r·D(r) / H(r) about `center`.

    H(r) = ∫_{∂B_r} ũ² and D(r) = ∫_{∂B_r} ũ ∂_r ũ, the boundary form of the
    Dirichlet integral. Both use the same Gauss-Legendre x uniform rule on the
    sphere, so N(r) = r·H'(r) / 2H(r) − 1 for the sampled family and is
    nondecreasing whenever log H is convex in log r.
    """
    center = np.asarray(center, dtype=float)
    radii = np.asarray(radii, dtype=float)
    for r in radii:
        if not r > 0.0 or np.linalg.norm(center) + r > 1.0 + 1e-12:
            raise RadiusOutOfRangeError(float(r))
    directions, weights = _sphere_rule(n_polar, n_azimuth)

    def sample(r: float) -> tuple[float, float]:
        points = center + r * directions
        values, _ = f.evaluate(points)
        radial = np.sum(f.gradient(points) * directions, axis=1)
        dirichlet = r**2 * float(np.sum(weights * values * radial))
        height = r**2 * float(np.sum(weights * values**2))
        return dirichlet, height

    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(sample, radii))
    else:
        results = [sample(r) for r in radii]
    dirichlet = np.array([d for d, _ in results])
    height = np.array([h for _, h in results])
    if np.any(height <= 0.0):
        raise TrivialFieldError(center)
    return FrequencySample(
        center=center,
        radii=radii,
        values=radii * dirichlet / height,
        dirichlet=dirichlet,
        height=height,
    )


def frequency_drop(sample: FrequencySample) -> float:
    """Largest decrease of N between consecutive radii, 0 for a nondecreasing sample."""
    order = np.argsort(sample.radii)
    steps = np.diff(sample.values[order])
    return float(max(0.0, -np.min(steps, initial=0.0)))


def _sphere_rule(n_polar: int, n_azimuth: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n_polar)
    phi = (np.arange(n_azimuth) + 0.5) * (2.0 * math.pi / n_azimuth)
    sine = np.sqrt(1.0 - nodes**2)
    points = np.stack(
        [
            np.outer(sine, np.cos(phi)).ravel(),
            np.outer(sine, np.sin(phi)).ravel(),
            np.repeat(nodes, n_azimuth),
        ],
        axis=1,
    )
    return points, np.repeat(weights, n_azimuth) * (2.0 * math.pi / n_azimuth)


def leading_coefficient_fit(
    f: TwoValuedField,
    ray: int,
    window: tuple[float, float] | None = None,
    *,
    stations: tuple[float, float] = (0.3, 0.8),
    n_stations: int = 5,
    min_profile: float = 0.25,
) -> LeadingFit:
    """Fit ũ ≈ c(t)·ρ^e·sin(3θ/2) about the cone edge over polytope vertex `ray`.

    θ is measured from the first flat face through the edge; the base cell
    covers the angular range where sin(3θ/2) ≥ 0, so the fit runs on base-mesh
    nodes. c(t) is fitted per station t along the edge, e jointly.
    """
    m = f.mesh
    low, high = window if window is not None else (4.0 * m.h, 0.3)
    rho, theta, height, _ = edge_polar(m, ray)
    profile = np.sin(1.5 * theta)
    values = f.base.values
    centres = np.linspace(stations[0], stations[1], n_stations)
    half = 0.5 * (centres[1] - centres[0]) if n_stations > 1 else 0.05
    in_window = (rho >= low) & (rho <= high)
    sign = 1.0 if np.sum(values[in_window] * profile[in_window]) >= 0.0 else -1.0

    rows = []
    targets = []
    labels = []
    model_nodes = []
    for k, t in enumerate(centres):
        slab = in_window & (np.abs(height - t) <= half)
        model_nodes.append(np.flatnonzero(slab))
        usable = np.flatnonzero(slab & (profile >= min_profile) & (sign * values > 0.0))
        rows.append(np.log(rho[usable]))
        targets.append(np.log(sign * values[usable] / profile[usable]))
        labels.append(np.full(len(usable), k))
    log_rho = np.concatenate(rows)
    target = np.concatenate(targets)
    label = np.concatenate(labels)
    if len(target) < n_stations + 2:
        raise IllConditionedFitError(f"{len(target)} samples for {n_stations} stations")
    design = np.column_stack([log_rho, label[:, None] == np.arange(n_stations)[None, :]]).astype(float)
    solution, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        raise IllConditionedFitError(f"design matrix rank {rank} < {design.shape[1]}")
    exponent = float(solution[0])
    coefficients = sign * np.exp(solution[1:])

    nodes = np.concatenate(model_nodes)
    station_of = np.concatenate([np.full(len(n), k) for k, n in enumerate(model_nodes)])
    model = coefficients[station_of] * rho[nodes] ** exponent * profile[nodes]
    denominator = np.linalg.norm(model) * np.linalg.norm(values[nodes])
    correlation = float(model @ values[nodes] / denominator) if denominator > 0.0 else 0.0
    return LeadingFit(
        ray=ray,
        exponent=exponent,
        stations=centres,
        coefficients=coefficients,
        correlation=correlation,
        samples=len(target),
    )


def face_gradient_jump(
    f: TwoValuedField,
    *,
    edge_margin: float = 0.1,
    radial_window: tuple[float, float] = (0.2, 0.9),
) -> float:
    """Relative RMS jump of the recovered gradient across flat faces.

    The odd reflection keeps the normal derivative and flips the tangential
    one, so the jump at a face node is twice the tangential part of the
    volume-averaged gradient there. Nodes near edges, the origin and the cap
    are skipped.
    """
    m = f.mesh
    measures, grads = element_geometry(m.nodes, m.elements)
    element_gradient = np.einsum("ei,eid->ed", f.base.values[m.elements], grads)
    recovered = np.zeros_like(m.nodes)
    weight = np.zeros(m.n_nodes)
    for i in range(m.elements.shape[1]):
        np.add.at(recovered, m.elements[:, i], measures[:, None] * element_gradient)
        np.add.at(weight, m.elements[:, i], measures)
    recovered /= np.maximum(weight, 1e-300)[:, None]

    r = np.linalg.norm(m.nodes, axis=1)
    keep = (r >= radial_window[0]) & (r <= radial_window[1])
    for k in range(len(m.polytope.vertices)):
        rho, _, _, _ = edge_polar(m, k)
        keep &= rho >= edge_margin
    normals = m.polytope.facet_normals()
    jumps = []
    magnitudes = []
    for k, normal in enumerate(normals):
        nodes = np.intersect1d(m.tags[f"flat_face:{k}"], np.flatnonzero(keep))
        if len(nodes) == 0:
            continue
        g = recovered[nodes]
        tangential = g - np.outer(g @ normal, normal)
        jumps.append(2.0 * np.linalg.norm(tangential, axis=1))
        magnitudes.append(np.linalg.norm(g, axis=1))
    if len(jumps) == 0:
        raise IllConditionedFitError("no flat-face nodes away from edges")
    jump = np.concatenate(jumps)
    magnitude = np.concatenate(magnitudes)
    scale = math.sqrt(float(np.mean(magnitude**2)))
    if scale == 0.0:
        return 0.0
    return math.sqrt(float(np.mean(jump**2))) / scale


def regular_grid(per_axis: int, radius: float = 1.0) -> np.ndarray:
    """Points of a regular cubic grid inside the closed ball of the given radius."""
    axis = np.linspace(-radius, radius, per_axis)
    points = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    return points[np.linalg.norm(points, axis=1) <= radius * (1.0 - 1e-9)]


def sample_sheets(f: TwoValuedField, points: np.ndarray) -> SheetSample:
    values, on_branch = f.evaluate(points)
    return SheetSample(points=points, upper=values, lower=-values, on_branch=on_branch)


def odd_cycle_signs(t: Tiling) -> list[tuple[Face, int]]:
    return [(face, cycle_sign(t, face)[0]) for face in odd_skeleton(t)]


class Error(Exception):
    pass


class NotConeFieldError(Error):
    def __init__(self, kind: MeshKind) -> None:
        super().__init__(f"two-valued extension needs a cone field, got {kind.name.lower()}")


class TilingMismatchError(Error):
    def __init__(self) -> None:
        super().__init__("field domain is not the cone over the base cell of the tiling")


class NonVanishingTraceError(Error):
    def __init__(self, value: float) -> None:
        super().__init__(f"field does not vanish on flat faces (max {value:.3e})")


class RadiusOutOfRangeError(Error):
    def __init__(self, r: float) -> None:
        super().__init__(f"radius {r} leaves the meshed ball")


class TrivialFieldError(Error):
    def __init__(self, center: np.ndarray) -> None:
        super().__init__(f"boundary integral vanishes about {center.tolist()}")


class IllConditionedFitError(Error):
    def __init__(self, description: str) -> None:
        super().__init__(f"leading coefficient fit failed: {description}")
