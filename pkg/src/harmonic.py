import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.special
from scipy.sparse.linalg import splu

from .discretize import Mesh, MeshKind
from .fem import PointLocator, SphericalLocator, assemble_stiffness, reduce_dirichlet
from .spectral import EigenPair, indicial_exponents

_series_limit = 20.0
_max_frequency = 500.0
_series_tolerance = 1e-16
_max_series_terms = 400

ModeKey = tuple[int, tuple[int, ...]]


@dataclass(kw_only=True)
class ModalBoundaryData:
    """Coefficients a_{l,k} of boundary data in the eigenmode x torus Fourier basis.

    Keys are (l, k) with l the 1-based eigenmode index and k an integer vector
    of length `torus_dim` (the empty tuple without a torus factor).
    """

    coefficients: dict[ModeKey, float]
    torus_dim: int = 0


@dataclass(kw_only=True)
class TorusGrid:
    period: float
    points: np.ndarray

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(kw_only=True)
class VolumeField:
    mesh: Mesh
    values: np.ndarray
    origin: str
    torus: TorusGrid | None = None


@dataclass(kw_only=True)
class RadialFit:
    exponent: float
    amplitude: float
    radii: np.ndarray
    amplitudes: np.ndarray


def single_mode(index: int, k: tuple[int, ...] = (), amplitude: float = 1.0) -> ModalBoundaryData:
    return ModalBoundaryData(coefficients={(index, tuple(k)): amplitude}, torus_dim=len(k))


def torus_grid(dim: int, per_axis: int, period: float = 2.0 * math.pi) -> TorusGrid:
    if dim < 1 or per_axis < 1:
        raise InvalidTorusGridError(dim, per_axis)
    axis = np.arange(per_axis) * (period / per_axis)
    points = np.array(list(itertools.product(axis, repeat=dim)), dtype=float)
    return TorusGrid(period=period, points=points)


def torus_mode(k: tuple[int, ...], z: np.ndarray, period: float = 2.0 * math.pi) -> np.ndarray:
    """Real Fourier basis: cos(k·z) if the first nonzero entry of k is positive, else sin(−k·z)."""
    wave = (2.0 * math.pi / period) * (np.atleast_2d(z) @ np.asarray(k, dtype=float))
    leading = next((c for c in k if c != 0), 0)
    if leading >= 0:
        return np.cos(wave)
    return np.sin(-wave)


def radial_profile_torus(
    lam: float,
    k: tuple[int, ...],
    r: np.ndarray | float,
    period: float = 2.0 * math.pi,
) -> np.ndarray:
    """Regular solution of u'' + 2u'/r − λu/r² − |κ|²u = 0 normalized to 1 at r = 1.

    κ = 2πk/period. For κ = 0 this is r^γ⁺; otherwise r^{−1/2} I_ν(κr)/I_ν(κ)
    with ν = √(λ + 1/4).
    """
    if not lam > 0.0:
        raise InvalidEigenvalueError(lam)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0) or np.any(r > 1.0 + 1e-12):
        raise RadiusOutOfRangeError(float(r.min()), float(r.max()))
    nu = math.sqrt(lam + 0.25)
    kappa = (2.0 * math.pi / period) * float(np.linalg.norm(np.asarray(k, dtype=float)))
    if kappa == 0.0:
        return r ** (nu - 0.5)
    if kappa > _max_frequency:
        raise UnsupportedFrequencyError(kappa)
    if kappa <= _series_limit:
        return r ** (nu - 0.5) * _bessel_series(nu, kappa * r) / _bessel_series(nu, kappa)
    # scaled Bessel functions keep e^{κ} out of both numerator and denominator
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (
            scipy.special.ive(nu, kappa * r)
            / scipy.special.ive(nu, kappa)
            * np.exp(kappa * (r - 1.0))
            / np.sqrt(r)
        )
    return np.where(r > 0.0, ratio, 0.0)


def _bessel_series(nu: float, x: np.ndarray | float) -> np.ndarray:
    """Σ_m (x²/4)^m / (m! (ν+1)_m), i.e. I_ν(x)·Γ(ν+1)·(x/2)^{−ν}."""
    quarter = np.asarray(x, dtype=float) ** 2 / 4.0
    term = np.ones_like(quarter)
    total = np.ones_like(quarter)
    for m in range(_max_series_terms):
        term = term * quarter / ((m + 1) * (m + nu + 1))
        total = total + term
        if np.all(term <= _series_tolerance * total):
            break
    return total


def radial_residual(
    lam: float,
    k: tuple[int, ...],
    r: np.ndarray,
    step: float = 1e-3,
    period: float = 2.0 * math.pi,
) -> np.ndarray:
    """Five-point finite-difference residual of the separated radial equation."""
    kappa = (2.0 * math.pi / period) * float(np.linalg.norm(np.asarray(k, dtype=float)))
    r = np.asarray(r, dtype=float)
    values = [radial_profile_torus(lam, k, r + j * step, period) for j in (-2, -1, 0, 1, 2)]
    first = (values[0] - 8.0 * values[1] + 8.0 * values[3] - values[4]) / (12.0 * step)
    second = (
        -values[0] + 16.0 * values[1] - 30.0 * values[2] + 16.0 * values[3] - values[4]
    ) / (12.0 * step**2)
    return second + 2.0 * first / r - (lam / r**2 + kappa**2) * values[2]


def poisson_extend(eigs: list[EigenPair], data: ModalBoundaryData, m: Mesh) -> VolumeField:
    """Nodal values of Σ a_l r^{γ_l⁺} φ_l(x/|x|) on a cone mesh."""
    if data.torus_dim != 0:
        raise InvalidModalDataError("torus data passed to the ball extension")
    _check_cone(m)
    values = np.zeros(m.n_nodes)
    if len(data.coefficients) == 0:
        return VolumeField(mesh=m, values=values, origin="poisson_extend")
    r, directions, inner = _polar(m)
    modes = _mode_values(eigs, data, directions[inner])
    for (index, _), coefficient in sorted(data.coefficients.items()):
        gamma = indicial_exponents(eigs[index - 1].lam, 3, 0).gamma_plus
        values[inner] += coefficient * r[inner] ** gamma * modes[index]
    return VolumeField(mesh=m, values=values, origin="poisson_extend")


def poisson_extend_torus(
    eigs: list[EigenPair], data: ModalBoundaryData, m: Mesh, grid: TorusGrid
) -> VolumeField:
    """Nodal values (nodes x torus points) of Σ a_{l,k} R_{l,k}(r) e_k(z) φ_l(y)."""
    if data.torus_dim != grid.dim:
        raise InvalidModalDataError(
            f"data torus dimension {data.torus_dim} does not match grid dimension {grid.dim}"
        )
    _check_cone(m)
    values = np.zeros((m.n_nodes, len(grid.points)))
    if len(data.coefficients) == 0:
        return VolumeField(mesh=m, values=values, origin="poisson_extend_torus", torus=grid)
    r, directions, inner = _polar(m)
    modes = _mode_values(eigs, data, directions[inner])
    for (index, k), coefficient in sorted(data.coefficients.items()):
        profile = radial_profile_torus(eigs[index - 1].lam, k, r[inner], grid.period)
        wave = torus_mode(k, grid.points, grid.period)
        values[inner] += coefficient * np.outer(profile * modes[index], wave)
    return VolumeField(mesh=m, values=values, origin="poisson_extend_torus", torus=grid)


def direct_harmonic_solve(m: Mesh, data: np.ndarray, *, strict: bool = True) -> VolumeField:
    """P1 solution of Δu = 0 on the cone with u = data on the cap and u = 0 on flat faces.

    `data` holds one value per mesh node; only cap entries are read. With
    strict=False data that does not vanish on cap∩flat-face nodes is accepted
    and the cap value wins there.
    """
    _check_cone(m)
    data = np.asarray(data, dtype=float)
    cap = m.tagged("cap")
    flat = m.tagged("flat_face")
    corner = np.intersect1d(cap, flat)
    scale = max(float(np.max(np.abs(data[cap]), initial=0.0)), 1.0)
    if strict and np.any(np.abs(data[corner]) > 1e-12 * scale):
        raise IncompatibleBoundaryDataError(float(np.max(np.abs(data[corner]))))
    fixed = np.zeros(m.n_nodes)
    fixed[cap] = data[cap]
    if strict:
        fixed[flat] = 0.0
    values = _dirichlet_solve(m, fixed)
    return VolumeField(mesh=m, values=values, origin="direct_harmonic_solve")


def _dirichlet_solve(m: Mesh, fixed: np.ndarray) -> np.ndarray:
    stiffness = assemble_stiffness(m.nodes, m.elements)
    free = m.free_mask()
    index = np.flatnonzero(free)
    reduced = reduce_dirichlet(stiffness, free).tocsc()
    load = -(stiffness @ fixed)[index]
    values = fixed.copy()
    if len(index) == 0:
        return values
    try:
        values[index] = splu(reduced).solve(load)
    except RuntimeError as e:
        raise SingularSystemError(str(e)) from e
    residual = np.linalg.norm(reduced @ values[index] - load)
    if residual > 1e-10 * max(float(np.linalg.norm(load)), 1e-300):
        raise SingularSystemError(f"relative residual {residual / np.linalg.norm(load):.3e}")
    return values


def fit_radial_exponent(
    m: Mesh,
    values: np.ndarray,
    window: tuple[float, float] = (0.05, 0.5),
    *,
    n_radii: int = 10,
    n_directions: int = 64,
) -> RadialFit:
    """Log-log fit of the RMS of `values` over fixed directions against the radius."""
    low, high = window
    if not 0.0 < low < high <= 1.0:
        raise InvalidWindowError(low, high)
    directions = _sample_directions(m, n_directions)
    radii = np.geomspace(low, high, n_radii)
    points = (radii[:, None, None] * directions[None, :, :]).reshape(-1, 3)
    locator = PointLocator(m.nodes, m.elements)
    samples = locator.interpolate(values, points).reshape(n_radii, -1)
    amplitudes = np.sqrt(np.mean(samples**2, axis=1))
    if np.any(amplitudes <= 0.0):
        raise InvalidWindowError(low, high)
    slope, intercept = np.polyfit(np.log(radii), np.log(amplitudes), 1)
    return RadialFit(
        exponent=float(slope),
        amplitude=float(math.exp(intercept)),
        radii=radii,
        amplitudes=amplitudes,
    )


def equivariance_defect(m: Mesh, values: np.ndarray) -> float:
    """Largest |value| on flat-face nodes; the odd reflection is continuous iff this is 0."""
    flat = m.tagged("flat_face")
    return float(np.max(np.abs(values[flat]), initial=0.0))


def _sample_directions(m: Mesh, count: int) -> np.ndarray:
    p = m.polytope
    cap = np.setdiff1d(m.tagged("cap"), m.tagged("flat_face"))
    directions = m.nodes[cap]
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    # keep away from the sides so every sample sits strictly inside the cone
    margin = np.min(directions @ p.facet_normals().T, axis=1)
    order = np.argsort(-margin, kind="stable")
    chosen = order[: max(1, len(order) // 2)]
    step = max(1, len(chosen) // count)
    return directions[np.sort(chosen)[::step][:count]]


def _polar(m: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.linalg.norm(m.nodes, axis=1)
    inner = r > 0.0
    directions = np.zeros_like(m.nodes)
    directions[inner] = m.nodes[inner] / r[inner, None]
    return r, directions, inner


def _mode_values(
    eigs: list[EigenPair], data: ModalBoundaryData, directions: np.ndarray
) -> dict[int, np.ndarray]:
    indices = sorted({index for index, _ in data.coefficients})
    for index, k in data.coefficients:
        if not 1 <= index <= len(eigs):
            raise ModeIndexError(index, len(eigs))
        if len(k) != data.torus_dim:
            raise InvalidModalDataError(f"frequency {k} has the wrong length")
    surface = eigs[0].mesh
    locator = SphericalLocator(surface.nodes, surface.elements)
    return {index: locator.interpolate(eigs[index - 1].phi, directions) for index in indices}


def _check_cone(m: Mesh) -> None:
    if m.kind != MeshKind.CONE:
        raise NotConeMeshError(m.kind)


class Error(Exception):
    pass


class NotConeMeshError(Error):
    def __init__(self, kind: MeshKind) -> None:
        super().__init__(f"harmonic extension needs a cone mesh, got {kind.name.lower()}")


class ModeIndexError(Error):
    def __init__(self, index: int, available: int) -> None:
        super().__init__(f"mode index {index} out of range; {available} eigenpairs available")


class InvalidModalDataError(Error):
    def __init__(self, description: str) -> None:
        super().__init__(description)


class InvalidEigenvalueError(Error):
    def __init__(self, lam: float) -> None:
        super().__init__(f"radial profile needs a positive eigenvalue, got {lam}")


class RadiusOutOfRangeError(Error):
    def __init__(self, low: float, high: float) -> None:
        super().__init__(f"radii must lie in [0, 1], got [{low}, {high}]")


class UnsupportedFrequencyError(Error):
    def __init__(self, kappa: float) -> None:
        super().__init__(f"torus frequency |k|={kappa} exceeds the supported range {_max_frequency}")


class InvalidTorusGridError(Error):
    def __init__(self, dim: int, per_axis: int) -> None:
        super().__init__(f"invalid torus grid: dim={dim}, points per axis={per_axis}")


class IncompatibleBoundaryDataError(Error):
    def __init__(self, value: float) -> None:
        super().__init__(f"cap data does not vanish on flat faces (max {value:.3e})")


class SingularSystemError(Error):
    def __init__(self, description: str) -> None:
        super().__init__(f"harmonic solve failed: {description}")


class InvalidWindowError(Error):
    def __init__(self, low: float, high: float) -> None:
        super().__init__(f"cannot fit over radial window ({low}, {high})")
