import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh, splu

from .discretize import Mesh, MeshKind, mesh_interval
from .fem import assemble, assemble_mass, assemble_stiffness, element_geometry, quadrature, reduce_dirichlet
from .harmonic import VolumeField
from .spectral import EigenPair
from .warp import WarpModel

_dense_limit = 1500
_toy_length = 2.0 * math.pi / 3.0


@dataclass(kw_only=True)
class BranchPoint:
    lam: float
    amplitude: float
    field: VolumeField
    stability_index: int
    residual: float
    iterations: int = 0


@dataclass(kw_only=True)
class TransversalityReport:
    lam: float
    closed_form: float
    fd_slope: float


@dataclass(kw_only=True)
class ContinuationResult:
    crossing: float
    points: list[BranchPoint]
    trivial: list[BranchPoint]
    warnings: list[str] = field(default_factory=list)


class _WarpedAssembler:
    """Area functional A(u) = ∫ f(λu)^{n−1} √(f(λu)² + |∇u|²) and its derivatives.

    Integrals use the degree-two rule of `fem.quadrature`, which is exact for
    the mass-type terms at u = 0.
    """

    __slots__ = (
        "_model",
        "_mesh",
        "_measures",
        "_grads",
        "_bary",
        "_weights",
    )

    def __init__(self, model: WarpModel, m: Mesh) -> None:
        if m.kind not in (MeshKind.INTERVAL, MeshKind.SURFACE):
            raise UnsupportedDomainError(m.kind)
        self._model = model
        self._mesh = m
        self._measures, self._grads = element_geometry(m.nodes, m.elements)
        self._bary, self._weights = quadrature(m.dim)

    def area(self, u: np.ndarray, lam: float) -> float:
        a, _, _, s, root, _ = self._pointwise(u, lam)
        density = a ** (self._model.n - 1) * root
        return float(np.sum(self._measures * (density @ self._weights)))

    def residual(self, u: np.ndarray, lam: float) -> np.ndarray:
        _, _, _, _, _, (fv, fs, _, _, _) = self._pointwise(u, lam)
        gradient = self._gradient(u)
        projected = np.einsum("ed,eid->ei", gradient, self._grads)
        local = np.einsum("eq,qi->ei", fv * self._weights, self._bary)
        local += 2.0 * (fs @ self._weights)[:, None] * projected
        local *= self._measures[:, None]
        result = np.zeros(self._mesh.n_nodes)
        np.add.at(result, self._mesh.elements, local)
        return result

    def jacobian(self, u: np.ndarray, lam: float) -> sp.csr_matrix:
        _, _, _, _, _, (_, fs, fvv, fvs, fss) = self._pointwise(u, lam)
        gradient = self._gradient(u)
        projected = np.einsum("ed,eid->ei", gradient, self._grads)
        w = self._weights
        local = np.einsum("eq,qi,qj->eij", fvv * w, self._bary, self._bary)
        mixed = np.einsum("eq,qi->ei", fvs * w, self._bary)
        local += 2.0 * (mixed[:, :, None] * projected[:, None, :] + projected[:, :, None] * mixed[:, None, :])
        local += 2.0 * (fs @ w)[:, None, None] * (self._grads @ self._grads.transpose(0, 2, 1))
        local += 4.0 * (fss @ w)[:, None, None] * (projected[:, :, None] * projected[:, None, :])
        local *= self._measures[:, None, None]
        return assemble(self._mesh.elements, local, self._mesh.n_nodes)

    def check_domain(self, u: np.ndarray, lam: float) -> None:
        worst = float(np.max(np.abs(u), initial=0.0))
        if worst >= 1.0:
            raise DomainViolationError(f"|u| reaches {worst:.6g}")
        if np.any(self._model.f_lambda(u, lam) <= 0.0):
            raise DomainViolationError("warp factor f(λu) is not positive")

    def _gradient(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("ei,eid->ed", u[self._mesh.elements], self._grads)

    def _pointwise(self, u: np.ndarray, lam: float):
        n = self._model.n
        values = u[self._mesh.elements] @ self._bary.T
        gradient = self._gradient(u)
        s = np.einsum("ed,ed->e", gradient, gradient)[:, None] * np.ones_like(values)
        a = self._model.f_lambda(values, lam)
        a1 = self._model.df_lambda(values, lam)
        a2 = self._model.d2f_lambda(values, lam)
        root = np.sqrt(a**2 + s)
        fv = (n - 1) * a ** (n - 2) * a1 * root + a**n * a1 / root
        fs = a ** (n - 1) / (2.0 * root)
        fss = -(a ** (n - 1)) / (4.0 * root**3)
        fvs = (n - 1) * a ** (n - 2) * a1 / (2.0 * root) - a**n * a1 / (2.0 * root**3)
        fvv = (n - 1) * (
            (n - 2) * a ** (n - 3) * a1**2 * root
            + a ** (n - 2) * a2 * root
            + a ** (n - 1) * a1**2 / root
        )
        fvv += n * a ** (n - 1) * a1**2 / root + a**n * a2 / root - a ** (n + 1) * a1**2 / root**3
        return a, a1, a2, s, root, (fv, fs, fvv, fvs, fss)


def toy_domain(h: float) -> Mesh:
    """Interval of length 2π/3: the fundamental domain of the Z₃ action on S¹."""
    return mesh_interval(_toy_length, h)


def dirichlet_spectrum(m: Mesh, count: int) -> np.ndarray:
    """Smallest Dirichlet eigenvalues μ_j(0) of −Δ on an interval or surface mesh."""
    values, _ = dirichlet_modes(m, count)
    return values


def dirichlet_modes(m: Mesh, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and mass-normalised full-length eigenvectors (one per column)."""
    free = m.free_mask()
    stiffness = reduce_dirichlet(assemble_stiffness(m.nodes, m.elements), free)
    mass = reduce_dirichlet(assemble_mass(m.nodes, m.elements), free)
    values, vectors = _smallest_eigenpairs(stiffness, mass, count, sigma=-1.0)
    full = np.zeros((m.n_nodes, vectors.shape[1]))
    full[free] = vectors
    return values, full


def predicted_crossings(
    eigs: list[EigenPair] | list[float] | np.ndarray,
    model: WarpModel,
    count: int | None = None,
) -> list[float]:
    """λ_j = √(−μ_j(0)/(n f(0) f''(0))); with f(0) = 1 this is √(−μ_j(0)/(n f''(0)))."""
    if not model.fpp0 < 0.0:
        raise NonNegativeCurvatureError(model.fpp0)
    mus = sorted(float(e.lam) if isinstance(e, EigenPair) else float(e) for e in eigs)
    if count is not None:
        mus = mus[:count]
    return [math.sqrt(-mu / (model.n * model.f0 * model.fpp0)) for mu in mus]


def discrete_area(model: WarpModel, lam: float, m: Mesh, u: np.ndarray) -> float:
    return _WarpedAssembler(model, m).area(np.asarray(u, dtype=float), lam)


def warped_residual(model: WarpModel, lam: float, m: Mesh, u: np.ndarray) -> np.ndarray:
    """Gradient of the discrete warped area, zero at Dirichlet nodes."""
    u = np.asarray(u, dtype=float)
    assembler = _WarpedAssembler(model, m)
    assembler.check_domain(u, lam)
    residual = assembler.residual(u, lam)
    residual[m.dirichlet_nodes()] = 0.0
    return residual


def jacobi_matrix(model: WarpModel, lam: float, m: Mesh, u: np.ndarray) -> sp.csr_matrix:
    return _WarpedAssembler(model, m).jacobian(np.asarray(u, dtype=float), lam)


def jacobi_spectrum(
    model: WarpModel, lam: float, m: Mesh, u: np.ndarray, count: int
) -> tuple[np.ndarray, np.ndarray]:
    """Smallest eigenpairs of the Dirichlet-reduced Jacobi matrix relative to the mass matrix."""
    free = m.free_mask()
    matrix = reduce_dirichlet(jacobi_matrix(model, lam, m, u), free)
    mass = reduce_dirichlet(assemble_mass(m.nodes, m.elements), free)
    # every Rayleigh quotient exceeds the most negative zeroth-order coefficient
    sigma = -2.0 * (model.n * lam**2 * abs(model.fpp0) + 1.0)
    values, vectors = _smallest_eigenpairs(matrix, mass, count, sigma)
    full = np.zeros((m.n_nodes, vectors.shape[1]))
    full[free] = vectors
    return values, full


def stability_index(
    model: WarpModel, lam: float, m: Mesh, u: np.ndarray, count: int = 12
) -> int:
    """Number of negative eigenvalues of the reduced Jacobi matrix (counted among `count`)."""
    values, _ = jacobi_spectrum(model, lam, m, u, count)
    return int(np.count_nonzero(values < -1e-10 * max(1.0, abs(values[-1]))))


def _smallest_eigenpairs(
    matrix: sp.spmatrix, mass: sp.spmatrix, count: int, sigma: float
) -> tuple[np.ndarray, np.ndarray]:
    size = matrix.shape[0]
    count = min(count, size - 1) if size > 1 else 1
    if size <= _dense_limit:
        values, vectors = scipy.linalg.eigh(
            matrix.toarray(), mass.toarray(), subset_by_index=[0, count - 1]
        )
        return values, vectors
    start = np.ones(size)
    values, vectors = eigsh(
        matrix.tocsc(), k=count, M=mass.tocsc(), sigma=sigma, which="LM", v0=start
    )
    order = np.argsort(values)
    return values[order], vectors[:, order]


def solve_warped(
    model: WarpModel,
    lam: float,
    m: Mesh,
    guess: np.ndarray,
    *,
    tolerance: float = 1e-10,
    max_iterations: int = 50,
    known: list[np.ndarray] | None = None,
    power: float = 2.0,
    shift: float = 1.0,
    max_halvings: int = 30,
) -> BranchPoint:
    """Damped Newton for the warped equation, deflating the solutions in `known`.

    Each known solution r multiplies the residual by ‖u − r‖_M^{−power} + shift,
    so Newton is repelled from it. Steps are halved until the iterate stays in
    the slab and the deflated residual decreases; convergence is judged on the
    plain residual.
    """
    assembler = _WarpedAssembler(model, m)
    free = m.free_mask()
    index = np.flatnonzero(free)
    mass = reduce_dirichlet(assemble_mass(m.nodes, m.elements), free)
    known = [np.asarray(r, dtype=float)[index] for r in (known or [])]
    u = np.zeros(m.n_nodes)
    u[index] = np.asarray(guess, dtype=float)[index]
    assembler.check_domain(u, lam)

    def deflation(values: np.ndarray) -> tuple[float, np.ndarray]:
        factor = 1.0
        log_gradient = np.zeros(len(index))
        for r in known:
            e = values[index] - r
            norm = math.sqrt(float(e @ (mass @ e)))
            if norm == 0.0:
                return math.inf, log_gradient
            term = norm**-power + shift
            factor *= term
            log_gradient += -power * norm ** (-power - 2.0) * (mass @ e) / term
        return factor, log_gradient

    residual = assembler.residual(u, lam)[index]
    norm = float(np.linalg.norm(residual))
    factor, log_gradient = deflation(u)
    history = [norm]
    for iteration in range(max_iterations):
        if norm < tolerance:
            break
        matrix = reduce_dirichlet(assembler.jacobian(u, lam), free).tocsc()
        try:
            delta = splu(matrix).solve(-residual)
        except RuntimeError as e:
            raise NewtonDivergenceError(history, f"singular Jacobi matrix: {e}") from e
        if len(known) > 0:
            q = float(delta @ log_gradient)
            if abs(1.0 - q) > 1e-12:
                delta = delta / (1.0 - q)
        merit = factor * norm
        damping = 1.0
        for _ in range(max_halvings):
            trial = u.copy()
            trial[index] += damping * delta
            try:
                assembler.check_domain(trial, lam)
            except DomainViolationError:
                damping /= 2.0
                continue
            trial_residual = assembler.residual(trial, lam)[index]
            trial_norm = float(np.linalg.norm(trial_residual))
            trial_factor, trial_log_gradient = deflation(trial)
            if np.isfinite(trial_norm) and trial_factor * trial_norm < merit:
                break
            damping /= 2.0
        else:
            raise NewtonDivergenceError(history, "line search failed")
        u, residual, norm = trial, trial_residual, trial_norm
        factor, log_gradient = trial_factor, trial_log_gradient
        history.append(norm)
    else:
        if norm >= tolerance:
            raise NewtonDivergenceError(history, "iteration limit reached")
    return _branch_point(model, lam, m, u, norm, len(history) - 1)


def _branch_point(
    model: WarpModel, lam: float, m: Mesh, u: np.ndarray, residual: float, iterations: int
) -> BranchPoint:
    mass = assemble_mass(m.nodes, m.elements)
    return BranchPoint(
        lam=float(lam),
        amplitude=math.sqrt(max(float(u @ (mass @ u)), 0.0)),
        field=VolumeField(mesh=m, values=u, origin="solve_warped"),
        stability_index=stability_index(model, lam, m, u),
        residual=residual,
        iterations=iterations,
    )


def continue_branch(
    model: WarpModel,
    m: Mesh,
    lam_range: tuple[float, float],
    *,
    scan_step: float = 0.02,
    step: float = 0.02,
    max_step: float = 0.05,
    min_step: float = 1e-4,
    crossing_tolerance: float = 1e-9,
    tolerance: float = 1e-10,
    max_points: int = 60,
    slab_limit: float = 0.9,
    workers: int | None = None,
) -> ContinuationResult:
    """Detect the first crossing in `lam_range` on the trivial branch and follow the new branch.

    The crossing is where the stability index of u ≡ 0 increases, refined by
    bisection on the corresponding Jacobi eigenvalue. The branch leaves
    (0, λ*) along the critical eigenvector and is followed by pseudo-arclength
    continuation in (u, λ) with the mass inner product; `step` is an arclength.
    """
    low, high = lam_range
    if not low < high:
        raise ContinuationError([], f"empty parameter range ({low}, {high})")
    zero = np.zeros(m.n_nodes)
    scan = np.linspace(low, high, max(2, math.ceil((high - low) / scan_step) + 1))

    def trivial_point(lam: float) -> BranchPoint:
        return BranchPoint(
            lam=float(lam),
            amplitude=0.0,
            field=VolumeField(mesh=m, values=zero, origin="trivial"),
            stability_index=stability_index(model, lam, m, zero),
            residual=0.0,
        )

    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            trivial = list(executor.map(trivial_point, scan))
    else:
        trivial = [trivial_point(lam) for lam in scan]
    crossing_slot = next(
        (k for k in range(1, len(trivial)) if trivial[k].stability_index > trivial[k - 1].stability_index),
        None,
    )
    if crossing_slot is None:
        raise NoCrossingError(low, high)
    which = trivial[crossing_slot - 1].stability_index
    a, b = scan[crossing_slot - 1], scan[crossing_slot]

    def critical(lam: float) -> float:
        values, _ = jacobi_spectrum(model, lam, m, zero, which + 1)
        return float(values[which])

    while b - a > crossing_tolerance:
        middle = 0.5 * (a + b)
        if critical(middle) > 0.0:
            a = middle
        else:
            b = middle
    crossing = 0.5 * (a + b)
    _, vectors = jacobi_spectrum(model, crossing, m, zero, which + 1)
    points, warnings = _follow(
        model,
        m,
        crossing,
        vectors[:, which],
        (low, high),
        step=step,
        max_step=max_step,
        min_step=min_step,
        tolerance=tolerance,
        max_points=max_points,
        slab_limit=slab_limit,
    )
    points.sort(key=lambda p: p.lam)
    return ContinuationResult(crossing=crossing, points=points, trivial=trivial, warnings=warnings)


def _follow(
    model: WarpModel,
    m: Mesh,
    crossing: float,
    direction: np.ndarray,
    lam_range: tuple[float, float],
    *,
    step: float,
    max_step: float,
    min_step: float,
    tolerance: float,
    max_points: int,
    slab_limit: float,
) -> tuple[list[BranchPoint], list[str]]:
    assembler = _WarpedAssembler(model, m)
    free = m.free_mask()
    index = np.flatnonzero(free)
    mass = reduce_dirichlet(assemble_mass(m.nodes, m.elements), free)

    def inner(x: np.ndarray, y: np.ndarray) -> float:
        return float(x[:-1] @ (mass @ y[:-1]) + x[-1] * y[-1])

    def residual(x: np.ndarray) -> np.ndarray:
        u = np.zeros(m.n_nodes)
        u[index] = x[:-1]
        return assembler.residual(u, x[-1])[index]

    phi = direction[index]
    phi = phi / math.sqrt(float(phi @ (mass @ phi)))
    if np.sum(phi) < 0.0:
        phi = -phi
    previous = np.append(np.zeros(len(index)), crossing)
    tangent = np.append(phi, 0.0)
    points: list[BranchPoint] = []
    warnings: list[str] = []
    ds = step
    while len(points) < max_points:
        predicted = previous + ds * tangent
        corrected = _correct(assembler, m, index, mass, residual, predicted, tangent, tolerance)
        if corrected is None:
            ds /= 2.0
            if ds < min_step:
                raise ContinuationError(points, f"step fell below {min_step:g}")
            continue
        x, iterations, norm = corrected
        lam = float(x[-1])
        if not lam_range[0] <= lam <= lam_range[1]:
            break
        u = np.zeros(m.n_nodes)
        u[index] = x[:-1]
        points.append(_branch_point(model, lam, m, u, norm, iterations))
        if np.max(np.abs(u)) > slab_limit:
            warnings.append(f"branch stopped at slab limit {slab_limit:g} at lambda={lam:.6g}")
            break
        secant = x - previous
        tangent = secant / math.sqrt(inner(secant, secant))
        previous = x
        if iterations <= 3:
            ds = min(1.5 * ds, max_step)
    else:
        warnings.append(f"branch stopped after {max_points} points")
    return points, warnings


def _correct(
    assembler: _WarpedAssembler,
    m: Mesh,
    index: np.ndarray,
    mass: sp.spmatrix,
    residual,
    predicted: np.ndarray,
    tangent: np.ndarray,
    tolerance: float,
    max_iterations: int = 15,
) -> tuple[np.ndarray, int, float] | None:
    """Newton on the bordered system R(u, λ) = 0, ⟨τ, x − x_pred⟩ = 0."""
    x = predicted.copy()
    border = np.append(mass @ tangent[:-1], tangent[-1])
    for iteration in range(max_iterations + 1):
        u = np.zeros(m.n_nodes)
        u[index] = x[:-1]
        try:
            assembler.check_domain(u, x[-1])
        except DomainViolationError:
            return None
        r = residual(x)
        constraint = float(border @ (x - predicted))
        norm = float(np.linalg.norm(r))
        if norm < tolerance and abs(constraint) < tolerance:
            return x, iteration, norm
        if iteration == max_iterations:
            return None
        epsilon = 1e-6 * max(1.0, abs(x[-1]))
        plus, minus = x.copy(), x.copy()
        plus[-1] += epsilon
        minus[-1] -= epsilon
        column = (residual(plus) - residual(minus)) / (2.0 * epsilon)
        jacobian = reduce_dirichlet(assembler.jacobian(u, x[-1]), m.free_mask())
        bordered = sp.bmat(
            [[jacobian, sp.csr_matrix(column[:, None])], [sp.csr_matrix(border[None, :-1]), sp.csr_matrix([[border[-1]]])]],
            format="csc",
        )
        try:
            delta = splu(bordered).solve(-np.append(r, constraint))
        except RuntimeError:
            return None
        if not np.all(np.isfinite(delta)):
            return None
        x = x + delta
    return None


def transversality(
    model: WarpModel, pair: EigenPair | tuple[float, np.ndarray, Mesh], step: float = 1e-3
) -> TransversalityReport:
    """Slope of the top Jacobi-operator eigenvalue −μ₁(λ) at the first crossing.

    The closed form is −2nλ₁f(0)^{n−1}f''(0)‖φ₁‖²_M; the finite-difference slope
    comes from the discrete trivial-branch Jacobi matrix.
    """
    if isinstance(pair, EigenPair):
        lam, phi, m = pair.lam, pair.phi, pair.mesh
    else:
        lam, phi, m = pair
    lam1 = predicted_crossings([lam], model)[0]
    mass = assemble_mass(m.nodes, m.elements)
    closed_form = -2.0 * model.n * lam1 * model.f0 ** (model.n - 1) * model.fpp0 * float(phi @ (mass @ phi))
    zero = np.zeros(m.n_nodes)
    above, _ = jacobi_spectrum(model, lam1 + step, m, zero, 1)
    below, _ = jacobi_spectrum(model, lam1 - step, m, zero, 1)
    return TransversalityReport(
        lam=lam1,
        closed_form=closed_form,
        fd_slope=-float(above[0] - below[0]) / (2.0 * step),
    )


def amplitude_exponent(
    points: list[BranchPoint], lam1: float, window: tuple[float, float] = (1e-3, 3e-2)
) -> float:
    """Fitted p in amplitude ∝ |λ − λ₁|^p over the points whose distance to λ₁ is in `window`."""
    distance = np.array([abs(p.lam - lam1) for p in points])
    amplitude = np.array([p.amplitude for p in points])
    usable = (distance >= window[0]) & (distance <= window[1]) & (amplitude > 0.0)
    if np.count_nonzero(usable) < 3:
        raise InsufficientPointsError(int(np.count_nonzero(usable)))
    slope, _ = np.polyfit(np.log(distance[usable]), np.log(amplitude[usable]), 1)
    return float(slope)


class Error(Exception):
    pass


class UnsupportedDomainError(Error):
    def __init__(self, kind: MeshKind) -> None:
        super().__init__(f"warped solves run on interval or surface meshes, got {kind.name.lower()}")


class NonNegativeCurvatureError(Error):
    def __init__(self, fpp0: float) -> None:
        super().__init__(f"f''(0)={fpp0} must be negative")


class DomainViolationError(Error):
    def __init__(self, description: str) -> None:
        super().__init__(f"iterate leaves the warped slab: {description}")


class NewtonDivergenceError(Error):
    def __init__(self, history: list[float], description: str) -> None:
        super().__init__(
            f"warped Newton failed after {len(history) - 1} steps ({description}); "
            f"last residual {history[-1]:.3e}"
        )
        self.history = history


class NoCrossingError(Error):
    def __init__(self, low: float, high: float) -> None:
        super().__init__(f"no eigenvalue crossing in [{low}, {high}]")


class ContinuationError(Error):
    def __init__(self, points: list[BranchPoint], description: str) -> None:
        super().__init__(f"continuation aborted after {len(points)} points: {description}")
        self.points = points


class InsufficientPointsError(Error):
    def __init__(self, count: int) -> None:
        super().__init__(f"only {count} branch points inside the fit window")
