import argparse
import math
import os
import re
import sys
from typing import NoReturn

import numpy as np
from termcolor import colored

from . import bifurcate, branch, config, discretize, fem, harmonic, mse, spectral, tiling, warp, writers
from .bifurcate import (
    continue_branch,
    dirichlet_modes,
    predicted_crossings,
    solve_warped,
    toy_domain,
    transversality,
)
from .branch import (
    extend_two_valued,
    face_gradient_jump,
    frequency_drop,
    leading_coefficient_fit,
    regular_grid,
    sample_sheets,
)
from .config import RunConfig, config_schema, load_config
from .discretize import (
    Mesh,
    hemisphere,
    mesh_cone,
    mesh_cube,
    mesh_spherical_polytope,
    refine,
    tetra_face,
)
from .harmonic import (
    ModalBoundaryData,
    VolumeField,
    direct_harmonic_solve,
    equivariance_defect,
    fit_radial_exponent,
    poisson_extend,
    poisson_extend_torus,
    torus_grid,
    torus_mode,
)
from .mse import (
    BoundaryData,
    SolveOptions,
    SolveReport,
    affine_boundary_data,
    area_functional,
    barrier_check,
    eigen_boundary_data,
    gradient_decay_fit,
    solve_mse,
    tune_barrier_constant,
    value_decay_fit,
)
from .spectral import (
    dirichlet_eigs,
    eigen_sequence,
    equivariant_check,
    indicial_exponents,
    vertex_frame,
)
from .tiling import (
    SphericalPolytope,
    Tiling,
    build_simplex_tiling,
    build_tiling,
    cell_area,
    cycle_sign,
    dump_tiling,
    odd_skeleton,
    sphere_area,
    validate,
)
from .warp import warp_model
from .writers import ReportEntry, Table, write_csv, write_report, write_vtk, write_workbook

_error_mark = "[" + colored("ERROR", "red", attrs=["bold"]) + "] "
_warning_mark = "[" + colored("WARNING", "yellow", attrs=["bold"]) + "] "
_info_mark = "[" + colored("INFO", "green", attrs=["bold"]) + "] "

_usage_status = 1
_nonconvergence_status = 2

_nonconvergence_errors = (
    spectral.EigenSolverError,
    harmonic.SingularSystemError,
    mse.NewtonDivergenceError,
    bifurcate.NewtonDivergenceError,
    bifurcate.ContinuationError,
)

_input_errors = (
    tiling.Error,
    discretize.Error,
    fem.Error,
    spectral.Error,
    harmonic.Error,
    mse.Error,
    branch.Error,
    warp.Error,
    bifurcate.Error,
    writers.Error,
    config.Error,
)

_common_keys = ("output", "verbose", "xlsx")

_affine_gradient = np.array([1.0, -0.5, 0.25])
_monotone_slack = 1e-4
_snapshot_count = 5
_vtk_torus_slices = 8


def main() -> None:
    parser = _make_parser()
    namespace = parser.parse_args(sys.argv[1:])
    subcommand = namespace.subcommand

    overrides: dict[str, str] = {}
    for key in config_schema(subcommand)["properties"]:
        if key == "verbose":
            continue
        value = getattr(namespace, key, None)
        if value is not None:
            overrides[key] = value[0]
    if namespace.verbose:
        overrides["verbose"] = "true"
    config_file_name = namespace.config[0] if namespace.config is not None else None

    try:
        run_config = load_config(config_file_name, overrides, subcommand)
    except config.Error as e:
        _fail(_usage_status, "config", str(e))

    sys.exit(run(run_config))


def run(run_config: RunConfig) -> int:
    """Execute one pipeline stage and write its artifacts; returns the exit status."""
    stage = _Stage(run_config)
    status = 0
    try:
        os.makedirs(run_config.output, exist_ok=True)
        _pipelines[run_config.subcommand](stage, run_config)
    except _nonconvergence_errors as e:
        status = _nonconvergence_status
        _report_error(e)
    except _input_errors as e:
        status = _usage_status
        _report_error(e)
    except OSError as e:
        _report_failure("io", str(e))
        return _usage_status

    for warning in stage.warnings:
        sys.stderr.write(_warning_mark + warning + "\n")
    try:
        stage.finish()
    except (OSError, writers.Error) as e:
        _report_failure("io", str(e))
        return _usage_status
    return status


class _Stage:
    """Collects the tables, report entries and warnings of one run."""

    __slots__ = (
        "_config",
        "_tables",
        "_entries",
        "warnings",
    )

    def __init__(self, run_config: RunConfig) -> None:
        self._config = run_config
        self._tables: list[Table] = []
        self._entries: list[ReportEntry] = [
            ReportEntry(key="subcommand", value=run_config.subcommand),
            ReportEntry(key="seed", value=run_config.seed),
        ]
        self.warnings: list[str] = []

    def path(self, file_name: str) -> str:
        return os.path.join(self._config.output, file_name)

    def table(self, name: str, header: list[str]) -> Table:
        table = Table(name=name, header=header)
        self._tables.append(table)
        return table

    def report(
        self,
        key: str,
        value: object,
        *,
        mesh: Mesh | None = None,
        tolerance: float | None = None,
    ) -> None:
        self._entries.append(
            ReportEntry(
                key=key,
                value=value,
                level=mesh.level if mesh is not None else None,
                h=mesh.h if mesh is not None else None,
                tolerance=tolerance,
            )
        )

    def info(self, message: str) -> None:
        if self._config.verbose:
            sys.stderr.write(_info_mark + message + "\n")

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def write_field(self, file_name: str, m: Mesh, fields: dict[str, np.ndarray]) -> None:
        write_vtk(self.path(file_name), m, fields, title=f"branchlab {self._config.subcommand}")

    def finish(self) -> None:
        for table in self._tables:
            write_csv(self.path(table.name + ".csv"), table)
        write_report(self.path(self._config.subcommand + "_report.txt"), self._entries)
        if self._config.xlsx is not None:
            write_workbook(self._config.xlsx, self._tables)


def _run_tile(stage: _Stage, run_config: RunConfig) -> None:
    if run_config.domain == "hemisphere":
        t = build_tiling(hemisphere(), strict=False)
    else:
        t = build_simplex_tiling(run_config.n)
    stage.info(f"group of order {len(t.group)} with {len(t.cells)} cells")
    with open(stage.path("tiling.txt"), "w", encoding="utf-8") as f:
        f.write(dump_tiling(t))

    cells = stage.table("tile_cells", ["cell", "parity", "area", "word"])
    total_area = 0.0
    for j in range(len(t.cells)):
        element = t.transport(j)
        area = cell_area(t, j) if t.n <= 3 else math.nan
        total_area += area
        cells.append(j, element.parity, area, " ".join(str(w) for w in element.word))

    odd = stage.table("tile_odd_skeleton", ["face", "dimension", "vertices", "cells", "sign"])
    faces = odd_skeleton(t)
    for i, face in enumerate(faces):
        sign, _ = cycle_sign(t, face)
        odd.append(
            i,
            face.dimension,
            " ".join(str(v) for v in face.vertices),
            " ".join(str(c) for c in face.cells),
            sign,
        )

    stage.report("n", t.n)
    stage.report("group_order", len(t.group))
    stage.report("cells", len(t.cells))
    stage.report("odd_faces", len(faces))
    if t.n <= 3:
        stage.report("area_defect", abs(total_area - sphere_area(t.n)), tolerance=1e-10)
    for problem in validate(t):
        stage.warn(problem)


def _run_eig(stage: _Stage, run_config: RunConfig) -> None:
    p = _polytope(run_config.domain)
    sequence = eigen_sequence(
        p,
        run_config.h,
        run_config.grading,
        run_config.refine + 1,
        run_config.count,
        tolerance=run_config.eig_tolerance,
    )
    pairs = sequence.finest
    m = pairs[0].mesh
    stage.info(f"finest mesh: {m.n_nodes} nodes, h={m.h:.4g}")

    levels = stage.table("eig_levels", ["level", "h", "index", "lambda"])
    for level, (h, row) in enumerate(zip(sequence.h, sequence.values)):
        for index, value in enumerate(row, start=1):
            levels.append(level, h, index, value)
    for index in range(sequence.values.shape[1]):
        column = sequence.values[:, index]
        if np.any(np.diff(column) > run_config.eig_tolerance * column[:-1]):
            stage.warn(f"eigenvalue {index + 1} does not decrease under refinement")

    spectrum = stage.table(
        "eig_spectrum",
        [
            "index",
            "lambda",
            "extrapolated",
            "order",
            "gamma_minus",
            "gamma_plus",
            "vertex_exponent",
        ],
    )
    for pair in pairs:
        exponents = indicial_exponents(pair.lam, 3, 0)
        check = equivariant_check(pair)
        for warning in check.warnings:
            stage.warn(f"eigenfunction {pair.index}: {warning}")
        vertex_exponent = check.vertex_fits[0].exponent if len(check.vertex_fits) >= 1 else math.nan
        spectrum.append(
            pair.index,
            pair.lam,
            sequence.extrapolated[pair.index - 1],
            sequence.orders[pair.index - 1],
            exponents.gamma_minus,
            exponents.gamma_plus,
            vertex_exponent,
        )
        stage.report(f"lambda_{pair.index}", pair.lam, mesh=m, tolerance=run_config.eig_tolerance)
        stage.report(f"max_trace_{pair.index}", check.max_trace, mesh=m, tolerance=run_config.eig_tolerance)
    stage.report(
        "lambda_1_extrapolated",
        sequence.extrapolated[0],
        mesh=m,
        tolerance=run_config.eig_tolerance,
    )
    stage.write_field(
        "eigenfunctions.vtk", m, {f"phi_{pair.index}": pair.phi for pair in pairs}
    )


def _run_harmonic(stage: _Stage, run_config: RunConfig) -> None:
    p = _polytope(run_config.domain)
    surface = _refined(mesh_spherical_polytope(p, run_config.h, run_config.grading), run_config.refine)
    cone = _refined(mesh_cone(p, run_config.h, run_config.grading), run_config.refine)
    data = _parse_modes(run_config.modes, run_config.torus_dim)
    needed = max((index for index, _ in data.coefficients), default=1)
    eigs = dirichlet_eigs(surface, max(run_config.count, needed), tolerance=run_config.eig_tolerance)
    stage.info(f"cone mesh: {cone.n_nodes} nodes, {len(eigs)} boundary modes")
    tolerance = run_config.eig_tolerance

    if run_config.torus_dim == 0:
        extension = poisson_extend(eigs, data, cone)
        direct = direct_harmonic_solve(cone, extension.values)
        scale = max(float(np.sqrt(np.mean(extension.values**2))), 1e-300)
        difference = float(np.sqrt(np.mean((direct.values - extension.values) ** 2))) / scale
        stage.report("direct_relative_difference", difference, mesh=cone, tolerance=tolerance)
        stage.report(
            "equivariance_defect",
            equivariance_defect(cone, extension.values),
            mesh=cone,
            tolerance=tolerance,
        )
        stage.write_field(
            "harmonic_field.vtk", cone, {"poisson": extension.values, "direct": direct.values}
        )
    else:
        grid = torus_grid(run_config.torus_dim, run_config.torus_points, run_config.period)
        extension = poisson_extend_torus(eigs, data, cone, grid)
        slices = min(len(grid.points), _vtk_torus_slices)
        stage.write_field(
            "harmonic_field.vtk",
            cone,
            {f"u_z{j}": extension.values[:, j] for j in range(slices)},
        )

    decay = stage.table(
        "harmonic_decay",
        ["mode", "k", "coefficient", "lambda", "gamma_plus", "fitted_exponent", "amplitude"],
    )
    for (index, k), coefficient in sorted(data.coefficients.items()):
        single = ModalBoundaryData(coefficients={(index, k): coefficient}, torus_dim=len(k))
        values = _single_mode_values(eigs, single, cone, run_config)
        gamma_plus = indicial_exponents(eigs[index - 1].lam, 3, 0).gamma_plus
        try:
            fit = fit_radial_exponent(cone, values)
        except harmonic.InvalidWindowError as e:
            stage.warn(f"mode {index}: {e}")
            continue
        decay.append(
            index,
            " ".join(str(c) for c in k),
            coefficient,
            eigs[index - 1].lam,
            gamma_plus,
            fit.exponent,
            fit.amplitude,
        )
        stage.report(f"decay_exponent_{index}", fit.exponent, mesh=cone, tolerance=tolerance)


def _single_mode_values(
    eigs: list[spectral.EigenPair],
    data: ModalBoundaryData,
    cone: Mesh,
    run_config: RunConfig,
) -> np.ndarray:
    if data.torus_dim == 0:
        return poisson_extend(eigs, data, cone).values
    grid = torus_grid(data.torus_dim, run_config.torus_points, run_config.period)
    _, k = next(iter(data.coefficients))
    column = int(np.argmax(np.abs(torus_mode(k, grid.points, grid.period))))
    return poisson_extend_torus(eigs, data, cone, grid).values[:, column]


def _parse_modes(texts: list[str], torus_dim: int) -> ModalBoundaryData:
    """Modes are written "<l>=<a>" or, with a torus factor, "<l>@<k1> <k2> ...=<a>"."""
    coefficients: dict[harmonic.ModeKey, float] = {}
    for text in texts:
        head, _, amplitude = text.partition("=")
        index, _, wave = head.partition("@")
        k = tuple(int(c) for c in wave.split())
        if len(k) != torus_dim:
            raise harmonic.InvalidModalDataError(
                f"mode {repr(text)} has {len(k)} torus components, expected {torus_dim}"
            )
        try:
            coefficients[(int(index), k)] = coefficients.get((int(index), k), 0.0) + float(amplitude)
        except ValueError as e:
            raise harmonic.InvalidModalDataError(f"cannot parse mode {repr(text)}") from e
    return ModalBoundaryData(coefficients=coefficients, torus_dim=torus_dim)


def _run_mse(stage: _Stage, run_config: RunConfig) -> None:
    if run_config.data == "affine":
        m = _refined(mesh_cube(max(2, round(1.0 / run_config.h))), run_config.refine)
        g = affine_boundary_data(m, run_config.eps * _affine_gradient)
        u, _ = _solve(stage, m, g, run_config)
        exact = m.nodes @ (run_config.eps * _affine_gradient)
        stage.report(
            "affine_max_error",
            float(np.max(np.abs(u.values - exact))),
            mesh=m,
            tolerance=run_config.tolerance,
        )
        stage.write_field("mse_solution.vtk", m, {"u": u.values})
        return

    p = _polytope(run_config.domain)
    m, g = _eigen_problem(stage, p, run_config)
    u, report = _solve(stage, m, g, run_config)
    stage.write_field("mse_solution.vtk", m, {"u": u.values})
    _decay_fits(stage, p, u, report, run_config)
    _barriers(stage, p, u, run_config)


def _eigen_problem(stage: _Stage, p: SphericalPolytope, run_config: RunConfig) -> tuple[Mesh, BoundaryData]:
    surface = _refined(mesh_spherical_polytope(p, run_config.h, run_config.grading), run_config.refine)
    m = _refined(mesh_cone(p, run_config.h, run_config.grading), run_config.refine)
    pair = dirichlet_eigs(surface, 1, tolerance=run_config.eig_tolerance)[0]
    stage.report("lambda_1", pair.lam, mesh=surface, tolerance=run_config.eig_tolerance)
    stage.info(f"cone mesh: {m.n_nodes} nodes, lambda_1={pair.lam:.6g}")
    return m, eigen_boundary_data(m, pair, run_config.eps)


def _solve(
    stage: _Stage, m: Mesh, g: BoundaryData, run_config: RunConfig
) -> tuple[VolumeField, SolveReport]:
    options = SolveOptions(
        tolerance=run_config.tolerance,
        max_newton=run_config.max_newton,
        step=run_config.step,
    )
    try:
        u, report = solve_mse(m, g, options)
    except mse.NewtonDivergenceError as e:
        _report_solve(stage, m, g, e.report, run_config)
        raise
    _report_solve(stage, m, g, report, run_config)
    stage.report("area", area_functional(m, u.values), mesh=m, tolerance=run_config.tolerance)
    return u, report


def _report_solve(
    stage: _Stage, m: Mesh, g: BoundaryData, report: SolveReport, run_config: RunConfig
) -> None:
    stage.report("generator", g.generator)
    stage.report("eps", run_config.eps)
    stage.report("converged", report.converged)
    stage.report("final_residual", report.final_residual, mesh=m, tolerance=run_config.tolerance)
    stage.report("last_good_scale", report.last_good, mesh=m, tolerance=run_config.tolerance)
    stage.report("boundary_edge_gradient", report.edge_gradient, mesh=m, tolerance=run_config.tolerance)
    stage.report("newton_iterations", len(report.residual_history))
    stage.report("continuation_steps", len(report.continuation_steps))
    if len(report.damping) >= 1:
        stage.report("min_damping", min(report.damping), mesh=m, tolerance=run_config.tolerance)
    history = stage.table("mse_residuals", ["iteration", "residual"])
    for i, residual in enumerate(report.residual_history):
        history.append(i, residual)


def _decay_fits(
    stage: _Stage,
    p: SphericalPolytope,
    u: VolumeField,
    report: SolveReport,
    run_config: RunConfig,
) -> None:
    decay = stage.table("mse_decay", ["stratum", "quantity", "exponent", "amplitude", "samples"])
    strata = ["origin"] + [f"edge:{k}" for k in range(len(p.vertices))]
    for stratum in strata:
        try:
            fit = gradient_decay_fit(u, stratum)
        except mse.InsufficientSamplesError as e:
            stage.warn(str(e))
            continue
        decay.append(stratum, "gradient", fit.exponent, fit.amplitude, len(fit.distances))
        report.decay_fits[f"gradient:{stratum}"] = fit.exponent
        stage.report(f"gradient_decay_{stratum}", fit.exponent, mesh=u.mesh, tolerance=run_config.tolerance)
    try:
        radial = value_decay_fit(u, "origin")
    except harmonic.InvalidWindowError as e:
        stage.warn(str(e))
        return
    decay.append("origin", "value", radial.exponent, radial.amplitude, len(radial.radii))
    report.decay_fits["value:origin"] = radial.exponent
    stage.report("value_decay_origin", radial.exponent, mesh=u.mesh, tolerance=run_config.tolerance)


def _barriers(stage: _Stage, p: SphericalPolytope, u: VolumeField, run_config: RunConfig) -> None:
    barrier = stage.table(
        "mse_barrier", ["edge", "beta", "gamma", "constant", "margin", "checked", "passed"]
    )
    for k in range(len(p.vertices)):
        beta = vertex_frame(p, k)[3]
        if math.pi / beta <= 1.0 + 1e-9:
            stage.warn(f"edge {k}: opening {beta:.6g} admits no barrier exponent")
            continue
        gamma = 0.5 * (1.0 + math.pi / beta)
        constant = tune_barrier_constant(u, k, beta, gamma)
        result = barrier_check(u, k, beta, gamma, constant, tolerance=run_config.tolerance)
        barrier.append(k, beta, gamma, constant, result.margin, result.checked, result.passed)
        if not result.passed:
            stage.warn(f"edge {k}: barrier violated by {-result.margin:.3e}")


def _run_branch(stage: _Stage, run_config: RunConfig) -> None:
    p = _polytope(run_config.domain)
    t = build_tiling(p, strict=run_config.domain != "hemisphere")
    m, g = _eigen_problem(stage, p, run_config)
    u, _ = _solve(stage, m, g, run_config)
    f = extend_two_valued(u, t)
    workers = run_config.workers if run_config.workers > 1 else None
    tolerance = run_config.tolerance

    frequencies = stage.table(
        "branch_frequency", ["center", "cx", "cy", "cz", "r", "frequency", "dirichlet", "height"]
    )
    centers = [("origin", np.zeros(3))]
    ray_center = run_config.ray_height * p.vertices[0]
    ray_radii = [r for r in run_config.radii if r <= 1.0 - run_config.ray_height]
    if len(ray_radii) >= 1:
        centers.append(("ray:0", ray_center))
    else:
        stage.warn(f"no radius fits in the unit ball around height {run_config.ray_height}")
    for name, center in centers:
        radii = run_config.radii if name == "origin" else ray_radii
        stage.info(f"frequency about {name} at {len(radii)} radii")
        sample = branch.frequency(f, center, radii, workers=workers)
        for r, value, dirichlet, height in zip(sample.radii, sample.values, sample.dirichlet, sample.height):
            frequencies.append(name, *(float(c) for c in center), r, value, dirichlet, height)
        stage.report(f"frequency_{name}_min_r", sample.values[0], mesh=m, tolerance=tolerance)
        drop = frequency_drop(sample)
        stage.report(f"frequency_{name}_monotone", drop <= _monotone_slack)
        stage.report(f"frequency_{name}_max_drop", drop, mesh=m, tolerance=tolerance)
        if drop > _monotone_slack:
            stage.warn(f"frequency about {name} decreases by {drop:.3e}")

    fits = stage.table(
        "branch_fits", ["ray", "exponent", "correlation", "station", "coefficient"]
    )
    window = (run_config.fit_window[0], run_config.fit_window[1])
    for k in _odd_rays(t, p):
        try:
            fit = leading_coefficient_fit(f, k, window=window)
        except branch.IllConditionedFitError as e:
            stage.warn(f"ray {k}: {e}")
            continue
        for station, coefficient in zip(fit.stations, fit.coefficients):
            fits.append(k, fit.exponent, fit.correlation, station, coefficient)
        stage.report(f"leading_exponent_ray_{k}", fit.exponent, mesh=m, tolerance=tolerance)
        stage.report(f"leading_correlation_ray_{k}", fit.correlation, mesh=m, tolerance=tolerance)
    stage.report("face_gradient_jump", face_gradient_jump(f), mesh=m, tolerance=tolerance)

    sheets = stage.table("branch_sheets", ["x", "y", "z", "upper", "lower", "on_branch"])
    sampled = sample_sheets(f, regular_grid(run_config.grid))
    for point, upper, lower, on_branch in zip(sampled.points, sampled.upper, sampled.lower, sampled.on_branch):
        sheets.append(*(float(c) for c in point), upper, lower, bool(on_branch))

    cycles = stage.table("branch_cycles", ["face", "vertices", "cells", "sign"])
    for i, face in enumerate(odd_skeleton(t)):
        sign, _ = cycle_sign(t, face)
        cycles.append(
            i,
            " ".join(str(v) for v in face.vertices),
            " ".join(str(c) for c in face.cells),
            sign,
        )
    stage.write_field("branch_base.vtk", m, {"u": u.values})


def _odd_rays(t: Tiling, p: SphericalPolytope) -> list[int]:
    """Base-cell vertices whose rays lie on the odd skeleton."""
    rays = [t.vertices[face.vertices[0]] for face in odd_skeleton(t) if face.dimension == 0]
    return [
        k
        for k, vertex in enumerate(p.vertices)
        if any(np.linalg.norm(vertex - ray) < 1e-9 for ray in rays)
    ]


def _run_bifurcate(stage: _Stage, run_config: RunConfig) -> None:
    model = warp_model(run_config.warp, run_config.n)
    if run_config.n == 1:
        m = _refined(toy_domain(run_config.h), run_config.refine)
    else:
        p = _polytope(run_config.domain)
        m = _refined(mesh_spherical_polytope(p, run_config.h, run_config.grading), run_config.refine)
    tolerance = run_config.tolerance
    stage.info(f"{model.selection} warp, n={model.n}, {m.n_nodes} nodes")

    values, vectors = dirichlet_modes(m, run_config.count)
    predicted = predicted_crossings(values, model)
    crossings = stage.table("bifurcate_crossings", ["index", "mu", "predicted_lambda"])
    for j, (mu, lam) in enumerate(zip(values, predicted), start=1):
        crossings.append(j, float(mu), lam)
    stage.report("predicted_lambda_1", predicted[0], mesh=m, tolerance=tolerance)

    slope = transversality(model, (float(values[0]), vectors[:, 0], m))
    stage.report("transversality_closed_form", slope.closed_form, mesh=m, tolerance=tolerance)
    stage.report("transversality_fd_slope", slope.fd_slope, mesh=m, tolerance=tolerance)

    result = continue_branch(
        model,
        m,
        (run_config.lam_min, run_config.lam_max),
        scan_step=run_config.scan_step,
        step=run_config.arc_step,
        tolerance=tolerance,
        workers=run_config.workers if run_config.workers > 1 else None,
    )
    for warning in result.warnings:
        stage.warn(warning)
    stage.report("crossing", result.crossing, mesh=m, tolerance=1e-9)
    stage.report("crossing_error", abs(result.crossing - predicted[0]), mesh=m, tolerance=1e-9)

    diagram = stage.table(
        "bifurcation", ["branch", "lambda", "amplitude", "stability_index", "residual"]
    )
    for point in result.trivial:
        diagram.append("trivial", point.lam, point.amplitude, point.stability_index, point.residual)
    for point in result.points:
        diagram.append("nontrivial", point.lam, point.amplitude, point.stability_index, point.residual)
    stride = max(1, len(result.points) // _snapshot_count)
    for i in range(0, len(result.points), stride):
        stage.write_field(f"bifurcate_snapshot_{i:03d}.vtk", m, {"u": result.points[i].field.values})

    try:
        exponent = bifurcate.amplitude_exponent(result.points, result.crossing)
    except bifurcate.InsufficientPointsError as e:
        stage.warn(str(e))
    else:
        stage.report("amplitude_exponent", exponent, mesh=m, tolerance=tolerance)

    if run_config.lam_min < result.crossing:
        rng = np.random.default_rng(run_config.seed)
        guess = 1e-2 * rng.standard_normal(m.n_nodes) * m.free_mask()
        try:
            point = solve_warped(model, run_config.lam_min, m, guess, tolerance=tolerance)
        except bifurcate.NewtonDivergenceError as e:
            stage.warn(f"perturbed solve at lambda={run_config.lam_min}: {e}")
        else:
            stage.report("perturbed_amplitude_below_crossing", point.amplitude, mesh=m, tolerance=tolerance)


def _polytope(domain: str) -> SphericalPolytope:
    match domain:
        case "hemisphere":
            return hemisphere()
        case _:
            return tetra_face()


def _refined(m: Mesh, levels: int) -> Mesh:
    for _ in range(levels):
        m = refine(m)
    return m


_pipelines = {
    "tile": _run_tile,
    "eig": _run_eig,
    "harmonic": _run_harmonic,
    "mse": _run_mse,
    "branch": _run_branch,
    "bifurcate": _run_bifurcate,
}


def _reason(e: Exception) -> str:
    name = re.sub(r"Error$", "", type(e).__name__)
    return re.sub(r"(?<!^)(?=[A-Z])", "-", name).lower()


def _report_error(e: Exception) -> None:
    _report_failure(_reason(e), str(e))


def _report_failure(kind: str, detail: str) -> None:
    detail = " ".join(detail.split())
    sys.stderr.write(_error_mark + f"reason={kind} detail={detail}" + "\n")


def _fail(status: int, kind: str, detail: str) -> NoReturn:
    _report_failure(kind, detail)
    sys.exit(status)


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        _fail(_usage_status, "usage", message)


def _make_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="branchlab")
    subparsers = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for subcommand in config.subcommands:
        subparser = subparsers.add_parser(subcommand, help=_subcommand_help[subcommand])
        subparser.add_argument(
            "-c",
            "--config",
            metavar="FILE",
            nargs=1,
            type=str,
            help="key = value configuration file",
        )
        subparser.add_argument(
            "-o",
            "--output",
            metavar="DIR",
            nargs=1,
            type=str,
            help="output directory",
        )
        subparser.add_argument(
            "--xlsx",
            metavar="FILE",
            nargs=1,
            type=str,
            help="also write every table to an excel workbook",
        )
        subparser.add_argument(
            "-v",
            "--verbose",
            action="store_true",
            help="print progress lines",
        )
        for key in config_schema(subcommand)["properties"]:
            if key in _common_keys:
                continue
            subparser.add_argument(
                "--" + key.replace("_", "-"),
                dest=key,
                metavar=key.upper(),
                nargs=1,
                type=str,
                help=_key_help.get(key, key),
            )
    return parser


_subcommand_help = {
    "tile": "build a reflection tiling and its odd skeleton",
    "eig": "Dirichlet eigenvalues of a spherical polytope under refinement",
    "harmonic": "harmonic extension of modal cap data into the cone",
    "mse": "minimal surface equation on the cone",
    "branch": "two-valued extension, frequency and leading-term fits",
    "bifurcate": "bifurcation of minimal graphs in a warped product",
}

_key_help = {
    "domain": "spherical domain",
    "n": "sphere dimension",
    "h": "target mesh size",
    "grading": "grading exponent towards vertices and the origin",
    "refine": "number of uniform refinements (0-6)",
    "count": "number of eigenpairs",
    "eig_tolerance": "eigenpair residual tolerance",
    "modes": "comma separated modes l=a or l@k1 k2=a",
    "torus_dim": "dimension of the torus factor",
    "torus_points": "torus grid points per axis",
    "period": "torus period",
    "data": "boundary data generator",
    "eps": "boundary data scale",
    "tolerance": "nonlinear residual tolerance",
    "step": "initial continuation step",
    "max_newton": "newton iterations per continuation step",
    "radii": "comma separated frequency radii",
    "ray_height": "height of the frequency center on the first ray",
    "fit_window": "comma separated edge distance window of the leading coefficient fit",
    "grid": "sheet sampling grid points per axis",
    "warp": "warp function selection",
    "lam_min": "lower end of the lambda range",
    "lam_max": "upper end of the lambda range",
    "scan_step": "lambda step of the trivial-branch scan",
    "arc_step": "initial arclength step",
    "seed": "random seed",
    "workers": "worker threads",
}


if __name__ == "__main__":
    main()
