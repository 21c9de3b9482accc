import math
from dataclasses import dataclass, field

import numpy as np

_unit_tolerance = 1e-12
_match_tolerance = 1e-8
_max_group_order = 100_000


@dataclass(kw_only=True)
class SphericalPolytope:
    vertices: np.ndarray
    facets: list[tuple[int, ...]]
    dimension: int
    interior: np.ndarray

    def facet_normals(self) -> np.ndarray:
        """Unit normals of the facet hyperplanes, pointing into the polytope."""
        normals = []
        for facet in self.facets:
            _, _, vt = np.linalg.svd(self.vertices[list(facet)].reshape(len(facet), -1))
            normal = vt[-1]
            if normal @ self.interior < 0.0:
                normal = -normal
            normals.append(normal)
        return np.array(normals)

    def contains(self, y: np.ndarray, tolerance: float = 1e-12) -> bool:
        return bool(np.all(self.facet_normals() @ y >= -tolerance))


@dataclass(kw_only=True)
class GroupElement:
    matrix: np.ndarray
    parity: int
    word: tuple[int, ...] = ()

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix


@dataclass(kw_only=True)
class Face:
    vertices: tuple[int, ...]
    cells: list[int]
    dimension: int


@dataclass(kw_only=True)
class Tiling:
    n: int
    vertices: np.ndarray
    cells: list[SphericalPolytope]
    cell_vertices: list[tuple[int, ...]]
    group: list[GroupElement]
    generators: list[np.ndarray]
    transports: list[int]
    skeleta: dict[int, list[Face]]
    base_cell_index: int = 0
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))

    def transport(self, cell: int) -> GroupElement:
        return self.group[self.transports[cell]]


def simplex_vertices(n: int) -> np.ndarray:
    """Vertices of the regular n-simplex inscribed in S^{n-1}."""
    corners = np.eye(n + 1) - 1.0 / (n + 1)
    # orthonormal basis of the hyperplane orthogonal to (1, ..., 1)
    _, _, vt = np.linalg.svd(corners)
    basis = vt[:n]
    vertices = corners @ basis.T
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    return vertices


def simplex_cell(n: int, opposite: int = 0) -> SphericalPolytope:
    """Spherical projection of the facet of the regular n-simplex opposite a vertex."""
    all_vertices = simplex_vertices(n)
    vertices = np.delete(all_vertices, opposite, axis=0)
    interior = -all_vertices[opposite]
    facets = [tuple(i for i in range(n) if i != j) for j in range(n)]
    return SphericalPolytope(vertices=vertices, facets=facets, dimension=n, interior=interior)


def check_polytope(p: SphericalPolytope, strict: bool = True) -> None:
    norms = np.linalg.norm(p.vertices, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > _unit_tolerance)
    if len(bad) > 0:
        raise NotOnSphereError(p.vertices[bad[0]])
    if p.vertices.shape[1] != p.dimension:
        raise InvalidDimensionError(p.dimension)
    if abs(np.linalg.norm(p.interior) - 1.0) > _unit_tolerance:
        raise NotOnSphereError(p.interior)
    normals = p.facet_normals()
    if np.any(normals @ p.vertices.T < -1e-10):
        raise NonConvexPolytopeError()
    if strict and np.any(p.vertices @ p.interior <= 0.0):
        raise OpenHemisphereError()


def build_simplex_tiling(n: int) -> Tiling:
    if n < 2:
        raise InvalidDimensionError(n)
    return build_tiling(simplex_cell(n))


def build_tiling(
    base: SphericalPolytope,
    generators: list[np.ndarray] | None = None,
    strict: bool = True,
) -> Tiling:
    check_polytope(base, strict=strict)
    if generators is None:
        generators = [
            np.eye(base.dimension) - 2.0 * np.outer(w, w) for w in base.facet_normals()
        ]
    group = _close_group(generators)

    cells: list[SphericalPolytope] = []
    transports: list[int] = []
    for index, g in enumerate(group):
        interior = g.matrix @ base.interior
        if any(np.linalg.norm(c.interior - interior) < _match_tolerance for c in cells):
            continue
        cells.append(
            SphericalPolytope(
                vertices=base.vertices @ g.matrix.T,
                facets=list(base.facets),
                dimension=base.dimension,
                interior=interior,
            )
        )
        transports.append(index)

    vertex_table: list[np.ndarray] = []
    cell_vertices: list[tuple[int, ...]] = []
    for cell in cells:
        indices = []
        for v in cell.vertices:
            for k, w in enumerate(vertex_table):
                if np.linalg.norm(v - w) < _match_tolerance:
                    indices.append(k)
                    break
            else:
                vertex_table.append(v)
                indices.append(len(vertex_table) - 1)
        cell_vertices.append(tuple(indices))

    base_normals = base.facet_normals()
    normals = np.stack([base_normals @ group[t].matrix.T for t in transports])

    tiling = Tiling(
        n=base.dimension,
        vertices=np.array(vertex_table),
        cells=cells,
        cell_vertices=cell_vertices,
        group=group,
        generators=generators,
        transports=transports,
        skeleta={},
        normals=normals,
    )
    tiling.skeleta = _build_skeleta(tiling, base)
    return tiling


def _close_group(generators: list[np.ndarray]) -> list[GroupElement]:
    n = generators[0].shape[0]
    group = [GroupElement(matrix=np.eye(n), parity=1, word=())]
    seen = {_matrix_key(group[0].matrix)}
    head = 0
    while head < len(group):
        element = group[head]
        head += 1
        for k, generator in enumerate(generators):
            matrix = generator @ element.matrix
            key = _matrix_key(matrix)
            if key in seen or any(
                np.max(np.abs(g.matrix - matrix)) < _match_tolerance for g in group
            ):
                continue
            seen.add(key)
            group.append(
                GroupElement(
                    matrix=matrix,
                    parity=-element.parity,
                    word=(k,) + element.word,
                )
            )
            if len(group) > _max_group_order:
                raise GroupTooLargeError(_max_group_order)
    return group


def _build_skeleta(t: Tiling, base: SphericalPolytope) -> dict[int, list[Face]]:
    n = t.n
    local_faces: set[frozenset[int]] = {frozenset(f) for f in base.facets}
    frontier = set(local_faces)
    while frontier:
        found = set()
        for a in frontier:
            for b in local_faces:
                c = a & b
                if c and c != a and c != b and c not in local_faces:
                    found.add(c)
        local_faces |= found
        frontier = found

    incidence: dict[tuple[int, ...], tuple[int, set[int]]] = {}
    for j, indices in enumerate(t.cell_vertices):
        for face in local_faces:
            key = tuple(sorted(indices[i] for i in face))
            rank = np.linalg.matrix_rank(t.vertices[list(key)], tol=1e-9)
            dimension = rank - 1
            incidence.setdefault(key, (dimension, set()))[1].add(j)

    skeleta: dict[int, list[Face]] = {ell: [] for ell in range(n)}
    for key in sorted(incidence):
        dimension, cells = incidence[key]
        if dimension < n - 1:
            skeleta[dimension].append(
                Face(vertices=key, cells=sorted(cells), dimension=dimension)
            )
    skeleta[n - 1] = [
        Face(vertices=tuple(sorted(indices)), cells=[j], dimension=n - 1)
        for j, indices in enumerate(t.cell_vertices)
    ]
    return skeleta


def _matrix_key(matrix: np.ndarray) -> bytes:
    return (np.round(matrix, 8) + 0.0).tobytes()


def odd_skeleton(t: Tiling) -> list[Face]:
    return [face for face in t.skeleta.get(t.n - 3, []) if len(face.cells) % 2 == 1]


def classify_points(t: Tiling, ys: np.ndarray) -> np.ndarray:
    """Cell index for each row of `ys`; boundary points go to the lowest index."""
    ys = np.atleast_2d(ys)
    norms = np.linalg.norm(ys, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-10)
    if len(bad) > 0:
        raise NotOnSphereError(ys[bad[0]])
    margins = np.einsum("cfd,pd->pcf", t.normals, ys).min(axis=2)
    inside = margins >= -1e-12
    return np.where(inside.any(axis=1), np.argmax(inside, axis=1), np.argmax(margins, axis=1))


def classify_point(t: Tiling, y: np.ndarray) -> tuple[int, GroupElement, int]:
    cell = int(classify_points(t, np.asarray(y, dtype=float))[0])
    g = t.transport(cell)
    return cell, g, g.parity


def find_element(t: Tiling, matrix: np.ndarray) -> GroupElement:
    for g in t.group:
        if np.max(np.abs(g.matrix - matrix)) < _match_tolerance:
            return g
    raise NotInGroupError()


def wall_reflection(t: Tiling, cell: int, wall: int) -> GroupElement:
    w = t.normals[cell, wall]
    return find_element(t, np.eye(t.n) - 2.0 * np.outer(w, w))


def neighbor(t: Tiling, cell: int, wall: int) -> int:
    reflection = wall_reflection(t, cell, wall)
    interior = reflection.matrix @ t.cells[cell].interior
    for j, c in enumerate(t.cells):
        if np.linalg.norm(c.interior - interior) < _match_tolerance:
            return j
    raise NotInGroupError()


def isotropy(t: Tiling, point: np.ndarray) -> list[GroupElement]:
    point = np.asarray(point, dtype=float)
    return [g for g in t.group if np.linalg.norm(g.matrix @ point - point) < 1e-10]


def cycle_sign(t: Tiling, face: Face) -> tuple[int, GroupElement]:
    """Walk the cells around a codimension-two face across walls.

    Returns the sign picked up by odd reflection after one full cycle and the
    holonomy element, which fixes the starting cell.
    """
    if face.dimension != t.n - 3:
        raise InvalidDimensionError(face.dimension)
    members = set(face.vertices)

    def walls_through(cell: int) -> list[int]:
        base_facets = t.cells[cell].facets
        indices = t.cell_vertices[cell]
        return [
            k
            for k, facet in enumerate(base_facets)
            if members <= {indices[i] for i in facet}
        ]

    start = face.cells[0]
    current = start
    wall = walls_through(start)[0]
    holonomy = np.eye(t.n)
    steps = 0
    while True:
        reflection = wall_reflection(t, current, wall).matrix
        holonomy = holonomy @ reflection
        nxt = neighbor(t, current, wall)
        steps += 1
        if nxt == start:
            break
        if steps > len(t.cells):
            raise NotInGroupError()
        shared = {t.cell_vertices[current][i] for i in t.cells[current].facets[wall]}
        candidates = walls_through(nxt)
        wall = next(
            k
            for k in candidates
            if {t.cell_vertices[nxt][i] for i in t.cells[nxt].facets[k]} != shared
        )
        current = nxt
    return (-1) ** steps, find_element(t, holonomy)


def cell_area(t: Tiling, cell: int) -> float:
    p = t.cells[cell]
    match t.n:
        case 2:
            a, b = p.vertices
            return math.acos(float(np.clip(a @ b, -1.0, 1.0)))
        case 3:
            return polygon_area(p)
        case _:
            raise InvalidDimensionError(t.n)


def polygon_area(p: SphericalPolytope) -> float:
    """Solid angle of a spherical polygon as a fan of triangles from its interior point."""
    order = cyclic_order(p)
    c = p.interior
    total = 0.0
    for i in range(len(order)):
        a = p.vertices[order[i]]
        b = p.vertices[order[(i + 1) % len(order)]]
        numerator = abs(float(c @ np.cross(a, b)))
        denominator = 1.0 + float(c @ a + a @ b + b @ c)
        total += 2.0 * math.atan2(numerator, denominator)
    return total


def cyclic_order(p: SphericalPolytope) -> list[int]:
    """Vertex indices of a spherical polygon in the order its sides chain them."""
    sides = [tuple(f) for f in p.facets]
    order = [sides[0][0], sides[0][1]]
    used = {0}
    while len(order) < len(sides):
        for k, (a, b) in enumerate(sides):
            if k in used:
                continue
            if a == order[-1]:
                order.append(b)
            elif b == order[-1]:
                order.append(a)
            else:
                continue
            used.add(k)
            break
        else:
            raise NonConvexPolytopeError()
    return order


def sphere_area(n: int) -> float:
    """Area of S^{n-1}."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


def validate(t: Tiling) -> list[str]:
    violations = []
    for g in t.group:
        if np.max(np.abs(g.matrix.T @ g.matrix - np.eye(t.n))) > 1e-12:
            violations.append(f"element {g.word} is not orthogonal")
        if round(np.linalg.det(g.matrix)) != g.parity:
            violations.append(f"element {g.word} has parity {g.parity} but determinant sign differs")
    # closure and parity under the generators imply them for the whole group
    elements = {_matrix_key(g.matrix): g for g in t.group}
    for k, generator in enumerate(t.generators):
        for g in t.group:
            matrix = generator @ g.matrix
            product = elements.get(_matrix_key(matrix))
            if product is None:
                try:
                    product = find_element(t, matrix)
                except NotInGroupError:
                    violations.append(f"product of generator {k} and {g.word} not in the group")
                    continue
            if product.parity != -g.parity:
                violations.append(f"parity is not multiplicative on generator {k}, {g.word}")
    for ell in range(1, t.n):
        for face in t.skeleta.get(ell - 1, []):
            count = sum(
                1
                for upper in t.skeleta.get(ell, [])
                if set(face.vertices) <= set(upper.vertices)
            )
            if count < 2:
                violations.append(f"face {face.vertices} lies in {count} faces of dimension {ell}")
    if t.n in (2, 3):
        areas = [cell_area(t, j) for j in range(len(t.cells))]
        if max(areas) - min(areas) > 1e-10:
            violations.append("cell areas differ")
        if abs(sum(areas) - sphere_area(t.n)) > 1e-8:
            violations.append(f"cell areas sum to {sum(areas)}, not {sphere_area(t.n)}")
    return violations


def dump_tiling(t: Tiling) -> str:
    lines = [f"n = {t.n}", f"group_order = {len(t.group)}", f"cells = {len(t.cells)}"]
    for k, v in enumerate(t.vertices):
        lines.append(f"vertex {k} = " + " ".join(f"{x:.17g}" for x in v))
    for j, indices in enumerate(t.cell_vertices):
        facets = "; ".join(
            " ".join(str(indices[i]) for i in facet) for facet in t.cells[j].facets
        )
        lines.append(f"cell {j} vertices = {' '.join(map(str, indices))} facets = {facets}")
    for g in t.group:
        entries = " ".join(f"{x:.17g}" for x in g.matrix.ravel())
        lines.append(f"element parity = {g.parity:+d} word = {list(g.word)} matrix = {entries}")
    for ell in sorted(t.skeleta):
        for face in t.skeleta[ell]:
            lines.append(
                f"face dim = {ell} vertices = {' '.join(map(str, face.vertices))}"
                f" cells = {' '.join(map(str, face.cells))}"
            )
    return "\n".join(lines) + "\n"


class Error(Exception):
    pass


class InvalidDimensionError(Error):
    def __init__(self, n: int) -> None:
        super().__init__(f"invalid dimension {n}")


class NotOnSphereError(Error):
    def __init__(self, point: np.ndarray) -> None:
        super().__init__(f"point {np.asarray(point).tolist()} is not on the unit sphere")


class NonConvexPolytopeError(Error):
    def __init__(self) -> None:
        super().__init__("polytope is not geodesically convex")


class OpenHemisphereError(Error):
    def __init__(self) -> None:
        super().__init__("polytope does not lie in an open hemisphere")


class GroupTooLargeError(Error):
    def __init__(self, limit: int) -> None:
        super().__init__(f"generated group exceeds {limit} elements")


class NotInGroupError(Error):
    def __init__(self) -> None:
        super().__init__("matrix is not an element of the tiling group")
