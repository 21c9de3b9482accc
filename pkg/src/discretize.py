import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .fem import element_geometry, orient, red_refine
from .tiling import (
    SphericalPolytope,
    build_simplex_tiling,
    check_polytope,
    cyclic_order,
)

# Surface and cone meshes keep their nodes in "flat" reference coordinates: the
# fan of flat macro triangles (centre, vertex, side midpoint) and the flat cone
# over it. Refinement happens there; radial projection and grading are applied
# afterwards, so a refined mesh is always the projection of a finer flat lattice.

_tag_tolerance = 1e-10


class MeshKind(enum.IntEnum):
    INTERVAL = enum.auto()
    SURFACE = enum.auto()
    CONE = enum.auto()
    BOX = enum.auto()


@dataclass(kw_only=True)
class Mesh:
    kind: MeshKind
    nodes: np.ndarray
    elements: np.ndarray
    tags: dict[str, np.ndarray]
    grading: float
    h: float
    level: int = 0
    polytope: SphericalPolytope | None = None
    reference: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    macro: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    grading_radius: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def dim(self) -> int:
        return self.elements.shape[1] - 1

    def tagged(self, prefix: str) -> np.ndarray:
        """Indices of nodes carrying `prefix` or any `prefix:k` tag."""
        parts = [
            indices
            for tag, indices in self.tags.items()
            if tag == prefix or tag.startswith(prefix + ":")
        ]
        if len(parts) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def node_tags(self, node: int) -> set[str]:
        return {tag for tag, indices in self.tags.items() if node in indices}

    def dirichlet_nodes(self) -> np.ndarray:
        match self.kind:
            case MeshKind.SURFACE | MeshKind.INTERVAL:
                return self.tagged("side")
            case MeshKind.CONE:
                return np.union1d(self.tagged("cap"), self.tagged("flat_face"))
            case MeshKind.BOX:
                return self.tagged("boundary")

    def free_mask(self) -> np.ndarray:
        free = np.ones(self.n_nodes, dtype=bool)
        free[self.dirichlet_nodes()] = False
        return free


@dataclass(kw_only=True)
class MeshQuality:
    max_ratio: float
    min_measure: float
    n_elements: int


def tetra_face() -> SphericalPolytope:
    return build_simplex_tiling(3).cells[0]


def simplex_face(n: int) -> SphericalPolytope:
    return build_simplex_tiling(n).cells[0]


def hemisphere() -> SphericalPolytope:
    vertices = np.array(
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]
    )
    return SphericalPolytope(
        vertices=vertices,
        facets=[(0, 1), (1, 2), (2, 3), (3, 0)],
        dimension=3,
        interior=np.array([0.0, 0.0, 1.0]),
    )


def mesh_spherical_polytope(p: SphericalPolytope, h: float, grading: float = 2.0) -> Mesh:
    macros, levels, spacing = _prepare(p, h, grading)
    n_div = 2**levels
    lattice = [(i, j) for i in range(n_div + 1) for j in range(n_div + 1 - i)]
    slot = {ij: s for s, ij in enumerate(lattice)}
    local = []
    for i, j in lattice:
        if i + j < n_div:
            local.append((slot[i, j], slot[i + 1, j], slot[i, j + 1]))
        if i + j < n_div - 1:
            local.append((slot[i + 1, j], slot[i + 1, j + 1], slot[i, j + 1]))
    weights = np.array([(n_div - i - j, i, j) for i, j in lattice], dtype=float) / n_div
    local = np.array(local, dtype=np.int64)

    points = np.concatenate([weights @ tri for tri in macros])
    triangles = np.concatenate([local + k * len(lattice) for k in range(len(macros))])
    macro = np.repeat(np.arange(len(macros)), len(local))
    points, labels = _merge_points(points)
    return _finish_surface(
        p, points, labels[triangles], macro, h=spacing, grading=grading, level=0
    )


def mesh_cone(p: SphericalPolytope, h: float, grading: float = 2.0) -> Mesh:
    """Tetrahedral mesh of the unit cone over `p` inside the unit ball."""
    macros, levels, spacing = _prepare(p, h, grading)
    points = np.concatenate([np.zeros((1, 3)), np.concatenate(macros)])
    points, labels = _merge_points(points)
    tets = np.array(
        [[labels[0], *labels[1 + 3 * k : 4 + 3 * k]] for k in range(len(macros))],
        dtype=np.int64,
    )
    macro = np.arange(len(macros))
    for _ in range(levels):
        points, tets, _ = red_refine(points, tets)
        macro = np.tile(macro, 8)
    return _finish_cone(p, points, tets, macro, h=spacing, grading=grading, level=0)


def mesh_interval(length: float, h: float) -> Mesh:
    if length <= 0.0:
        raise InvalidMeshSizeError(length)
    if not h > 0.0:
        raise InvalidMeshSizeError(h)
    count = max(1, math.ceil(length / h - 1e-12))
    nodes = np.linspace(0.0, length, count + 1)[:, None]
    elements = np.stack([np.arange(count), np.arange(1, count + 1)], axis=1)
    return _finish_interval(nodes, elements, h=length / count, level=0)


def mesh_cube(n_div: int) -> Mesh:
    """Unit cube split into 6·n_div³ Kuhn tetrahedra."""
    if n_div < 1:
        raise InvalidMeshSizeError(n_div)
    axis = np.linspace(0.0, 1.0, n_div + 1)
    nodes = np.array(list(itertools.product(axis, axis, axis)))
    stride = np.array([(n_div + 1) ** 2, n_div + 1, 1])
    tets = []
    for corner in itertools.product(range(n_div), repeat=3):
        for permutation in itertools.permutations(range(3)):
            position = np.array(corner)
            chain = [int(position @ stride)]
            for a in permutation:
                position[a] += 1
                chain.append(int(position @ stride))
            tets.append(chain)
    return _finish_box(nodes, np.array(tets, dtype=np.int64), h=1.0 / n_div, level=0)


def refine(m: Mesh) -> Mesh:
    match m.kind:
        case MeshKind.SURFACE:
            points, elements, _ = red_refine(m.reference, m.elements)
            return _finish_surface(
                m.polytope,
                points,
                elements,
                np.tile(m.macro, 4),
                h=m.h / 2,
                grading=m.grading,
                level=m.level + 1,
            )
        case MeshKind.CONE:
            points, elements, _ = red_refine(m.reference, m.elements)
            return _finish_cone(
                m.polytope,
                points,
                elements,
                np.tile(m.macro, 8),
                h=m.h / 2,
                grading=m.grading,
                level=m.level + 1,
            )
        case MeshKind.INTERVAL:
            points, elements, _ = red_refine(m.nodes, m.elements)
            return _finish_interval(points, elements, h=m.h / 2, level=m.level + 1)
        case MeshKind.BOX:
            points, elements, _ = red_refine(m.nodes, m.elements)
            return _finish_box(points, elements, h=m.h / 2, level=m.level + 1)


def mesh_measure(m: Mesh) -> float:
    measures, _ = element_geometry(m.nodes, m.elements)
    return float(measures.sum())


def spherical_area(m: Mesh) -> float:
    """Total area of the spherical triangles spanned by a surface mesh."""
    a, b, c = (m.nodes[m.elements[:, i]] for i in range(3))
    numerator = np.abs(np.einsum("ed,ed->e", a, np.cross(b, c)))
    denominator = (
        1.0
        + np.einsum("ed,ed->e", a, b)
        + np.einsum("ed,ed->e", b, c)
        + np.einsum("ed,ed->e", c, a)
    )
    return float(2.0 * np.arctan2(numerator, denominator).sum())


def mesh_quality(m: Mesh) -> MeshQuality:
    measures, _ = element_geometry(m.nodes, m.elements)
    points = m.nodes[m.elements]
    match m.dim:
        case 1:
            ratio = np.ones(len(measures))
        case 2:
            lengths = np.stack(
                [np.linalg.norm(points[:, i] - points[:, (i + 1) % 3], axis=1) for i in range(3)],
                axis=1,
            )
            circumradius = lengths.prod(axis=1) / (4.0 * measures)
            inradius = measures / (0.5 * lengths.sum(axis=1))
            ratio = circumradius / inradius
        case _:
            edges = points[:, 1:] - points[:, :1]
            centre = np.linalg.solve(2.0 * edges, np.einsum("eij,eij->ei", edges, edges))
            circumradius = np.linalg.norm(centre, axis=1)
            face_area = np.zeros(len(measures))
            for face in itertools.combinations(range(4), 3):
                a, b, c = (points[:, i] for i in face)
                face_area += 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            inradius = 3.0 * measures / face_area
            ratio = circumradius / inradius
    return MeshQuality(
        max_ratio=float(ratio.max()),
        min_measure=float(measures.min()),
        n_elements=len(measures),
    )


def node_spacing(m: Mesh) -> np.ndarray:
    """Length of the shortest edge incident to each node."""
    k = m.elements.shape[1]
    spacing = np.full(m.n_nodes, np.inf)
    for i, j in itertools.combinations(range(k), 2):
        a, b = m.elements[:, i], m.elements[:, j]
        length = np.linalg.norm(m.nodes[a] - m.nodes[b], axis=1)
        np.minimum.at(spacing, a, length)
        np.minimum.at(spacing, b, length)
    return spacing


def element_facets(m: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique element facets (sorted node tuples) and how many elements share each."""
    k = m.elements.shape[1]
    local = np.concatenate([np.delete(m.elements, i, axis=1) for i in range(k)], axis=0)
    local.sort(axis=1)
    return np.unique(local, axis=0, return_counts=True)


def side_normals(p: SphericalPolytope) -> np.ndarray:
    return p.facet_normals()


def on_sides(p: SphericalPolytope, directions: np.ndarray) -> list[np.ndarray]:
    """Boolean masks of the unit vectors lying on each side arc of `p`."""
    masks = []
    normals = side_normals(p)
    for k, facet in enumerate(p.facets):
        a, b = (p.vertices[i] for i in facet)
        on_plane = np.abs(directions @ normals[k]) <= _tag_tolerance
        axis = np.cross(a, b)
        after_a = np.cross(a, directions) @ axis >= -_tag_tolerance
        before_b = np.cross(directions, b) @ axis >= -_tag_tolerance
        masks.append(on_plane & after_a & before_b)
    return masks


def _prepare(
    p: SphericalPolytope, h: float, grading: float
) -> tuple[list[np.ndarray], int, float]:
    if not h > 0.0 or h > 0.5:
        raise InvalidMeshSizeError(h)
    if grading < 1.0:
        raise InvalidGradingError(grading)
    check_polytope(p, strict=False)
    if p.dimension != 3:
        raise UnsupportedDomainError(p.dimension)
    macros = _macro_triangles(p)
    longest = max(
        _angle(x, y) for tri in macros for x, y in itertools.combinations(tri, 2)
    )
    levels = max(0, math.ceil(math.log2(longest / h) - 1e-12))
    return macros, levels, longest / 2**levels


def _macro_triangles(p: SphericalPolytope) -> list[np.ndarray]:
    order = cyclic_order(p)
    centre = p.interior
    macros = []
    for i in range(len(order)):
        a = p.vertices[order[i]]
        b = p.vertices[order[(i + 1) % len(order)]]
        mid = (a + b) / np.linalg.norm(a + b)
        macros.append(np.array([centre, a, mid]))
        macros.append(np.array([centre, mid, b]))
    return macros


def _angle(x: np.ndarray, y: np.ndarray) -> float:
    return math.atan2(float(np.linalg.norm(np.cross(x, y))), float(x @ y))


def _merge_points(points: np.ndarray, tolerance: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    tree = cKDTree(points)
    pairs = tree.query_pairs(tolerance, output_type="ndarray")
    graph = sp.coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
        shape=(len(points), len(points)),
    )
    _, labels = connected_components(graph, directed=False)
    _, representative = np.unique(labels, return_index=True)
    return points[representative], labels


def _grading_radius(p: SphericalPolytope) -> float:
    closest = min(_angle(a, b) for a, b in itertools.combinations(p.vertices, 2))
    return 0.4 * closest


def grade_directions(
    directions: np.ndarray, vertices: np.ndarray, radius: float, grading: float
) -> np.ndarray:
    """Pull unit vectors towards their nearest polytope vertex along geodesics.

    A point at geodesic distance d < radius moves to radius·(d/radius)^grading.
    """
    if grading == 1.0:
        return directions.copy()
    nearest = np.argmax(directions @ vertices.T, axis=1)
    v = vertices[nearest]
    cosine = np.einsum("nd,nd->n", directions, v)
    sine = np.linalg.norm(np.cross(directions, v), axis=1)
    distance = np.arctan2(sine, cosine)
    move = (distance > 0.0) & (distance < radius)
    graded = directions.copy()
    w = directions[move] - cosine[move, None] * v[move]
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    target = radius * (distance[move] / radius) ** grading
    graded[move] = np.cos(target)[:, None] * v[move] + np.sin(target)[:, None] * w
    return graded


def _surface_tags(p: SphericalPolytope, directions: np.ndarray) -> dict[str, np.ndarray]:
    tags = {}
    for k, mask in enumerate(on_sides(p, directions)):
        tags[f"side:{k}"] = np.flatnonzero(mask)
    for k, v in enumerate(p.vertices):
        tags[f"polytope_vertex:{k}"] = np.flatnonzero(
            np.linalg.norm(directions - v, axis=1) <= _tag_tolerance
        )
    return tags


def _finish_surface(
    p: SphericalPolytope,
    flat: np.ndarray,
    triangles: np.ndarray,
    macro: np.ndarray,
    *,
    h: float,
    grading: float,
    level: int,
) -> Mesh:
    radius = _grading_radius(p)
    directions = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    nodes = grade_directions(directions, p.vertices, radius, grading)
    return Mesh(
        kind=MeshKind.SURFACE,
        nodes=nodes,
        elements=orient(nodes, triangles),
        tags=_surface_tags(p, directions),
        grading=grading,
        h=h,
        level=level,
        polytope=p,
        reference=flat,
        macro=macro,
        grading_radius=radius,
    )


def _spherical_reference(
    p: SphericalPolytope, flat: np.ndarray, tets: np.ndarray, macro: np.ndarray
) -> np.ndarray:
    """Map the flat cone onto the round one, sending each flat cap triangle to S^2."""
    macros = _macro_triangles(p)
    normals = np.array([np.cross(t[1] - t[0], t[2] - t[0]) for t in macros])
    offsets = np.array([n @ t[0] for n, t in zip(normals, macros)])
    node_macro = np.zeros(len(flat), dtype=np.int64)
    node_macro[tets] = macro[:, None]
    radial = np.einsum("nd,nd->n", flat, normals[node_macro]) / offsets[node_macro]
    length = np.linalg.norm(flat, axis=1)
    result = np.zeros_like(flat)
    inner = length > 0.0
    result[inner] = (radial[inner] / length[inner])[:, None] * flat[inner]
    return result


def _cone_tags(p: SphericalPolytope, reference: np.ndarray) -> dict[str, np.ndarray]:
    r = np.linalg.norm(reference, axis=1)
    inner = r > _tag_tolerance
    directions = np.zeros_like(reference)
    directions[inner] = reference[inner] / r[inner, None]
    tags = {
        "cap": np.flatnonzero(np.abs(r - 1.0) <= _tag_tolerance),
        "cone_vertex": np.flatnonzero(~inner),
    }
    for k, mask in enumerate(on_sides(p, directions)):
        tags[f"flat_face:{k}"] = np.flatnonzero(mask & inner)
    for k, v in enumerate(p.vertices):
        tags[f"edge:{k}"] = np.flatnonzero(
            inner & (np.linalg.norm(directions - v, axis=1) <= _tag_tolerance)
        )
    return tags


def _finish_cone(
    p: SphericalPolytope,
    flat: np.ndarray,
    tets: np.ndarray,
    macro: np.ndarray,
    *,
    h: float,
    grading: float,
    level: int,
) -> Mesh:
    radius = _grading_radius(p)
    reference = _spherical_reference(p, flat, tets, macro)
    r = np.linalg.norm(reference, axis=1)
    nodes = np.zeros_like(reference)
    inner = r > 0.0
    directions = reference[inner] / r[inner, None]
    graded = grade_directions(directions, p.vertices, radius, grading)
    nodes[inner] = (r[inner] ** grading)[:, None] * graded
    return Mesh(
        kind=MeshKind.CONE,
        nodes=nodes,
        elements=orient(nodes, tets),
        tags=_cone_tags(p, reference),
        grading=grading,
        h=h,
        level=level,
        polytope=p,
        reference=flat,
        macro=macro,
        grading_radius=radius,
    )


def _finish_interval(nodes: np.ndarray, elements: np.ndarray, *, h: float, level: int) -> Mesh:
    x = nodes[:, 0]
    length = float(x.max())
    return Mesh(
        kind=MeshKind.INTERVAL,
        nodes=nodes,
        elements=orient(nodes, elements),
        tags={
            "side:0": np.flatnonzero(x <= _tag_tolerance),
            "side:1": np.flatnonzero(x >= length - _tag_tolerance),
        },
        grading=1.0,
        h=h,
        level=level,
        reference=nodes,
    )


def _finish_box(nodes: np.ndarray, elements: np.ndarray, *, h: float, level: int) -> Mesh:
    on_boundary = np.any((nodes <= _tag_tolerance) | (nodes >= 1.0 - _tag_tolerance), axis=1)
    return Mesh(
        kind=MeshKind.BOX,
        nodes=nodes,
        elements=orient(nodes, elements),
        tags={"boundary": np.flatnonzero(on_boundary)},
        grading=1.0,
        h=h,
        level=level,
        reference=nodes,
    )


class Error(Exception):
    pass


class InvalidMeshSizeError(Error):
    def __init__(self, h: float) -> None:
        super().__init__(f"invalid mesh size {h}")


class InvalidGradingError(Error):
    def __init__(self, grading: float) -> None:
        super().__init__(f"grading exponent {grading} is below 1")


class UnsupportedDomainError(Error):
    def __init__(self, dimension: int) -> None:
        super().__init__(f"meshes need a polytope on S^2, got one in R^{dimension}")
