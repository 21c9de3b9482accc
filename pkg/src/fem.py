import math

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

# P1 kernel shared by every solver. Elements are simplices given as rows of node
# indices; the embedding dimension may exceed the simplex dimension (surface
# triangles live in R^3).


def element_geometry(
    nodes: np.ndarray, elements: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Return element measures (E,) and barycentric gradients (E, d+1, D).

    Gradients are tangential: they lie in the span of the element edges.
    """
    points = nodes[elements]
    edges = points[:, 1:, :] - points[:, :1, :]
    gram = edges @ edges.transpose(0, 2, 1)
    dim = edges.shape[1]
    det = np.linalg.det(gram)
    if np.any(det <= 0.0):
        raise DegenerateElementError(int(np.argmin(det)))
    measures = np.sqrt(det) / math.factorial(dim)
    rest = np.linalg.solve(gram, edges)
    first = -rest.sum(axis=1, keepdims=True)
    return measures, np.concatenate([first, rest], axis=1)


def quadrature(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points (Q, dim+1) and weights (Q,) summing to 1, exact for degree 2."""
    match dim:
        case 1:
            a = 0.5 - 0.5 / math.sqrt(3.0)
            points = np.array([[1.0 - a, a], [a, 1.0 - a]])
        case 2:
            points = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        case 3:
            a = 0.5854101966249685
            b = 0.1381966011250105
            points = np.full((4, 4), b)
            np.fill_diagonal(points, a)
        case _:
            raise UnsupportedDimensionError(dim)
    weights = np.full(len(points), 1.0 / len(points))
    return points, weights


def assemble(elements: np.ndarray, local: np.ndarray, n_nodes: int) -> sp.csr_matrix:
    """Sum local (E, k, k) matrices into a sparse (n_nodes, n_nodes) matrix."""
    k = elements.shape[1]
    rows = np.repeat(elements, k, axis=1).ravel()
    cols = np.tile(elements, (1, k)).ravel()
    matrix = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n_nodes, n_nodes))
    return matrix.tocsr()


def assemble_stiffness(
    nodes: np.ndarray,
    elements: np.ndarray,
    coefficient: np.ndarray | None = None,
) -> sp.csr_matrix:
    measures, grads = element_geometry(nodes, elements)
    weight = measures if coefficient is None else measures * coefficient
    local = weight[:, None, None] * (grads @ grads.transpose(0, 2, 1))
    return assemble(elements, local, len(nodes))


def assemble_mass(nodes: np.ndarray, elements: np.ndarray) -> sp.csr_matrix:
    measures, _ = element_geometry(nodes, elements)
    k = elements.shape[1]
    pattern = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    local = measures[:, None, None] * pattern[None, :, :]
    return assemble(elements, local, len(nodes))


def assemble_weighted_mass(
    nodes: np.ndarray, elements: np.ndarray, weights: np.ndarray
) -> sp.csr_matrix:
    """Mass matrix with a coefficient sampled at the degree-2 quadrature points.

    `weights` has shape (E, Q) matching `quadrature(d)`.
    """
    measures, _ = element_geometry(nodes, elements)
    points, quad_weights = quadrature(elements.shape[1] - 1)
    scaled = weights * quad_weights[None, :] * measures[:, None]
    local = np.einsum("eq,qi,qj->eij", scaled, points, points)
    return assemble(elements, local, len(nodes))


def element_gradients(
    nodes: np.ndarray, elements: np.ndarray, values: np.ndarray
) -> np.ndarray:
    _, grads = element_geometry(nodes, elements)
    return np.einsum("ei,eid->ed", values[elements], grads)


def reduce_dirichlet(matrix: sp.spmatrix, free: np.ndarray) -> sp.csr_matrix:
    index = np.flatnonzero(free)
    return sp.csr_matrix(matrix)[index][:, index]


def red_refine(
    points: np.ndarray, elements: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniformly subdivide intervals, triangles or tetrahedra.

    Returns the new points (old points first, then one midpoint per edge), the
    child elements and the (n_edges, 2) edge array whose midpoints were added.
    """
    k = elements.shape[1]
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    local_edges = np.stack([elements[:, [i, j]] for i, j in pairs], axis=1)
    local_edges.sort(axis=2)
    edges, inverse = np.unique(local_edges.reshape(-1, 2), axis=0, return_inverse=True)
    inverse = inverse.reshape(len(elements), len(pairs)) + len(points)
    midpoints = 0.5 * (points[edges[:, 0]] + points[edges[:, 1]])
    new_points = np.concatenate([points, midpoints])

    def mid(i: int, j: int) -> np.ndarray:
        return inverse[:, pairs.index((min(i, j), max(i, j)))]

    v = [elements[:, i] for i in range(k)]
    match k:
        case 2:
            m = mid(0, 1)
            children = [[v[0], m], [m, v[1]]]
        case 3:
            m01, m12, m02 = mid(0, 1), mid(1, 2), mid(0, 2)
            children = [
                [v[0], m01, m02],
                [m01, v[1], m12],
                [m02, m12, v[2]],
                [m01, m12, m02],
            ]
        case 4:
            m01, m02, m03 = mid(0, 1), mid(0, 2), mid(0, 3)
            m12, m13, m23 = mid(1, 2), mid(1, 3), mid(2, 3)
            children = [
                [v[0], m01, m02, m03],
                [m01, v[1], m12, m13],
                [m02, m12, v[2], m23],
                [m03, m13, m23, v[3]],
            ]
            # inner octahedron split along its shortest diagonal
            diagonals = [(m01, m23), (m02, m13), (m03, m12)]
            lengths = np.stack(
                [
                    np.linalg.norm(new_points[a] - new_points[b], axis=1)
                    for a, b in diagonals
                ],
                axis=1,
            )
            # ties go to the first diagonal so mirror-image parents split alike
            lengths = np.round(lengths / lengths.max(axis=1, keepdims=True), 10)
            choice = np.argmin(lengths, axis=1)
            octahedra = [
                # diagonal (m01, m23); equator m02 m12 m13 m03
                [[m01, m23, m02, m12], [m01, m23, m12, m13], [m01, m23, m13, m03], [m01, m23, m03, m02]],
                # diagonal (m02, m13); equator m01 m12 m23 m03
                [[m02, m13, m01, m12], [m02, m13, m12, m23], [m02, m13, m23, m03], [m02, m13, m03, m01]],
                # diagonal (m03, m12); equator m01 m02 m23 m13
                [[m03, m12, m01, m02], [m03, m12, m02, m23], [m03, m12, m23, m13], [m03, m12, m13, m01]],
            ]
            for slot in range(4):
                child = [
                    np.select([choice == c for c in range(3)], [octahedra[c][slot][i] for c in range(3)])
                    for i in range(4)
                ]
                children.append(child)
        case _:
            raise UnsupportedDimensionError(k - 1)
    new_elements = np.concatenate(
        [np.stack(child, axis=1) for child in children], axis=0
    )
    return new_points, new_elements.astype(np.int64), edges


def orient(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Swap the last two vertices of negatively oriented elements.

    Volume simplices use the sign of the determinant; surface triangles on a
    sphere use the outward normal.
    """
    elements = elements.copy()
    points = nodes[elements]
    edges = points[:, 1:, :] - points[:, :1, :]
    match (edges.shape[1], nodes.shape[1]):
        case (3, 3):
            sign = np.linalg.det(edges)
        case (2, 3):
            normal = np.cross(edges[:, 0], edges[:, 1])
            sign = np.einsum("ed,ed->e", normal, points.mean(axis=1))
        case (1, 1):
            sign = edges[:, 0, 0]
        case _:
            return elements
    flip = sign < 0.0
    elements[flip, -2], elements[flip, -1] = elements[flip, -1], elements[flip, -2].copy()
    return elements


class PointLocator:
    """Locate points in a volume (or interval) mesh whose dimension equals its embedding."""

    __slots__ = (
        "_nodes",
        "_elements",
        "_origins",
        "_inverses",
        "_tree",
        "_candidates",
    )

    def __init__(self, nodes: np.ndarray, elements: np.ndarray, candidates: int = 16) -> None:
        self._nodes = nodes
        self._elements = elements
        points = nodes[elements]
        self._origins = points[:, 0, :]
        edges = points[:, 1:, :] - points[:, :1, :]
        self._inverses = np.linalg.inv(edges.transpose(0, 2, 1))
        self._tree = cKDTree(points.mean(axis=1))
        self._candidates = min(candidates, len(elements))

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (element, barycentric, inside) for each point.

        Points outside the mesh are snapped to the nearest candidate element and
        flagged with inside=False.
        """
        points = np.atleast_2d(points)
        _, candidates = self._tree.query(points, k=self._candidates)
        candidates = candidates.reshape(len(points), -1)
        offset = points[:, None, :] - self._origins[candidates]
        rest = np.einsum("pkij,pkj->pki", self._inverses[candidates], offset)
        bary = np.concatenate([1.0 - rest.sum(axis=2, keepdims=True), rest], axis=2)
        worst = bary.min(axis=2)
        best = np.argmax(worst, axis=1)
        rows = np.arange(len(points))
        element = candidates[rows, best]
        bary = bary[rows, best]
        inside = worst[rows, best] >= -1e-9
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return element, bary, inside

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        element, bary, _ = self.locate(points)
        return np.einsum("pi,pi...->p...", bary, values[self._elements[element]])

    def gradient_at(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        element, _, _ = self.locate(points)
        _, grads = element_geometry(self._nodes, self._elements[element])
        return np.einsum("pi,pid->pd", values[self._elements[element]], grads)


class SphericalLocator:
    """Locate directions in a triangulated region of S^2 by radial projection."""

    __slots__ = (
        "_elements",
        "_inverses",
        "_tree",
        "_candidates",
    )

    def __init__(self, nodes: np.ndarray, elements: np.ndarray, candidates: int = 16) -> None:
        self._elements = elements
        corners = nodes[elements]
        self._inverses = np.linalg.inv(corners.transpose(0, 2, 1))
        centroids = corners.mean(axis=1)
        centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
        self._tree = cKDTree(centroids)
        self._candidates = min(candidates, len(elements))

    def locate(self, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        directions = np.atleast_2d(directions)
        directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        _, candidates = self._tree.query(directions, k=self._candidates)
        candidates = candidates.reshape(len(directions), -1)
        coefficients = np.einsum("pkij,pj->pki", self._inverses[candidates], directions)
        # flat barycentric coordinates of the radial intersection point
        bary = coefficients / coefficients.sum(axis=2, keepdims=True)
        worst = bary.min(axis=2)
        best = np.argmax(worst, axis=1)
        rows = np.arange(len(directions))
        element = candidates[rows, best]
        bary = bary[rows, best]
        inside = worst[rows, best] >= -1e-9
        bary = np.clip(bary, 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        return element, bary, inside

    def interpolate(self, values: np.ndarray, directions: np.ndarray) -> np.ndarray:
        element, bary, _ = self.locate(directions)
        return np.einsum("pi,pi...->p...", bary, values[self._elements[element]])


class Error(Exception):
    pass


class DegenerateElementError(Error):
    def __init__(self, element: int) -> None:
        super().__init__(f"degenerate element {element}")


class UnsupportedDimensionError(Error):
    def __init__(self, dim: int) -> None:
        super().__init__(f"unsupported simplex dimension {dim}")
