"""P1 finite elements on uniform simplicial meshes of the unit cube.

Meshes use the Kuhn subdivision: every grid cell of size ``h = 2**-N`` is
split into ``d!`` simplices of equal volume.  Nonlinear volume terms are
integrated with rules exact for polynomials of degree 3.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SetupError, StateSolveError


@dataclass(frozen=True, eq=False)
class SimplexMesh:
    dim: int
    refinement: int
    points: np.ndarray = field(repr=False)  # (n_nodes, dim)
    cells: np.ndarray = field(repr=False)  # (n_cells, dim + 1)
    boundary: np.ndarray = field(repr=False)  # bool per node
    volumes: np.ndarray = field(repr=False)
    grads: np.ndarray = field(repr=False)  # (n_cells, dim + 1, dim) barycentric gradients

    @property
    def h(self) -> float:
        return 2.0 ** -self.refinement

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]


def unit_cube_mesh(dim: int, refinement: int) -> SimplexMesh:
    if dim not in (1, 2, 3):
        raise SetupError("dimension must be 1, 2 or 3")
    if refinement < 1:
        raise SetupError("refinement must be at least 1")
    n = 2 ** refinement
    shape = (n + 1,) * dim
    grid = np.stack(np.meshgrid(*[np.arange(n + 1)] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    points = grid / n
    corners = np.stack(np.meshgrid(*[np.arange(n)] * dim, indexing="ij"), axis=-1).reshape(-1, dim)
    eye = np.eye(dim, dtype=int)
    cells = []
    for perm in itertools.permutations(range(dim)):
        verts = [corners]
        for axis in perm:
            verts.append(verts[-1] + eye[axis])
        cells.append(np.stack([np.ravel_multi_index(tuple(v.T), shape) for v in verts], axis=1))
    cells = np.concatenate(cells)
    boundary = np.any((grid == 0) | (grid == n), axis=1)

    x = points[cells]  # (nc, d+1, d)
    aff = np.concatenate([np.ones(x.shape[:2] + (1,)), x], axis=2)
    inv = np.linalg.inv(aff)  # columns: coefficients of each barycentric coordinate
    grads = np.transpose(inv[:, 1:, :], (0, 2, 1))
    volumes = np.abs(np.linalg.det(aff)) / math.factorial(dim)
    return SimplexMesh(dim, refinement, points, cells, boundary, volumes, grads)


def boundary_facets(mesh: SimplexMesh):
    """Facets lying on the cube boundary: (node array (nf, dim), measures)."""
    d = mesh.dim
    if d == 1:
        nodes = np.flatnonzero(mesh.boundary)[:, None]
        return nodes, np.ones(nodes.shape[0])
    facets = []
    for drop in range(d + 1):
        facets.append(np.delete(mesh.cells, drop, axis=1))
    facets = np.concatenate(facets)
    x = mesh.points[facets]  # (nf, d, d)
    on_face = np.zeros(facets.shape[0], bool)
    for axis in range(d):
        c = x[:, :, axis]
        on_face |= np.all(c == 0.0, axis=1) | np.all(c == 1.0, axis=1)
    facets = np.unique(np.sort(facets[on_face], axis=1), axis=0)
    e = mesh.points[facets[:, 1:]] - mesh.points[facets[:, :1]]  # (nf, d-1, d)
    gram = np.einsum("fik,fjk->fij", e, e)
    measures = np.sqrt(np.linalg.det(gram)) / math.factorial(d - 1)
    return facets, measures


def lumped_boundary_mass(mesh: SimplexMesh) -> np.ndarray:
    """Per-node lumped boundary mass; sums to the surface measure."""
    facets, measures = boundary_facets(mesh)
    m = np.zeros(mesh.n_nodes)
    np.add.at(m, facets.ravel(), np.repeat(measures / facets.shape[1], facets.shape[1]))
    return m


@dataclass(frozen=True)
class SimplexQuadrature:
    barycentric: np.ndarray  # (nq, d+1)
    weights: np.ndarray  # sums to 1; multiply by the simplex volume


def _orbit(values):
    return sorted(set(itertools.permutations(values)))


def simplex_quadrature(dim: int) -> SimplexQuadrature:
    """Degree-3 exact rules: 3-point Gauss (1D), 6-point (2D), 10-point (3D)."""
    if dim == 1:
        x, w = np.polynomial.legendre.leggauss(3)
        s = 0.5 * (x + 1.0)
        return SimplexQuadrature(np.stack([1.0 - s, s], axis=1), 0.5 * w)
    if dim == 2:
        groups = [
            (0.109951743655322, (0.816847572980459, 0.091576213509771, 0.091576213509771)),
            (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
        ]
    elif dim == 3:
        groups = [
            (0.0476331348432089, (0.7784952948213300,) + (0.0738349017262234,) * 3),
            (0.1349112434378610, (0.4062443438840510,) * 2 + (0.0937556561159491,) * 2),
        ]
    else:
        raise SetupError("dimension must be 1, 2 or 3")
    pts, wts = [], []
    for w, base in groups:
        orbit = _orbit(base)
        pts.extend(orbit)
        wts.extend([w] * len(orbit))
    return SimplexQuadrature(np.array(pts), np.array(wts))


class Assembler:
    """Vectorized P1 assembly restricted to a set of unknown nodes.

    ``dofs`` maps mesh nodes to unknown indices (or -1 for eliminated nodes).
    The sparsity pattern and scatter map are computed once; every matrix
    assembled afterwards shares the same CSR structure.
    """

    def __init__(self, mesh: SimplexMesh, dofs: np.ndarray | None = None):
        self.mesh = mesh
        self.quad = simplex_quadrature(mesh.dim)
        if dofs is None:
            dofs = np.arange(mesh.n_nodes)
        self.dofs = dofs
        self.n = int(dofs.max()) + 1
        cd = dofs[mesh.cells]  # (nc, k)
        k = cd.shape[1]
        rows = np.repeat(cd, k, axis=1).ravel()
        cols = np.tile(cd, (1, k)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        key = rows[keep].astype(np.int64) * self.n + cols[keep]
        ukey, inverse = np.unique(key, return_inverse=True)
        self._keep = keep
        self._map = inverse
        self._indices = (ukey % self.n).astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(ukey // self.n, minlength=self.n))])
        self._cell_dofs = cd
        lam = self.quad.barycentric  # (nq, k)
        self._bb = np.einsum("qi,qj->qij", lam, lam)
        self.qp_points = np.einsum("qi,cid->cqd", lam, mesh.points[mesh.cells])
        self._wvol = mesh.volumes[:, None] * self.quad.weights[None, :]  # (nc, nq)

    def _matrix(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self._map, weights=local.ravel()[self._keep], minlength=self._indices.size)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n, self.n))

    def stiffness(self) -> sp.csr_matrix:
        g = self.mesh.grads
        local = np.einsum("cid,cjd->cij", g, g) * self.mesh.volumes[:, None, None]
        return self._matrix(local)

    def mass(self, coef: np.ndarray | None = None) -> sp.csr_matrix:
        """``int c psi_i psi_j`` with ``c`` given at quadrature points (nc, nq)."""
        wc = self._wvol if coef is None else self._wvol * coef
        return self._matrix(np.einsum("cq,qij->cij", wc, self._bb))

    def load(self, values: np.ndarray) -> np.ndarray:
        """``int s psi_i`` with ``s`` given at quadrature points (nc, nq)."""
        local = np.einsum("cq,qi->ci", self._wvol * values, self.quad.barycentric)
        cd = self._cell_dofs.ravel()
        keep = cd >= 0
        return np.bincount(cd[keep], weights=local.ravel()[keep], minlength=self.n)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self._wvol * values))

    def at_qp(self, nodal: np.ndarray) -> np.ndarray:
        """Values of a P1 function (given on all mesh nodes) at quadrature points."""
        return nodal[self.mesh.cells] @ self.quad.barycentric.T

    def extend(self, x: np.ndarray) -> np.ndarray:
        """Unknown vector -> nodal vector with zeros on eliminated nodes."""
        full = np.zeros(self.mesh.n_nodes)
        mask = self.dofs >= 0
        full[mask] = x[self.dofs[mask]]
        return full


def factorize(matrix: sp.spmatrix):
    return spla.splu(sp.csc_matrix(matrix))


def newton_solve(residual, jacobian, y0, tol=1e-12, max_iters=50, step=None):
    """Full-step Newton for ``residual(y) = 0``.

    ``residual`` returns ``(r, scale)``; convergence means ``|r|_inf <= tol*scale``
    reached after an update small enough for the quadratic regime, so the
    result sits at round-off level.  Returns ``(y, lu)`` with ``lu`` the
    factorized Jacobian at the returned ``y``.
    """
    y = np.array(y0, dtype=float)
    last = np.inf
    for it in range(max_iters + 1):
        r, scale = residual(y)
        rnorm = np.max(np.abs(r)) if r.size else 0.0
        if not np.isfinite(rnorm):
            break
        lu = factorize(jacobian(y))
        if rnorm <= tol * scale and last <= 1e-7 * max(1.0, np.max(np.abs(y), initial=0.0)):
            return y, lu
        if it == max_iters:
            break
        dy = lu.solve(-r)
        y = y + dy
        last = np.max(np.abs(dy), initial=0.0)
        if rnorm <= tol * scale and last == 0.0:
            return y, lu
    raise StateSolveError(
        f"Newton did not converge in {max_iters} iterations (residual {rnorm:.3e})",
        step=step, residual=float(rnorm),
    )
