"""Cross-section mesh, FEM degrees of freedom, quadrature and metric coefficients.

The computational domain is the parametric rectangle (r, theta) in
(0,1) x [0, 2pi) with the theta seam identified, meshed by a structured
triangulation (two triangles per quad, fixed diagonal).  The pipe axis r=0
maps to a line of coincident vertices; single-valuedness there is restored
through dof constraints, not through the mesh.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

TAG_INTERIOR = 0
TAG_WALL = 1
TAG_AXIS = 2

P2 = "p2"
P1 = "p1"
P1DISC = "p1disc"

AXIS_NONE = "none"
AXIS_COLLAPSE = "scalar-collapse"
AXIS_TRIG = "vector-trig"


@dataclass(frozen=True)
class FlowParams:
    """Nondimensional problem parameters.

    delta is the curvature ratio (cross-section radius over coil radius),
    reynolds the Reynolds number, alpha the viscoelastic parameter and
    pstar the constant axial pressure-gradient magnitude.  The second
    material ratio is fixed to -alpha (thermodynamic compatibility) and is
    not an independent input.
    """

    delta: float
    reynolds: float
    alpha: float
    pstar: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0,1)")
        if self.reynolds < 0.0:
            raise ValueError("reynolds must be >= 0")
        if not self.pstar > 0.0:
            raise ValueError("pstar must be > 0")

    @property
    def alpha2(self) -> float:
        return -self.alpha


def metric(r, theta, delta):
    """Toroidal metric coefficients (B, B1, B2) at (r, theta).

    B = 1 + r*delta*cos(theta) is the axial scale factor; B1 = r*delta*sin(theta)
    and B2 = r*delta*cos(theta) are its angular/radial derivative combinations:
    d(rB)/dr = B + B2 and dB/dtheta = -B1.
    """
    rd = np.asarray(r, dtype=float) * delta
    b2 = rd * np.cos(theta)
    b1 = rd * np.sin(theta)
    return 1.0 + b2, b1, b2


# Symmetric positive-weight rules on the reference triangle (0,0)-(1,0)-(0,1).
# Each group is (weight, barycentric triple); weights normalized to sum 1
# before the area-1/2 scaling.  Constants verified against exact monomial
# moments p!q!/(p+q+2)! to machine precision.
_QUAD_GROUPS = {
    2: [(1.0 / 3.0, (2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0))],
    4: [
        (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
        (0.109951743655322, (0.816847572980458, 0.091576213509771, 0.091576213509771)),
    ],
    6: [
        (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
        (0.116786275726379, (0.501426509658180, 0.249286745170910, 0.249286745170910)),
        (0.082851075618374, (0.636502499121399, 0.310352451033785, 0.053145049844816)),
    ],
    8: [
        (0.144315607677760, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)),
        (0.095091634267305, (0.081414823414598, 0.459292588292701, 0.459292588292701)),
        (0.103217370534727, (0.658861384496536, 0.170569307751732, 0.170569307751732)),
        (0.032458497623201, (0.898905543365938, 0.050547228317031, 0.050547228317031)),
        (0.027230314174424, (0.008394777409920, 0.263112829634720, 0.728492392955360)),
    ],
}


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,), sum to reference area 1/2
    degree: int


def reference_quadrature(degree: int) -> QuadratureRule:
    """Quadrature rule on the reference triangle, exact to `degree`."""
    if degree not in _QUAD_GROUPS:
        raise ValueError(f"unsupported quadrature degree {degree}; choose from {sorted(_QUAD_GROUPS)}")
    pts, wts = [], []
    for w, (a, b, c) in _QUAD_GROUPS[degree]:
        for t in sorted({(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)}):
            pts.append((t[1], t[2]))
            wts.append(0.5 * w)
    return QuadratureRule(np.array(pts), np.array(wts), degree)


# 3-point Gauss on [0,1]; exact for the degree-5 polynomial part of edge terms.
_S15 = np.sqrt(0.6)
EDGE_QP = 0.5 * (1.0 + np.array([-_S15, 0.0, _S15]))
EDGE_QW = np.array([5.0, 8.0, 5.0]) / 18.0


@dataclass
class ParametricMesh:
    """Structured periodic triangulation of the (r, theta) rectangle.

    Vertex (i, j) sits at (i/nr, 2*pi*j/ntheta) with index i*ntheta + j;
    the seam j = ntheta is identified with j = 0.  `cell_coords` stores
    per-triangle vertex coordinates with theta unwrapped past the seam so
    affine geometry is computed on a connected chart.
    """

    nr: int
    ntheta: int
    vertices: np.ndarray      # (nv, 2)
    triangles: np.ndarray     # (ne, 3) vertex indices, positive orientation
    cell_coords: np.ndarray   # (ne, 3, 2) unwrapped coordinates
    edge_vertices: np.ndarray   # (nE, 2) sorted global vertex pairs
    edge_cells: np.ndarray      # (nE, 2), -1 for missing side
    edge_local: np.ndarray      # (nE, 2) local edge index within each cell
    edge_tag: np.ndarray        # (nE,)
    edge_normals: np.ndarray    # (nE, 2, 2) outward unit normal per side
    edge_endpoint_local: np.ndarray  # (nE, 2, 2) local vertex index of each endpoint per side
    _jac: np.ndarray = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_vertices.shape[0]

    def jacobians(self):
        """Per-cell affine map data: J (ne,2,2), inverse-transpose and |det J|."""
        if self._jac is None:
            p0 = self.cell_coords[:, 0, :]
            J = np.stack([self.cell_coords[:, 1, :] - p0,
                          self.cell_coords[:, 2, :] - p0], axis=-1)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            inv = np.empty_like(J)
            inv[:, 0, 0] = J[:, 1, 1] / det
            inv[:, 0, 1] = -J[:, 0, 1] / det
            inv[:, 1, 0] = -J[:, 1, 0] / det
            inv[:, 1, 1] = J[:, 0, 0] / det
            object.__setattr__(self, "_jac", (J, np.transpose(inv, (0, 2, 1)), det))
        return self._jac

    def max_edge_length(self) -> float:
        lengths = []
        for k in range(3):
            a = self.cell_coords[:, (k + 1) % 3, :]
            b = self.cell_coords[:, (k + 2) % 3, :]
            lengths.append(np.hypot(*(a - b).T))
        return float(np.max(lengths))


def build_mesh(nr: int, ntheta: int) -> ParametricMesh:
    """Build the structured periodic cross-section mesh.

    Parameters
    ----------
    nr, ntheta : int
        Radial and angular subdivision counts (nr >= 2, ntheta >= 4).

    Returns
    -------
    ParametricMesh with 2*nr*ntheta triangles and (nr+1)*ntheta vertices.
    """
    if nr < 2 or ntheta < 4:
        raise ValueError("mesh too coarse: need nr >= 2 and ntheta >= 4")
    dr = 1.0 / nr
    dt = 2.0 * np.pi / ntheta

    ii, jj = np.meshgrid(np.arange(nr + 1), np.arange(ntheta), indexing="ij")
    vertices = np.column_stack([(ii * dr).ravel(), (jj * dt).ravel()])

    tris = []
    coords = []
    for i in range(nr):
        for j in range(ntheta):
            jp = (j + 1) % ntheta
            v00 = i * ntheta + j
            v10 = (i + 1) * ntheta + j
            v01 = i * ntheta + jp
            v11 = (i + 1) * ntheta + jp
            r0, r1 = i * dr, (i + 1) * dr
            t0, t1 = j * dt, (j + 1) * dt  # unwrapped: t1 may equal 2*pi
            if j % 2 == 0:
                tris.append((v00, v10, v11))
                coords.append(((r0, t0), (r1, t0), (r1, t1)))
                tris.append((v00, v11, v01))
                coords.append(((r0, t0), (r1, t1), (r0, t1)))
            else:
                # mirrored diagonal: keeps the mesh invariant under theta -> -theta
                # (even ntheta), which the reflection symmetry of Newtonian states
                # inherits; a single fixed diagonal breaks it at O(h^2).
                tris.append((v00, v10, v01))
                coords.append(((r0, t0), (r1, t0), (r0, t1)))
                tris.append((v10, v11, v01))
                coords.append(((r1, t0), (r1, t1), (r0, t1)))
    triangles = np.array(tris, dtype=np.int64)
    cell_coords = np.array(coords)

    e1 = cell_coords[:, 1] - cell_coords[:, 0]
    e2 = cell_coords[:, 2] - cell_coords[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    assert np.all(area2 > 0), "negative parametric orientation"

    edge_index: dict[tuple[int, int], int] = {}
    ev, ec, el, epl = [], [], [], []
    for c in range(triangles.shape[0]):
        tri = triangles[c]
        for k in range(3):
            a, b = int(tri[(k + 1) % 3]), int(tri[(k + 2) % 3])
            key = (min(a, b), max(a, b))
            if key not in edge_index:
                edge_index[key] = len(ev)
                ev.append(key)
                ec.append([c, -1])
                el.append([k, -1])
                epl.append([[0, 0], [0, 0]])
            else:
                e = edge_index[key]
                if ec[e][1] != -1:
                    raise ValueError("non-manifold edge")
                ec[e][1] = c
                el[e][1] = k
            e = edge_index[key]
            side = 0 if ec[e][0] == c else 1
            loc = {int(tri[0]): 0, int(tri[1]): 1, int(tri[2]): 2}
            epl[e][side] = [loc[key[0]], loc[key[1]]]

    edge_vertices = np.array(ev, dtype=np.int64)
    edge_cells = np.array(ec, dtype=np.int64)
    edge_local = np.array(el, dtype=np.int64)
    edge_endpoint_local = np.array(epl, dtype=np.int64)

    rv = vertices[:, 0]
    on_wall = np.isclose(rv, 1.0)
    on_axis = np.isclose(rv, 0.0)
    edge_tag = np.full(len(ev), TAG_INTERIOR, dtype=np.int64)
    boundary = edge_cells[:, 1] == -1
    wall_e = boundary & on_wall[edge_vertices[:, 0]] & on_wall[edge_vertices[:, 1]]
    axis_e = boundary & on_axis[edge_vertices[:, 0]] & on_axis[edge_vertices[:, 1]]
    edge_tag[wall_e] = TAG_WALL
    edge_tag[axis_e] = TAG_AXIS
    assert np.all(wall_e | axis_e | ~boundary), "untagged boundary edge"

    edge_normals = np.zeros((len(ev), 2, 2))
    for e in range(len(ev)):
        for side in range(2):
            c = edge_cells[e, side]
            if c == -1:
                continue
            k = edge_local[e, side]
            pa = cell_coords[c, (k + 1) % 3]
            pb = cell_coords[c, (k + 2) % 3]
            popp = cell_coords[c, k]
            t = pb - pa
            n = np.array([t[1], -t[0]]) / np.hypot(*t)
            if np.dot(n, pa - popp) < 0:
                n = -n
            edge_normals[e, side] = n

    return ParametricMesh(nr, ntheta, vertices, triangles, cell_coords,
                          edge_vertices, edge_cells, edge_local, edge_tag,
                          edge_normals, edge_endpoint_local)


@dataclass
class DofMap:
    """Degrees of freedom for one FEM space with all constraints baked in.

    Constraints (wall Dirichlet, theta-periodicity, axis collapse or the
    axis vector-trig tie) are realized by a sparse prolongation P of shape
    (n_full, n_free): full nodal vectors are P @ x_free and reduced systems
    are P^T A P.  `master_rows` selects the free unknowns back out of a
    constrained full vector (P[master_rows] is the identity).
    """

    space: str
    axis_policy: str
    n_nodes: int              # nodes per scalar component
    ncomp: int                # 1, or 2 for the coupled (u,v) pair
    element_nodes: np.ndarray  # (ne, nloc) global node index per component
    node_coords: np.ndarray    # (n_nodes, 2)
    P: sp.csr_matrix
    master_rows: np.ndarray
    wall_nodes: np.ndarray
    axis_nodes: np.ndarray
    has_zero_mean: bool = False

    @property
    def n_full(self) -> int:
        return self.ncomp * self.n_nodes

    @property
    def n_free(self) -> int:
        return self.P.shape[1]

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        return self.P @ x_free

    def reduce_vector(self, x_full: np.ndarray) -> np.ndarray:
        return x_full[self.master_rows]


@dataclass
class DiscreteField:
    """Coefficient vector over a DofMap, stored as full (constrained) nodal values."""

    dofmap: DofMap
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.dofmap.n_full,):
            raise ValueError("coefficient vector does not match the dof map")

    @classmethod
    def from_free(cls, dofmap: DofMap, x_free: np.ndarray) -> "DiscreteField":
        return cls(dofmap, dofmap.expand(x_free))

    @classmethod
    def zeros(cls, dofmap: DofMap) -> "DiscreteField":
        return cls(dofmap, np.zeros(dofmap.n_full))

    def free(self) -> np.ndarray:
        return self.dofmap.reduce_vector(self.values)

    def component(self, k: int = 0) -> np.ndarray:
        n = self.dofmap.n_nodes
        return self.values[k * n:(k + 1) * n]


def _p2_nodes(mesh: ParametricMesh):
    nv = mesh.n_vertices
    elem = np.empty((mesh.n_cells, 6), dtype=np.int64)
    elem[:, :3] = mesh.triangles
    # local midpoint node 3+k sits opposite local vertex k
    mid_of_cell = np.full((mesh.n_cells, 3), -1, dtype=np.int64)
    for e in range(mesh.n_edges):
        for side in range(2):
            c = mesh.edge_cells[e, side]
            if c != -1:
                mid_of_cell[c, mesh.edge_local[e, side]] = nv + e
    elem[:, 3:] = mid_of_cell

    coords = np.empty((nv + mesh.n_edges, 2))
    coords[:nv] = mesh.vertices
    for e in range(mesh.n_edges):
        c = mesh.edge_cells[e, 0]
        k = mesh.edge_local[e, 0]
        mid = 0.5 * (mesh.cell_coords[c, (k + 1) % 3] + mesh.cell_coords[c, (k + 2) % 3])
        mid[1] = np.mod(mid[1], 2.0 * np.pi)
        coords[nv + e] = mid
    return elem, coords


def build_dof_map(mesh: ParametricMesh, space: str, axis_policy: str = AXIS_NONE) -> DofMap:
    """Build the dof map for one FEM space.

    P2 spaces carry homogeneous wall Dirichlet conditions; the P1
    continuous space is the zero-mean pressure space (no wall condition);
    P1 discontinuous has 3 dofs per triangle and allows no axis policy.
    The vector-trig policy builds the coupled (u,v) map with the exact
    polar-axis tie u(0,t) = a*cos t + b*sin t, v(0,t) = -a*sin t + b*cos t.
    """
    if space == P1DISC:
        if axis_policy != AXIS_NONE:
            raise ValueError("P1-discontinuous admits no axis policy")
        ne = mesh.n_cells
        elem = np.arange(3 * ne, dtype=np.int64).reshape(ne, 3)
        coords = mesh.cell_coords.reshape(3 * ne, 2).copy()
        coords[:, 1] = np.mod(coords[:, 1], 2.0 * np.pi)
        P = sp.identity(3 * ne, format="csr")
        idx = np.arange(3 * ne)
        return DofMap(space, axis_policy, 3 * ne, 1, elem, coords, P, idx,
                      np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

    if space == P2:
        elem, coords = _p2_nodes(mesh)
    elif space == P1:
        elem, coords = mesh.triangles.copy(), mesh.vertices.copy()
    else:
        raise ValueError(f"unknown space {space!r}")
    if axis_policy == AXIS_TRIG and space != P2:
        raise ValueError("vector-trig requires the P2 space")

    n_nodes = coords.shape[0]
    on_wall = np.isclose(coords[:, 0], 1.0)
    on_axis = np.isclose(coords[:, 0], 0.0)
    wall_nodes = np.nonzero(on_wall)[0]
    axis_nodes = np.nonzero(on_axis)[0]
    dirichlet = on_wall if space == P2 else np.zeros(n_nodes, dtype=bool)

    if axis_policy == AXIS_TRIG:
        ncomp = 2
        n_full = 2 * n_nodes
        plain = ~dirichlet & ~on_axis
        cols = np.full(n_full, -1, dtype=np.int64)
        nfree_plain = 0
        for comp in range(2):
            idx = np.nonzero(plain)[0] + comp * n_nodes
            cols[idx] = nfree_plain + np.arange(idx.size)
            nfree_plain += idx.size
        col_a, col_b = nfree_plain, nfree_plain + 1
        rows_l, cols_l, vals = [], [], []
        for row in np.nonzero(cols >= 0)[0]:
            rows_l.append(row); cols_l.append(cols[row]); vals.append(1.0)
        th = coords[axis_nodes, 1]
        for node, t in zip(axis_nodes, th):
            rows_l += [node, node, n_nodes + node, n_nodes + node]
            cols_l += [col_a, col_b, col_a, col_b]
            vals += [np.cos(t), np.sin(t), -np.sin(t), np.cos(t)]
        P = sp.csr_matrix((vals, (rows_l, cols_l)), shape=(n_full, nfree_plain + 2))
        node0 = axis_nodes[np.argmin(np.abs(th))]
        assert abs(coords[node0, 1]) < 1e-12, "axis node at theta=0 expected"
        master_rows = np.empty(nfree_plain + 2, dtype=np.int64)
        master_rows[cols[cols >= 0]] = np.nonzero(cols >= 0)[0]
        master_rows[col_a] = node0
        master_rows[col_b] = n_nodes + node0
        return DofMap(space, axis_policy, n_nodes, ncomp, elem, coords, P,
                      master_rows, wall_nodes, axis_nodes)

    # scalar maps: optional collapse of all axis nodes onto one master
    master = np.arange(n_nodes, dtype=np.int64)
    if axis_policy == AXIS_COLLAPSE and axis_nodes.size:
        node0 = axis_nodes[np.argmin(coords[axis_nodes, 1])]
        master[axis_nodes] = node0
    elif axis_policy not in (AXIS_NONE, AXIS_COLLAPSE):
        raise ValueError(f"unknown axis policy {axis_policy!r}")

    is_master_free = (master == np.arange(n_nodes)) & ~dirichlet
    cols = np.full(n_nodes, -1, dtype=np.int64)
    cols[is_master_free] = np.arange(np.count_nonzero(is_master_free))
    rows_l, cols_l = [], []
    for node in range(n_nodes):
        m = master[node]
        if dirichlet[node] or cols[m] < 0:
            continue
        rows_l.append(node)
        cols_l.append(cols[m])
    P = sp.csr_matrix((np.ones(len(rows_l)), (rows_l, cols_l)),
                      shape=(n_nodes, np.count_nonzero(is_master_free)))
    master_rows = np.nonzero(is_master_free)[0]
    return DofMap(space, axis_policy, n_nodes, 1, elem, coords, P, master_rows,
                  wall_nodes, axis_nodes, has_zero_mean=(space == P1))
