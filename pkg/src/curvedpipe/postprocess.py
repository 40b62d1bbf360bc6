"""Stream-function recovery, vortex census, and field/table export.

The secondary flow is summarised by a stream function psi with u =
-(1/(rB)) dpsi/dtheta and v = (1/B) dpsi/dr, recovered from the computed
velocity by a least-squares potential solve.  Vortices are counted as
edge-connected components of elements whose mean psi exceeds a fraction
of the global extremum, split by sign.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .calculus import ElementBasis, evaluate
from .geometry import (
    AXIS_COLLAPSE,
    P2,
    DiscreteField,
    build_dof_map,
    reference_quadrature,
)
from .stokes import (
    DEFAULT_QUAD_DEGREE,
    geometry_factors,
    scatter_matrix,
    scatter_vector,
)

# census threshold: fraction of max |psi| an element mean must exceed
CENSUS_THRESHOLD = 0.05

CSV_COLUMNS = (
    "delta", "reynolds", "alpha", "pstar", "nr", "ntheta",
    "iterations", "converged", "residual",
    "psi_min", "psi_max", "r_min", "theta_min", "r_max", "theta_max",
    "w_max", "pos_vortices", "neg_vortices",
)


@dataclass(frozen=True)
class ExtremaRecord:
    """Stream-function extrema and peak axial velocity with locations."""

    psi_min: float
    psi_max: float
    psi_min_loc: tuple
    psi_max_loc: tuple
    w_max: float
    w_max_loc: tuple


@dataclass(frozen=True)
class VortexSummary:
    """Signed vortex counts and per-component peak values with locations."""

    positive: int
    negative: int
    peaks: tuple


def recover_stream_function(mesh, u, v, delta, quad_degree=DEFAULT_QUAD_DEGREE):
    """Least-squares stream function, psi = 0 at the wall.

    Solves (psi_r, phi_r) + (psi_t, phi_t) = -(B v, phi_r) + (rB u, phi_t)
    on the axis-collapsed P2 space, i.e. the potential with psi_r = -Bv and
    psi_t = rBu, oriented so the counter-clockwise upper-half vortex of the
    Dean circulation carries psi > 0.  The right side is compatible because
    the saddle solve enforces d_r(rBu) + d_t(Bv) = 0 weakly.
    """
    dm = build_dof_map(mesh, P2, AXIS_COLLAPSE)
    rule = reference_quadrature(quad_degree)
    basis = ElementBasis(mesh, P2, rule.points)
    wd = rule.weights[None, :] * basis.det[:, None]
    g = basis.grad
    conn = dm.element_nodes

    k_loc = np.einsum("eq,eqid,eqjd->eij", wd, g, g)
    K = (dm.P.T @ scatter_matrix(k_loc, conn, conn,
                                 (dm.n_nodes, dm.n_nodes)) @ dm.P).tocsc()

    _, B, _, _, rB = geometry_factors(basis, delta)
    uq = evaluate(basis, u.dofmap.element_nodes, u.values)
    vq = evaluate(basis, v.dofmap.element_nodes, v.values)
    rhs_loc = (np.einsum("eq,eqi->ei", wd * rB * uq, g[..., 1])
               - np.einsum("eq,eqi->ei", wd * B * vq, g[..., 0]))
    rhs = dm.P.T @ scatter_vector(rhs_loc, conn, dm.n_nodes)

    try:
        x = spla.splu(K).solve(rhs)
    except RuntimeError as exc:
        raise RuntimeError(f"stream function recovery system is singular: {exc}")
    scale = np.linalg.norm(rhs)
    if scale > 0 and np.linalg.norm(K @ x - rhs) > 1e-10 * scale:
        raise FloatingPointError("stream function recovery lost accuracy")
    return DiscreteField(dm, dm.expand(x))


def extrema(psi, w) -> ExtremaRecord:
    """Nodal extrema of psi (vertices and midpoints) and the peak of w."""
    coords = psi.dofmap.node_coords
    i_min = int(np.argmin(psi.values))
    i_max = int(np.argmax(psi.values))
    wcoords = w.dofmap.node_coords
    i_w = int(np.argmax(w.values))
    return ExtremaRecord(
        psi_min=float(psi.values[i_min]),
        psi_max=float(psi.values[i_max]),
        psi_min_loc=(float(coords[i_min, 0]), float(coords[i_min, 1])),
        psi_max_loc=(float(coords[i_max, 0]), float(coords[i_max, 1])),
        w_max=float(w.values[i_w]),
        w_max_loc=(float(wcoords[i_w, 0]), float(wcoords[i_w, 1])),
    )


def _components(flagged, pairs):
    idx = np.flatnonzero(flagged)
    if idx.size == 0:
        return idx, np.empty(0, dtype=np.int64), 0
    remap = np.full(flagged.shape[0], -1, dtype=np.int64)
    remap[idx] = np.arange(idx.size)
    a, b = remap[pairs[:, 0]], remap[pairs[:, 1]]
    keep = (a >= 0) & (b >= 0)
    graph = sp.coo_matrix((np.ones(keep.sum()), (a[keep], b[keep])),
                          shape=(idx.size, idx.size))
    n, labels = csgraph.connected_components(graph, directed=False)
    return idx, labels, n


def vortex_census(mesh, psi, threshold=CENSUS_THRESHOLD) -> VortexSummary:
    """Count sign-components of psi whose element mean clears the threshold."""
    conn = psi.dofmap.element_nodes
    means = psi.values[conn].mean(axis=1)
    scale = float(np.abs(psi.values).max())
    if scale == 0.0:
        return VortexSummary(0, 0, ())

    pairs = mesh.edge_cells[mesh.edge_cells[:, 1] != -1]
    coords = psi.dofmap.node_coords
    peaks = []
    counts = []
    for sign in (1.0, -1.0):
        idx, labels, n = _components(sign * means > threshold * scale, pairs)
        counts.append(n)
        for c in range(n):
            nodes = np.unique(conn[idx[labels == c]])
            k = nodes[int(np.argmax(sign * psi.values[nodes]))]
            peaks.append((float(psi.values[k]),
                          (float(coords[k, 0]), float(coords[k, 1]))))
    peaks.sort(key=lambda p: (-abs(p[0]), p[1]))
    return VortexSummary(positive=counts[0], negative=counts[1],
                         peaks=tuple(peaks))


def export_vtk(path, mesh, point_data, cell_data=None, title="cross-section fields"):
    """Legacy ASCII VTK unstructured grid on the Cartesian cross-section.

    `point_data` maps names to nodal arrays (P2 arrays are reduced to their
    vertex entries, P1 arrays are used as-is); `cell_data` maps names to
    per-element arrays.
    """
    nv = mesh.n_vertices
    r = mesh.vertices[:, 0]
    t = mesh.vertices[:, 1]
    x, y = r * np.cos(t), r * np.sin(t)
    ne = mesh.n_cells

    lines = ["# vtk DataFile Version 2.0", title, "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x[i]:.9e} {y[i]:.9e} 0.0" for i in range(nv)]
    lines.append(f"CELLS {ne} {4 * ne}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {ne}")
    lines += ["5"] * ne
    lines.append(f"POINT_DATA {nv}")
    for name, arr in point_data.items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines += [f"{v:.9e}" for v in np.asarray(arr)[:nv]]
    if cell_data:
        lines.append(f"CELL_DATA {ne}")
        for name, arr in cell_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [f"{v:.9e}" for v in np.asarray(arr)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _csv_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.9e}"


def export_csv(path, rows):
    """Write sweep rows (mappings keyed by CSV_COLUMNS) deterministically."""
    out = [",".join(CSV_COLUMNS)]
    for row in rows:
        out.append(",".join(_csv_cell(row[c]) for c in CSV_COLUMNS))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")
