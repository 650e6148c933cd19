"""Tetrahedral volume mesh construction around yarn geometry.

A regular voxel grid is rasterized along every yarn segment so that the
occupied cells fully cover the yarn, each cell is split into six tetrahedra
sharing its main diagonal (faces between neighboring cells match exactly),
and the yarn is embedded into the result: every yarn vertex gets a host
element with barycentric weights, every segment is clipped into per-element
pieces, and node masses are lumped from the yarn's line density.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

_SNAP = 1e-9          # relative snap tolerance for grid-plane coincidence
_BARY_TOL = 1e-9      # containment slack for barycentric clipping


def _local_tets():
    """Index quadruples of the six-tetrahedron split of the unit cell.

    All six share the main diagonal, and every permutation of the axis
    order contributes one positively oriented tetrahedron.  Neighboring
    cells then agree on the split of the face between them.
    """
    corners = [np.array([i & 1, (i >> 1) & 1, (i >> 2) & 1]) for i in range(8)]
    index = {tuple(c): i for i, c in enumerate(corners)}
    units = np.eye(3, dtype=int)
    tets = []
    for perm in itertools.permutations(range(3)):
        p0 = np.zeros(3, dtype=int)
        p1 = p0 + units[perm[0]]
        p2 = p1 + units[perm[1]]
        p3 = np.ones(3, dtype=int)
        quad = [index[tuple(p)] for p in (p0, p1, p2, p3)]
        pts = np.array([corners[q] for q in quad], dtype=float)
        vol = np.linalg.det((pts[1:] - pts[0]).T)
        if vol < 0.0:
            quad[1], quad[2] = quad[2], quad[1]
        tets.append(tuple(quad))
    return tets


_CELL_TETS = _local_tets()
_CELL_CORNERS = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=int)


@dataclass
class VolumeMesh:
    """Tetrahedral mesh on a voxel grid, with precomputed element operators."""

    nodes: np.ndarray          # (nV, 3) positions
    tets: np.ndarray           # (nE, 4) node indices, positive orientation
    cell_size: float
    origin: np.ndarray         # (3,) grid origin
    node_grid: np.ndarray      # (nV, 3) integer grid coordinates
    voxels: np.ndarray         # (nC, 3) occupied cells, lexicographic order
    tet_voxel: np.ndarray      # (nE,) index into voxels
    volume: np.ndarray = field(default=None)        # (nE,)
    jacobian: np.ndarray = field(default=None)      # (nE, 3, 3) rest edge matrix
    diff_op: np.ndarray = field(default=None)       # (nE, 9, 12) nodes -> vec(F)
    dtd: np.ndarray = field(default=None)           # (nE, 12, 12) diff_op^T diff_op
    shape_grad: np.ndarray = field(default=None)    # (nE, 4, 3) shape function gradients
    node_mass: np.ndarray = field(default=None)     # (nV,) lumped masses

    def __post_init__(self):
        if self.volume is None:
            self._build_operators()
        self._voxel_lookup = {tuple(v): i for i, v in enumerate(self.voxels)}
        self._voxel_tets = {}
        for e, c in enumerate(self.tet_voxel):
            self._voxel_tets.setdefault(int(c), []).append(e)

    def _build_operators(self):
        x = self.nodes[self.tets]                      # (nE, 4, 3)
        Dm = np.swapaxes(x[:, 1:] - x[:, :1], 1, 2)    # (nE, 3, 3) edge columns
        det = np.linalg.det(Dm)
        if np.any(det <= 0.0):
            raise ValueError("non-positive element volume")
        self.jacobian = Dm
        self.volume = det / 6.0
        Dminv = np.linalg.inv(Dm)
        G = np.empty((len(det), 4, 3))
        G[:, 1:] = Dminv                               # shape gradient rows
        G[:, 0] = -Dminv.sum(axis=1)
        self.shape_grad = G
        D = np.zeros((len(det), 9, 12))
        # F[i, j] = sum_n x[3n + i] * G[n, j]
        for n in range(4):
            for i in range(3):
                for j in range(3):
                    D[:, 3 * i + j, 3 * n + i] = G[:, n, j]
        self.diff_op = D
        self.dtd = np.einsum("eki,ekj->eij", D, D)

    # -- basic queries ----------------------------------------------------

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.tets.shape[0]

    def element_dofs(self):
        """(nE, 12) global dof indices in node-major x, y, z order."""
        return (3 * self.tets[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 12)

    def deformation_gradients(self, x):
        """Per-element F for node positions x, shape (nE, 3, 3)."""
        xe = x.reshape(-1, 3)[self.tets].reshape(-1, 12)
        return np.einsum("eab,eb->ea", self.diff_op, xe).reshape(-1, 3, 3)

    def grid_cell(self, p):
        """Integer cell containing point p, with snapping at grid planes."""
        g = (np.asarray(p, dtype=float) - self.origin) / self.cell_size
        k = np.rint(g)
        g = np.where(np.abs(g - k) < _SNAP * np.maximum(1.0, np.abs(g)), k, g)
        return np.floor(g).astype(int)

    def candidate_elements(self, p):
        """Elements of the cell containing p and of plane-adjacent cells."""
        g = (np.asarray(p, dtype=float) - self.origin) / self.cell_size
        k = np.rint(g)
        on_plane = np.abs(g - k) < _SNAP * np.maximum(1.0, np.abs(g))
        base = np.where(on_plane, k, np.floor(g)).astype(int)
        cells = [base]
        for ax in range(3):
            if on_plane[ax]:
                cells = cells + [c - np.eye(3, dtype=int)[ax] for c in cells]
        out = []
        for c in cells:
            out.extend(self._voxel_tets.get(self._voxel_lookup.get(tuple(c), -1), []))
        return sorted(set(out))

    def barycentric(self, elem, p):
        """Barycentric coordinates of p in element elem."""
        x0 = self.nodes[self.tets[elem, 0]]
        xi = np.linalg.solve(self.jacobian[elem], np.asarray(p, dtype=float) - x0)
        return np.concatenate([[1.0 - xi.sum()], xi])

    def locate(self, p):
        """Host element and barycentric weights of point p.

        Candidates come from the surrounding cells; ties on shared faces go
        to the lowest element index.  Raises if p is outside the mesh.
        """
        for tol in (1e-12, 1e-9, 1e-6):
            for e in self.candidate_elements(p):
                lam = self.barycentric(e, p)
                if np.all(lam >= -tol):
                    return e, lam
        raise ValueError(f"point {p} lies outside the mesh")


# ---------------------------------------------------------------------------
# voxel rasterization


def segment_cells(p0, p1, cell_size, origin):
    """Cells traversed by one segment, including corner-touch padding.

    Crossing parameters along each family of grid planes split the segment
    into pieces; the cell of each piece midpoint is occupied.  Wherever the
    segment touches a grid plane exactly (corners and edges included), all
    cells incident to the touch point are occupied as well, so two cells
    never end up connected only through a corner.
    """
    h = float(cell_size)
    a = (np.asarray(p0, dtype=float) - origin) / h
    b = (np.asarray(p1, dtype=float) - origin) / h
    d = b - a
    ts = {0.0, 1.0}
    for ax in range(3):
        if abs(d[ax]) < 1e-15:
            continue
        lo, hi = sorted((a[ax], b[ax]))
        for k in range(int(np.floor(lo)) , int(np.ceil(hi)) + 1):
            t = (k - a[ax]) / d[ax]
            if 1e-12 < t < 1.0 - 1e-12:
                ts.add(float(t))
    ts = sorted(ts)
    cells = set()
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 - t0 < 1e-12:
            continue
        mid = a + 0.5 * (t0 + t1) * d
        cells.add(tuple(np.floor(mid).astype(int)))
    for t in ts:
        q = a + t * d
        k = np.rint(q)
        on_plane = np.abs(q - k) < _SNAP * np.maximum(1.0, np.abs(q))
        axes = np.flatnonzero(on_plane)
        base = np.where(on_plane, k, np.floor(q)).astype(int)
        touch = [base]
        for ax in axes:
            touch = touch + [c - np.eye(3, dtype=int)[ax].astype(int) for c in touch]
        for c in touch:
            cells.add(tuple(int(v) for v in c))
    return cells


def _connected_components(cells):
    """6-connected components of a set of integer cells, largest first."""
    remaining = set(cells)
    comps = []
    while remaining:
        seed = next(iter(remaining))
        comp = {seed}
        remaining.discard(seed)
        frontier = [seed]
        while frontier:
            c = frontier.pop()
            for ax in range(3):
                for dlt in (-1, 1):
                    n = list(c)
                    n[ax] += dlt
                    n = tuple(n)
                    if n in remaining:
                        remaining.discard(n)
                        comp.add(n)
                        frontier.append(n)
        comps.append(comp)
    comps.sort(key=lambda c: (-len(c), sorted(c)[0]))
    return comps


def voxelize(yarn, cell_size, origin=None):
    """Rasterize yarn segments into a voxel grid and split into tetrahedra.

    Every point of every segment ends up inside an occupied cell.  Cells
    outside the largest face-connected component are dropped; if any yarn
    passes through a dropped cell the grid is unusable at this resolution
    and an error is raised.
    """
    if not np.isfinite(cell_size) or cell_size <= 0.0:
        raise ValueError("cell size must be positive")
    rest = yarn.rest_vertices
    segs = yarn.segments
    lengths = np.linalg.norm(rest[segs[:, 1]] - rest[segs[:, 0]], axis=1)
    if np.any(lengths < 1e-12):
        raise ValueError("degenerate yarn segment with zero rest length")
    if origin is None:
        origin = np.floor(rest.min(axis=0) / cell_size - 1.0) * cell_size
    origin = np.asarray(origin, dtype=float)

    covered = set()
    seg_cells = []
    for s in segs:
        cs = segment_cells(rest[s[0]], rest[s[1]], cell_size, origin)
        seg_cells.append(cs)
        covered |= cs
    comps = _connected_components(covered)
    keep = comps[0]
    for i, cs in enumerate(seg_cells):
        if not cs <= keep:
            raise ValueError(
                f"segment {i} occupies cells outside the largest connected component; "
                "refine the cell size or split the yarn input"
            )

    cells = np.array(sorted(keep), dtype=int)
    corner_ids = {}
    for c in cells:
        for off in _CELL_CORNERS:
            corner_ids.setdefault(tuple(c + off), None)
    grid = np.array(sorted(corner_ids), dtype=int)
    for i, g in enumerate(grid):
        corner_ids[tuple(g)] = i

    tets = np.empty((len(cells) * 6, 4), dtype=int)
    tet_voxel = np.repeat(np.arange(len(cells)), 6)
    for ci, c in enumerate(cells):
        ids = [corner_ids[tuple(c + off)] for off in _CELL_CORNERS]
        for ti, quad in enumerate(_CELL_TETS):
            tets[6 * ci + ti] = [ids[q] for q in quad]

    nodes = origin + grid * float(cell_size)
    return VolumeMesh(
        nodes=nodes,
        tets=tets,
        cell_size=float(cell_size),
        origin=origin,
        node_grid=grid,
        voxels=cells,
        tet_voxel=tet_voxel,
    )


def auto_cell_size(yarn, node_fraction=0.5, iters=24):
    """Cell size whose mesh node count lands near node_fraction * nY.

    Larger cells mean fewer nodes, so a bisection on the cell size over a
    geometric bracket homes in on the target count.
    """
    rest = yarn.rest_vertices
    target = max(8, int(node_fraction * len(rest)))

    def count(h):
        try:
            covered = set()
            origin = np.floor(rest.min(axis=0) / h - 1.0) * h
            for s in yarn.segments:
                covered |= segment_cells(rest[s[0]], rest[s[1]], h, origin)
        except Exception:
            return None
        comp = _connected_components(covered)[0]
        corners = set()
        for c in comp:
            for off in _CELL_CORNERS:
                corners.add(tuple(np.asarray(c) + off))
        return len(corners)

    span = np.linalg.norm(rest.max(axis=0) - rest.min(axis=0))
    hi = span
    lo = span / 256.0
    while count(lo) < target and lo > span / 4096.0:
        lo *= 0.5
    best = (lo, count(lo))
    for _ in range(iters):
        mid = np.sqrt(lo * hi)
        n = count(mid)
        if n is None:
            hi = mid
            continue
        if abs(n - target) < abs(best[1] - target):
            best = (mid, n)
        if n > target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.01:
            break
    return float(best[0])


# ---------------------------------------------------------------------------
# yarn embedding


@dataclass
class YarnEmbedding:
    """Geometric coupling between a yarn model and its volume mesh."""

    host_elem: np.ndarray       # (nY,) element of each yarn vertex
    host_weights: np.ndarray    # (nY, 4) barycentric weights
    interp: sp.csr_matrix       # (nY, nV) scalar interpolation matrix
    piece_elem: np.ndarray      # (nP,) element of each segment piece
    piece_seg: np.ndarray       # (nP,) parent segment of each piece
    piece_t0: np.ndarray        # (nP,) parameter range of the piece
    piece_t1: np.ndarray
    yarn_mass: np.ndarray       # (nY,) lumped yarn vertex masses


def _clip_segment(mesh, p0, p1, candidates):
    """Partition of [0, 1] into per-element pieces along one segment."""
    intervals = []
    for e in candidates:
        la = mesh.barycentric(e, p0)
        lb = mesh.barycentric(e, p1)
        t0, t1 = 0.0, 1.0
        ok = True
        for k in range(4):
            dl = lb[k] - la[k]
            if abs(dl) < 1e-14:
                if la[k] < -_BARY_TOL:
                    ok = False
                    break
                continue
            tc = (-_BARY_TOL - la[k]) / dl
            if dl > 0.0:
                t0 = max(t0, tc)
            else:
                t1 = min(t1, tc)
        if ok and t1 - t0 > 1e-12:
            intervals.append((t0, t1, e))
    breaks = {0.0, 1.0}
    for t0, t1, _ in intervals:
        breaks.add(min(max(t0, 0.0), 1.0))
        breaks.add(min(max(t1, 0.0), 1.0))
    breaks = sorted(breaks)
    pieces = []
    for u0, u1 in zip(breaks[:-1], breaks[1:]):
        if u1 - u0 < 1e-12:
            continue
        mid = 0.5 * (u0 + u1)
        owners = [e for (t0, t1, e) in intervals if t0 - 1e-9 <= mid <= t1 + 1e-9]
        if not owners:
            pm = p0 + mid * (p1 - p0)
            owners = [mesh.locate(pm)[0]]
        pieces.append((u0, u1, min(owners)))
    return pieces


def embed_yarn(mesh, yarn):
    """Host elements, interpolation weights, and segment pieces for a yarn.

    Each yarn vertex must land in exactly one element (face ties break to
    the lowest element index), and each segment is cut at element borders
    so that line integrals can be evaluated element by element.
    """
    rest = yarn.rest_vertices
    n_yarn = len(rest)
    host = np.empty(n_yarn, dtype=int)
    weights = np.empty((n_yarn, 4))
    for v in range(n_yarn):
        host[v], weights[v] = mesh.locate(rest[v])
    w = np.clip(weights, 0.0, 1.0)
    w /= w.sum(axis=1, keepdims=True)
    weights = w
    rows = np.repeat(np.arange(n_yarn), 4)
    cols = mesh.tets[host].reshape(-1)
    interp = sp.csr_matrix((weights.reshape(-1), (rows, cols)), shape=(n_yarn, mesh.n_nodes))

    pc_e, pc_s, pc_a, pc_b = [], [], [], []
    for si, s in enumerate(yarn.segments):
        cells = segment_cells(rest[s[0]], rest[s[1]], mesh.cell_size, mesh.origin)
        cand = []
        for c in cells:
            cand.extend(mesh._voxel_tets.get(mesh._voxel_lookup.get(c, -1), []))
        for u0, u1, e in _clip_segment(mesh, rest[s[0]], rest[s[1]], sorted(set(cand))):
            pc_e.append(e)
            pc_s.append(si)
            pc_a.append(u0)
            pc_b.append(u1)

    seg_len = np.linalg.norm(rest[yarn.segments[:, 1]] - rest[yarn.segments[:, 0]], axis=1)
    seg_rho = yarn.segment_density()
    ym = np.zeros(n_yarn)
    np.add.at(ym, yarn.segments[:, 0], 0.5 * seg_len * seg_rho)
    np.add.at(ym, yarn.segments[:, 1], 0.5 * seg_len * seg_rho)

    return YarnEmbedding(
        host_elem=host,
        host_weights=weights,
        interp=interp,
        piece_elem=np.asarray(pc_e, dtype=int),
        piece_seg=np.asarray(pc_s, dtype=int),
        piece_t0=np.asarray(pc_a),
        piece_t1=np.asarray(pc_b),
        yarn_mass=ym,
    )


def scatter_line_mass(mesh, elem, p0, p1, mass, out):
    """Add the lumped share of a straight mass-carrying piece to its nodes.

    The shape functions are linear along the piece, so the line integral of
    each one is the average of its endpoint values times the piece mass.
    """
    la = mesh.barycentric(elem, p0)
    lb = mesh.barycentric(elem, p1)
    out[mesh.tets[elem]] += mass * 0.5 * (la + lb)


def lump_mass(mesh, yarn, embedding=None):
    """Lumped node masses from the yarn line density.

    Every segment piece hands its mass to the host element nodes through
    the exact line integral of the shape functions, so the total node mass
    equals the total yarn mass to roundoff.
    """
    if embedding is None:
        embedding = embed_yarn(mesh, yarn)
    rest = yarn.rest_vertices
    segs = yarn.segments
    seg_len = np.linalg.norm(rest[segs[:, 1]] - rest[segs[:, 0]], axis=1)
    seg_rho = yarn.segment_density()
    masses = np.zeros(mesh.n_nodes)
    for e, si, t0, t1 in zip(
        embedding.piece_elem, embedding.piece_seg, embedding.piece_t0, embedding.piece_t1
    ):
        a = rest[segs[si, 0]]
        d = rest[segs[si, 1]] - rest[segs[si, 0]]
        m = seg_rho[si] * seg_len[si] * (t1 - t0)
        scatter_line_mass(mesh, e, a + t0 * d, a + t1 * d, m, masses)
    mesh.node_mass = masses
    return masses


# ---------------------------------------------------------------------------
# element adjacency (used by the harmonic coefficient basis)


def element_adjacency(mesh):
    """Sparse symmetric adjacency of elements sharing a triangular face."""
    faces = {}
    pairs = []
    for e, t in enumerate(mesh.tets):
        for f in itertools.combinations(sorted(t), 3):
            other = faces.pop(f, None)
            if other is None:
                faces[f] = e
            else:
                pairs.append((other, e))
    if not pairs:
        return sp.csr_matrix((mesh.n_elements, mesh.n_elements))
    pairs = np.array(pairs)
    data = np.ones(len(pairs))
    A = sp.coo_matrix(
        (data, (pairs[:, 0], pairs[:, 1])), shape=(mesh.n_elements, mesh.n_elements)
    )
    A = A + A.T
    return A.tocsr()


def boundary_faces(mesh):
    """Outward-oriented triangles of the mesh boundary."""
    counts = {}
    for e, t in enumerate(mesh.tets):
        for k in range(4):
            face = tuple(np.delete(t, k))
            key = tuple(sorted(face))
            counts.setdefault(key, []).append((e, k))
    out = []
    for key, hits in counts.items():
        if len(hits) != 1:
            continue
        e, k = hits[0]
        t = mesh.tets[e]
        face = list(np.delete(t, k))
        a, b, c = (mesh.nodes[i] for i in face)
        inner = mesh.nodes[t[k]]
        n = np.cross(b - a, c - a)
        if np.dot(n, inner - a) > 0.0:
            face = [face[0], face[2], face[1]]
        out.append(face)
    return np.array(sorted(out), dtype=int)


# ---------------------------------------------------------------------------
# mesh files


def write_mesh(mesh, prefix, comment=None):
    """Write <prefix>.node, <prefix>.ele, <prefix>.json and <prefix>_boundary.obj."""
    head = f"# {comment}\n" if comment else ""
    with open(f"{prefix}.node", "w") as fh:
        fh.write(head)
        fh.write(f"{mesh.n_nodes} 3 0 0\n")
        for i, p in enumerate(mesh.nodes):
            fh.write(f"{i} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    with open(f"{prefix}.ele", "w") as fh:
        fh.write(head)
        fh.write(f"{mesh.n_elements} 4 0\n")
        for i, t in enumerate(mesh.tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")
    meta = {
        "cell_size": mesh.cell_size,
        "origin": [float(v) for v in mesh.origin],
        "voxels": [[int(v) for v in c] for c in mesh.voxels],
        "tet_voxel": [int(v) for v in mesh.tet_voxel],
    }
    if mesh.node_mass is not None:
        meta["node_mass"] = [float(v) for v in mesh.node_mass]
    if comment:
        meta["comment"] = comment
    with open(f"{prefix}.json", "w") as fh:
        json.dump(meta, fh)
    tris = boundary_faces(mesh)
    with open(f"{prefix}_boundary.obj", "w") as fh:
        fh.write(head)
        for p in mesh.nodes:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for f in tris:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_mesh(prefix):
    """Read a mesh written by write_mesh."""

    def rows(path):
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    yield line.split()

    it = rows(f"{prefix}.node")
    n = int(next(it)[0])
    nodes = np.empty((n, 3))
    for r in it:
        nodes[int(r[0])] = [float(v) for v in r[1:4]]
    it = rows(f"{prefix}.ele")
    m = int(next(it)[0])
    tets = np.empty((m, 4), dtype=int)
    for r in it:
        tets[int(r[0])] = [int(v) for v in r[1:5]]
    with open(f"{prefix}.json") as fh:
        meta = json.load(fh)
    origin = np.asarray(meta["origin"], dtype=float)
    h = float(meta["cell_size"])
    grid = np.rint((nodes - origin) / h).astype(int)
    mesh = VolumeMesh(
        nodes=nodes,
        tets=tets,
        cell_size=h,
        origin=origin,
        node_grid=grid,
        voxels=np.asarray(meta["voxels"], dtype=int),
        tet_voxel=np.asarray(meta["tet_voxel"], dtype=int),
    )
    if "node_mass" in meta:
        mesh.node_mass = np.asarray(meta["node_mass"], dtype=float)
    return mesh
