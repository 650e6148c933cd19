"""Yarn-level model: polyline geometry, material normals, and a small
elastic-rod simulator used to produce ground-truth pose sequences.

The simulator is deliberately simple: per-segment stretch springs,
second-neighbor distance springs as a bending stand-in, quadratic
vertex-vertex contact penalties, and optional plane/sphere colliders,
integrated with implicit Euler through a projective local/global loop.
It exists to generate plausible desk-scale motion, not to model real rods.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .material import minimal_rotation


class YarnModel:
    """Polyline yarn geometry with rest and deformed states.

    polylines are runs of vertex indices; consecutive pairs form segments.
    linear_density is mass per unit length, constant along each polyline.
    """

    def __init__(self, rest_vertices, polylines, linear_density=1.0, radius=None,
                 deformed_vertices=None):
        self.rest_vertices = np.array(rest_vertices, dtype=float)
        if self.rest_vertices.ndim != 2 or self.rest_vertices.shape[1] != 3:
            raise ValueError("rest vertices must be (n, 3)")
        if not np.all(np.isfinite(self.rest_vertices)):
            raise ValueError("non-finite rest vertex")
        self.polylines = [np.asarray(p, dtype=int) for p in polylines]
        if not self.polylines:
            raise ValueError("yarn must contain at least one polyline")
        n = len(self.rest_vertices)
        segs, seg_poly = [], []
        for pi, run in enumerate(self.polylines):
            if run.ndim != 1 or len(run) < 2:
                raise ValueError(f"polyline {pi} must list at least two vertices")
            if run.min() < 0 or run.max() >= n:
                raise ValueError(f"polyline {pi} references a missing vertex")
            for a, b in zip(run[:-1], run[1:]):
                segs.append((a, b))
                seg_poly.append(pi)
        self.segments = np.array(segs, dtype=int)
        self.segment_poly = np.array(seg_poly, dtype=int)
        rl = np.linalg.norm(
            self.rest_vertices[self.segments[:, 1]] - self.rest_vertices[self.segments[:, 0]],
            axis=1,
        )
        bad = np.flatnonzero(rl < 1e-12)
        if len(bad):
            raise ValueError(f"zero-length rest segment at index {bad[0]}")
        self.rest_lengths = rl
        dens = np.asarray(linear_density, dtype=float)
        if dens.ndim == 0:
            dens = np.full(len(self.polylines), float(dens))
        if len(dens) != len(self.polylines):
            raise ValueError("need one linear density per polyline")
        self.linear_density = dens
        self.radius = float(radius) if radius is not None else 0.25 * float(np.median(rl))
        if deformed_vertices is None:
            self.deformed_vertices = self.rest_vertices.copy()
        else:
            self.deformed_vertices = np.array(deformed_vertices, dtype=float)
            if self.deformed_vertices.shape != self.rest_vertices.shape:
                raise ValueError("deformed vertices must match rest vertex count")
        self.segment_normals = None    # (nS, 2, 3) once computed

    @property
    def n_vertices(self):
        return len(self.rest_vertices)

    @property
    def n_segments(self):
        return len(self.segments)

    def segment_density(self):
        return self.linear_density[self.segment_poly]

    def total_mass(self):
        return float(np.dot(self.rest_lengths, self.segment_density()))

    def vertex_mass(self):
        """Half of each incident segment's mass, per vertex."""
        m = np.zeros(self.n_vertices)
        sm = 0.5 * self.rest_lengths * self.segment_density()
        np.add.at(m, self.segments[:, 0], sm)
        np.add.at(m, self.segments[:, 1], sm)
        return m

    def polyline_segments(self, pi):
        """Indices of the segments belonging to polyline pi, in order."""
        return np.flatnonzero(self.segment_poly == pi)

    def with_deformed(self, x):
        out = YarnModel(
            self.rest_vertices,
            self.polylines,
            linear_density=self.linear_density,
            radius=self.radius,
            deformed_vertices=x,
        )
        out.segment_normals = self.segment_normals
        return out


def compute_segment_normals(model):
    """Populate rest-frame material normals by parallel transport.

    The first segment of each polyline picks the coordinate axis least
    aligned with its direction (ties to the lower axis index) and
    orthogonalizes it; later segments carry the previous frame over by the
    minimal rotation between consecutive directions, then re-orthonormalize
    so {d, n1, n2} stays a right-handed triple.
    """
    rest = model.rest_vertices
    normals = np.empty((model.n_segments, 2, 3))
    for pi in range(len(model.polylines)):
        seg_ids = model.polyline_segments(pi)
        prev_d = None
        n1 = None
        for si in seg_ids:
            a, b = model.segments[si]
            d = rest[b] - rest[a]
            d = d / np.linalg.norm(d)
            if prev_d is None:
                axis = int(np.argmin(np.abs(d)))
                n1 = np.zeros(3)
                n1[axis] = 1.0
            else:
                n1 = minimal_rotation(prev_d, d) @ n1
            n1 = n1 - np.dot(n1, d) * d
            n1 /= np.linalg.norm(n1)
            n2 = np.cross(d, n1)
            normals[si, 0] = n1
            normals[si, 1] = n2
            prev_d = d
    model.segment_normals = normals
    return model


# ---------------------------------------------------------------------------
# sequences


@dataclass
class YarnSequence:
    """Ordered deformed frames of one yarn model."""

    frames: np.ndarray                  # (nF, nY, 3)
    dt: float
    pins: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    external_force: np.ndarray = None   # (nF, nY, 3) or None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        self.pins = np.asarray(self.pins, dtype=int)
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    def force(self, i):
        if self.external_force is None:
            return np.zeros_like(self.frames[0])
        return self.external_force[i]


# ---------------------------------------------------------------------------
# rod simulator


@dataclass
class RodParams:
    """Spring and contact parameters for the yarn simulator."""

    stretch_stiffness: float = 500.0
    bend_stiffness: float = 0.5
    contact_stiffness: float = 200.0
    damping: float = 0.995            # velocity retained per step
    pd_iters: int = 24
    contacts: bool = True


def _second_neighbors(model):
    pairs = []
    for pi in range(len(model.polylines)):
        run = model.polylines[pi]
        for a, b in zip(run[:-2], run[2:]):
            pairs.append((a, b))
    return np.array(pairs, dtype=int).reshape(-1, 2)


def _pair_laplacian(n, pairs, weights):
    """Scalar graph Laplacian of weighted pair springs."""
    if len(pairs) == 0:
        return sp.csr_matrix((n, n))
    i, j = pairs[:, 0], pairs[:, 1]
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([weights, weights, -weights, -weights])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _pair_rhs(pairs, weights, targets, n):
    """Accumulate w * S^T p for pair difference constraints."""
    rhs = np.zeros((n, 3))
    if len(pairs):
        wp = weights[:, None] * targets
        np.add.at(rhs, pairs[:, 1], wp)
        np.add.at(rhs, pairs[:, 0], -wp)
    return rhs


def simulate_yarn(model, steps, dt, forces=None, pins=None, pin_targets=None,
                  params=None, colliders=(), record_forces=True):
    """Implicit-Euler rod dynamics, returned as a YarnSequence.

    forces: (nY, 3) constant or (steps, nY, 3) per step, in Newtons.
    pins: vertex indices held at pin_targets (per-step (nF, nP, 3) or
    constant (nP, 3); defaults to their rest positions).
    colliders: iterable of ("plane", point, normal) or ("sphere", center,
    radius) tuples that vertices may not penetrate.

    The step blows up (and raises) if any vertex moves more than ten times
    the longest rest segment within one step.
    """
    params = params or RodParams()
    n = model.n_vertices
    rest = model.rest_vertices
    x = model.deformed_vertices.copy()
    v = np.zeros((n, 3))
    mass = model.vertex_mass()

    pins = np.asarray(pins, dtype=int) if pins is not None else np.empty(0, dtype=int)
    free = np.setdiff1d(np.arange(n), pins)
    if pin_targets is None:
        pin_path = np.broadcast_to(rest[pins], (steps, len(pins), 3))
    else:
        pin_targets = np.asarray(pin_targets, dtype=float)
        if pin_targets.ndim == 2:
            pin_path = np.broadcast_to(pin_targets, (steps, len(pins), 3))
        else:
            pin_path = pin_targets
    if forces is None:
        force_path = np.zeros((steps, n, 3))
    else:
        forces = np.asarray(forces, dtype=float)
        force_path = np.broadcast_to(forces, (steps, n, 3))

    stretch = model.segments
    w_stretch = params.stretch_stiffness / model.rest_lengths
    bend = _second_neighbors(model)
    bend_rest = np.linalg.norm(rest[bend[:, 1]] - rest[bend[:, 0]], axis=1) if len(bend) else np.empty(0)
    w_bend = params.bend_stiffness / bend_rest if len(bend) else np.empty(0)

    base = (
        sp.diags(mass / dt**2)
        + _pair_laplacian(n, stretch, w_stretch)
        + _pair_laplacian(n, bend, w_bend)
    )
    blow = 10.0 * float(model.rest_lengths.max())
    frames = np.empty((steps, n, 3))
    rec_forces = np.empty((steps, n, 3)) if record_forces else None

    for step in range(steps):
        f_ext = force_path[step]
        xhat = x + dt * v + dt**2 * f_ext / mass[:, None]

        # contact pairs active for this whole step, found on the prediction
        if params.contacts and model.radius > 0.0:
            tree = cKDTree(xhat)
            raw = tree.query_pairs(model.radius, output_type="ndarray")
            if len(raw):
                skip = np.zeros(len(raw), dtype=bool)
                con = set(map(tuple, np.sort(stretch, axis=1)))
                con |= set(map(tuple, np.sort(bend, axis=1))) if len(bend) else set()
                for k, (a, b) in enumerate(np.sort(raw, axis=1)):
                    if (a, b) in con:
                        skip[k] = True
                contacts = raw[~skip]
            else:
                contacts = raw
        else:
            contacts = np.empty((0, 2), dtype=int)
        w_contact = np.full(len(contacts), params.contact_stiffness / max(model.radius, 1e-12))

        coll_idx = []
        for kind, *args in colliders:
            if kind == "plane":
                pnt, nrm = np.asarray(args[0], float), np.asarray(args[1], float)
                nrm = nrm / np.linalg.norm(nrm)
                pen = (xhat - pnt) @ nrm < 0.0
                coll_idx.append((np.flatnonzero(pen), kind, pnt, nrm))
            elif kind == "sphere":
                c, r = np.asarray(args[0], float), float(args[1])
                pen = np.linalg.norm(xhat - c, axis=1) < r
                coll_idx.append((np.flatnonzero(pen), kind, c, r))
            else:
                raise ValueError(f"unknown collider kind {kind!r}")
        w_coll = params.contact_stiffness / max(model.radius, 1e-12)

        A = base + _pair_laplacian(n, contacts, w_contact)
        for idx, *_ in coll_idx:
            if len(idx):
                A = A + sp.csr_matrix(
                    (np.full(len(idx), w_coll), (idx, idx)), shape=(n, n)
                )
        Aff = A[free][:, free].tocsc()
        Afp = A[free][:, pins] if len(pins) else None
        solve = spla.factorized(Aff)

        xp = pin_path[step]
        xi = xhat.copy()
        xi[pins] = xp
        const_rhs = (mass[:, None] / dt**2 * xhat)[free]
        for _ in range(params.pd_iters):
            d = xi[stretch[:, 1]] - xi[stretch[:, 0]]
            ln = np.linalg.norm(d, axis=1)
            tgt = d * (model.rest_lengths / np.maximum(ln, 1e-12))[:, None]
            rhs = _pair_rhs(stretch, w_stretch, tgt, n)
            if len(bend):
                d = xi[bend[:, 1]] - xi[bend[:, 0]]
                ln = np.linalg.norm(d, axis=1)
                tgt = d * (bend_rest / np.maximum(ln, 1e-12))[:, None]
                rhs += _pair_rhs(bend, w_bend, tgt, n)
            if len(contacts):
                d = xi[contacts[:, 1]] - xi[contacts[:, 0]]
                ln = np.linalg.norm(d, axis=1)
                goal = np.maximum(ln, model.radius)
                tgt = d * (goal / np.maximum(ln, 1e-12))[:, None]
                rhs += _pair_rhs(contacts, w_contact, tgt, n)
            for idx, kind, a0, a1 in coll_idx:
                if not len(idx):
                    continue
                if kind == "plane":
                    q = xi[idx] - np.minimum((xi[idx] - a0) @ a1, 0.0)[:, None] * a1
                else:
                    rel = xi[idx] - a0
                    ln = np.linalg.norm(rel, axis=1)
                    q = a0 + rel * (np.maximum(ln, a1) / np.maximum(ln, 1e-12))[:, None]
                rhs[idx] += w_coll * q
            b = const_rhs + rhs[free]
            if len(pins):
                b = b - Afp @ xp
            xi[free] = solve(b)

        if not np.all(np.isfinite(xi)) or np.abs(xi - x).max() > blow:
            err = RuntimeError(f"yarn simulation diverged at frame {step}")
            # frames computed so far ride along so callers can keep them
            err.partial = YarnSequence(
                frames=frames[:step].copy(), dt=dt, pins=pins,
                external_force=rec_forces[:step].copy() if record_forces else None)
            raise err
        v = params.damping * (xi - x) / dt
        x = xi
        frames[step] = x
        if record_forces:
            rec_forces[step] = f_ext

    return YarnSequence(frames=frames, dt=dt, pins=pins, external_force=rec_forces)


def rod_energy(model, x, params=None, forces=None):
    """Discrete elastic + external energy of the simulator's spring system.

    Used by tests as the objective of an independent equilibrium oracle.
    Contact terms are omitted (oracle scenes keep yarns separated).
    """
    params = params or RodParams()
    x = x.reshape(-1, 3)
    rest = model.rest_vertices
    d = x[model.segments[:, 1]] - x[model.segments[:, 0]]
    w = params.stretch_stiffness / model.rest_lengths
    e = 0.5 * np.sum(w * (np.linalg.norm(d, axis=1) - model.rest_lengths) ** 2)
    bend = _second_neighbors(model)
    if len(bend):
        br = np.linalg.norm(rest[bend[:, 1]] - rest[bend[:, 0]], axis=1)
        d = x[bend[:, 1]] - x[bend[:, 0]]
        e += 0.5 * np.sum(params.bend_stiffness / br * (np.linalg.norm(d, axis=1) - br) ** 2)
    if forces is not None:
        e -= float(np.sum(forces * x))
    return e


# ---------------------------------------------------------------------------
# yarn geometry factories


def straight_strand(n_vertices, length=1.0, axis=(1.0, 0.0, 0.0), origin=(0.0, 0.0, 0.0),
                    linear_density=1.0, radius=None):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    t = np.linspace(0.0, length, n_vertices)
    pts = np.asarray(origin, float) + t[:, None] * axis
    return YarnModel(pts, [np.arange(n_vertices)], linear_density, radius)


def rib_patch(courses=10, wales=40, course_spacing=0.01, wale_spacing=0.01,
              amplitude=0.004, rib_period=4, linear_density=0.002, radius=None):
    """Rib-texture proxy patch: parallel wavy courses with alternating phase.

    Vertices undulate out of plane with a phase that flips every rib_period
    wales and from course to course, giving the characteristic ridged
    texture without modeling actual loop topology.
    """
    pts = []
    runs = []
    vid = 0
    for c in range(courses):
        run = []
        phase = np.pi * (c % 2)
        for w in range(wales):
            x = w * wale_spacing
            y = c * course_spacing
            z = amplitude * np.sin(np.pi * (w // rib_period) + phase)
            z += 0.35 * amplitude * np.sin(2.0 * np.pi * w / rib_period + phase)
            pts.append((x, y, z))
            run.append(vid)
            vid += 1
        runs.append(np.array(run))
    return YarnModel(np.array(pts), runs, linear_density, radius)


# ---------------------------------------------------------------------------
# file formats


def write_yarn(model, path, deformed=False, comment=None):
    """Text format: `yarn <nV> <nP>` header, `v x y z` lines, `l i0 i1 ...` lines."""
    pts = model.deformed_vertices if deformed else model.rest_vertices
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"yarn {model.n_vertices} {len(model.polylines)}\n")
        for p in pts:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for run in model.polylines:
            fh.write("l " + " ".join(str(int(i)) for i in run) + "\n")


def read_yarn(path, linear_density=1.0, radius=None):
    verts, runs = [], []
    nv = npoly = None
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok or tok[0] == "#":
                continue
            if tok[0] == "yarn":
                nv, npoly = int(tok[1]), int(tok[2])
            elif tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "l":
                runs.append([int(t) for t in tok[1:]])
    if nv is None or len(verts) != nv or len(runs) != npoly:
        raise ValueError(f"malformed yarn file {path}")
    return YarnModel(np.array(verts), [np.array(r) for r in runs], linear_density, radius)


def write_sequence(model, seq, directory, comment=None):
    """Write rest yarn, one frame file per pose, and sequence.json."""
    os.makedirs(directory, exist_ok=True)
    write_yarn(model, os.path.join(directory, "rest.yarn"), comment=comment)
    names = []
    for i in range(seq.n_frames):
        name = f"frame_{i:04d}.yarn"
        write_yarn(model.with_deformed(seq.frames[i]), os.path.join(directory, name),
                   deformed=True, comment=comment)
        names.append(name)
    meta = {
        "dt": seq.dt,
        "rest": "rest.yarn",
        "frames": names,
        "pins": [int(i) for i in seq.pins],
        "linear_density": [float(v) for v in model.linear_density],
        "radius": model.radius,
    }
    if seq.external_force is not None:
        np.save(os.path.join(directory, "external_force.npy"), seq.external_force)
        meta["external_force"] = "external_force.npy"
    if comment:
        meta["comment"] = comment
    with open(os.path.join(directory, "sequence.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def read_sequence(directory):
    """Read what write_sequence wrote; returns (model, sequence)."""
    with open(os.path.join(directory, "sequence.json")) as fh:
        meta = json.load(fh)
    model = read_yarn(
        os.path.join(directory, meta["rest"]),
        linear_density=np.asarray(meta.get("linear_density", 1.0)),
        radius=meta.get("radius"),
    )
    frames = np.stack([
        read_yarn(os.path.join(directory, nm)).rest_vertices for nm in meta["frames"]
    ])
    ext = None
    if "external_force" in meta:
        ext = np.load(os.path.join(directory, meta["external_force"]))
    return model, YarnSequence(
        frames=frames,
        dt=float(meta["dt"]),
        pins=np.asarray(meta.get("pins", []), dtype=int),
        external_force=ext,
    )
