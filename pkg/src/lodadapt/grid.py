"""Structured tensor-product grid pairs, element patches, and face enumerations.

The solver operates on a pair of nested axis-aligned grids over a box domain:
a coarse quadrilateral/hexahedral mesh and a uniform refinement of it that
resolves the coefficient. Elements and nodes are numbered lexicographically
with the x index running fastest. All localization happens on index boxes, so
patches, faces and dof partitions reduce to integer box arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "MeshPair",
    "Patch",
    "FaceSet",
    "DofPartition",
    "build_mesh_pair",
    "patch",
    "faces",
    "classify_fine_dofs",
    "box_lex_indices",
    "box_connectivity",
]


def _as_int_vec(values, dim, name):
    arr = np.asarray(values, dtype=np.int64)
    if arr.shape != (dim,):
        raise ValueError(f"{name} must have {dim} entries, got shape {arr.shape}")
    return arr


def box_lex_indices(lo, hi, counts):
    """Lexicographic global indices of the inclusive index box [lo, hi].

    ``counts`` are the global grid extents per axis; the returned array walks
    the box in local lexicographic order (axis 0 fastest), so reshaping it to
    ``hi - lo + 1`` recovers the tensor layout.
    """
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    axes = [np.arange(lo[a], hi[a] + 1, dtype=np.int64) for a in range(len(counts))]
    idx = np.zeros(1, dtype=np.int64)
    stride = 1
    out = axes[0]
    for a in range(1, len(counts)):
        stride *= counts[a - 1]
        out = (out[None, :] + stride * axes[a][:, None]).reshape(-1)
    return out if len(counts) > 1 else axes[0].copy()


@lru_cache(maxsize=None)
def box_connectivity(elem_counts):
    """Element-to-node map for a structured box of Q1 elements.

    Returns an ``(n_elems, 2**d)`` array of local node indices; element order
    and the corner order within an element are both lexicographic (x fastest),
    i.e. corner p has offset (p & 1, (p >> 1) & 1, ...).
    """
    counts = np.asarray(elem_counts, dtype=np.int64)
    d = len(counts)
    node_counts = counts + 1
    first = box_lex_indices(np.zeros(d, dtype=np.int64), counts - 1, node_counts)
    offsets = np.zeros(2**d, dtype=np.int64)
    stride = 1
    for a in range(d):
        bit = (np.arange(2**d) >> a) & 1
        offsets = offsets + bit * stride
        stride *= node_counts[a]
    return first[:, None] + offsets[None, :]


@dataclass
class MeshPair:
    """A coarse mesh and its uniform refinement on a box domain.

    Attributes:
        lo, hi: domain corners.
        coarse: coarse element counts per axis.
        refine: refinement factor per axis (fine = coarse * refine).
        dirichlet: (d, 2) flags selecting whole domain sides as Dirichlet
            boundary; the remaining boundary is natural (Neumann).
    """

    lo: np.ndarray
    hi: np.ndarray
    coarse: np.ndarray
    refine: np.ndarray
    dirichlet: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self):
        return len(self.coarse)

    @property
    def fine(self):
        return self.coarse * self.refine

    @property
    def H(self):
        return (self.hi - self.lo) / self.coarse

    @property
    def h(self):
        return (self.hi - self.lo) / self.fine

    @property
    def n_coarse_elems(self):
        return int(np.prod(self.coarse))

    @property
    def n_fine_elems(self):
        return int(np.prod(self.fine))

    @property
    def n_coarse_nodes(self):
        return int(np.prod(self.coarse + 1))

    @property
    def n_fine_nodes(self):
        return int(np.prod(self.fine + 1))

    def coarse_multi(self, T):
        """Multi-index of coarse element(s) T (lexicographic, x fastest)."""
        T = np.asarray(T, dtype=np.int64)
        out = np.empty(T.shape + (self.dim,), dtype=np.int64)
        rem = T
        for a in range(self.dim):
            out[..., a] = rem % self.coarse[a]
            rem = rem // self.coarse[a]
        return out

    def node_coords(self, counts):
        """Coordinates of the nodes of the grid with ``counts`` elements per axis."""
        axes = [
            np.linspace(self.lo[a], self.hi[a], int(counts[a]) + 1)
            for a in range(self.dim)
        ]
        grids = np.meshgrid(*axes, indexing="ij")
        # meshgrid 'ij' puts axis 0 slowest; transpose to x-fastest lex order
        stacked = np.stack([g.T.reshape(-1) if self.dim > 1 else g for g in grids], axis=-1)
        return stacked

    def fine_node_coords(self):
        return self.node_coords(self.fine)

    def coarse_node_coords(self):
        return self.node_coords(self.coarse)

    def midpoints(self, counts):
        """Element midpoints of the grid with ``counts`` elements per axis."""
        counts = np.asarray(counts, dtype=np.int64)
        h = (self.hi - self.lo) / counts
        axes = [self.lo[a] + h[a] * (np.arange(counts[a]) + 0.5) for a in range(self.dim)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.T.reshape(-1) if self.dim > 1 else g for g in grids], axis=-1)

    def fine_midpoints(self):
        return self.midpoints(self.fine)

    def coarse_midpoints(self):
        return self.midpoints(self.coarse)

    def boundary_node_mask(self, counts, dirichlet_only=True):
        """Mask over the nodes of an n-per-axis grid marking Dirichlet sides."""
        counts = np.asarray(counts, dtype=np.int64)
        n_nodes = int(np.prod(counts + 1))
        mask = np.zeros(n_nodes, dtype=bool)
        idx = np.arange(n_nodes, dtype=np.int64)
        rem = idx
        for a in range(self.dim):
            coord = rem % (counts[a] + 1)
            rem = rem // (counts[a] + 1)
            lo_side = coord == 0
            hi_side = coord == counts[a]
            if dirichlet_only:
                if self.dirichlet[a, 0]:
                    mask |= lo_side
                if self.dirichlet[a, 1]:
                    mask |= hi_side
            else:
                mask |= lo_side | hi_side
        return mask

    def dirichlet_fine_mask(self):
        key = "dirichlet_fine"
        if key not in self._cache:
            self._cache[key] = self.boundary_node_mask(self.fine)
        return self._cache[key]

    def dirichlet_coarse_mask(self):
        key = "dirichlet_coarse"
        if key not in self._cache:
            self._cache[key] = self.boundary_node_mask(self.coarse)
        return self._cache[key]

    def coarse_elem_of_fine_elem(self):
        """For every fine element, the index of the coarse element containing it."""
        key = "coarse_of_fine"
        if key not in self._cache:
            idx = np.arange(self.n_fine_elems, dtype=np.int64)
            rem = idx
            out = np.zeros(self.n_fine_elems, dtype=np.int64)
            stride = 1
            for a in range(self.dim):
                coord = rem % self.fine[a]
                rem = rem // self.fine[a]
                out += (coord // self.refine[a]) * stride
                stride *= self.coarse[a]
            self._cache[key] = out
        return self._cache[key]

    def fine_nodes_of_coarse_elems(self):
        """(n_coarse_elems, (r+1)**d) fine node indices per coarse element."""
        key = "fine_nodes_of_coarse"
        if key not in self._cache:
            d = self.dim
            r = self.refine
            n_ce = self.n_coarse_elems
            out = np.empty((n_ce, int(np.prod(r + 1))), dtype=np.int64)
            for T in range(n_ce):
                m = self.coarse_multi(T)
                out[T] = box_lex_indices(m * r, (m + 1) * r, self.fine + 1)
            self._cache[key] = out
        return self._cache[key]

    def fine_elems_of_coarse_elems(self):
        """(n_coarse_elems, r**d) fine element indices per coarse element."""
        key = "fine_elems_of_coarse"
        if key not in self._cache:
            r = self.refine
            n_ce = self.n_coarse_elems
            out = np.empty((n_ce, int(np.prod(r))), dtype=np.int64)
            for T in range(n_ce):
                m = self.coarse_multi(T)
                out[T] = box_lex_indices(m * r, (m + 1) * r - 1, self.fine)
            self._cache[key] = out
        return self._cache[key]


def build_mesh_pair(domain, coarse, refine, dirichlet_sides):
    """Validate and construct a MeshPair.

    Args:
        domain: sequence of (lo, hi) pairs, one per axis.
        coarse: coarse element counts per axis (positive ints).
        refine: refinement factors per axis (positive ints).
        dirichlet_sides: either a (d, 2) boolean layout, or a list of axis
            indices whose both sides are Dirichlet.
    """
    domain = np.asarray(domain, dtype=float)
    if domain.ndim != 2 or domain.shape[1] != 2:
        raise ValueError("domain must be a list of (lo, hi) pairs")
    dim = domain.shape[0]
    if dim not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {dim}")
    lo, hi = domain[:, 0].copy(), domain[:, 1].copy()
    if not np.all(hi > lo):
        raise ValueError("domain sides must have positive length")
    coarse = _as_int_vec(coarse, dim, "coarse")
    refine = _as_int_vec(refine, dim, "refine")
    if np.any(coarse < 1) or np.any(refine < 1):
        raise ValueError("coarse counts and refinement factors must be >= 1")
    diri = np.asarray(dirichlet_sides)
    if diri.dtype == bool and diri.shape == (dim, 2):
        flags = diri.copy()
    else:
        flags = np.zeros((dim, 2), dtype=bool)
        for a in np.asarray(dirichlet_sides, dtype=np.int64).ravel():
            if not 0 <= a < dim:
                raise ValueError(f"dirichlet axis {a} out of range for dim {dim}")
            flags[a, :] = True
    return MeshPair(lo=lo, hi=hi, coarse=coarse, refine=refine, dirichlet=flags)


@dataclass
class Patch:
    """The k-layer element patch around a coarse element: a clipped index box."""

    mesh: MeshPair
    T: int
    k: int
    lo: np.ndarray
    hi: np.ndarray

    @property
    def shape(self):
        """Coarse element counts of the patch box."""
        return self.hi - self.lo + 1

    @property
    def fine_counts(self):
        return self.shape * self.mesh.refine

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    @property
    def n_fine_elems(self):
        return int(np.prod(self.fine_counts))

    @property
    def n_fine_nodes(self):
        return int(np.prod(self.fine_counts + 1))

    @property
    def n_coarse_nodes(self):
        return int(np.prod(self.shape + 1))

    @property
    def center_local(self):
        """Multi-index of the home element within the patch box."""
        return self.mesh.coarse_multi(self.T) - self.lo

    @property
    def touch_lo(self):
        return self.lo == 0

    @property
    def touch_hi(self):
        return self.hi == self.mesh.coarse - 1

    @property
    def shape_key(self):
        """Cache key shared by all patches with identical local geometry."""
        return (
            tuple(self.shape),
            tuple(self.center_local),
            tuple(self.touch_lo),
            tuple(self.touch_hi),
        )

    def coarse_elems(self):
        return box_lex_indices(self.lo, self.hi, self.mesh.coarse)

    def fine_elems(self):
        r = self.mesh.refine
        return box_lex_indices(self.lo * r, (self.hi + 1) * r - 1, self.mesh.fine)

    def fine_nodes(self):
        r = self.mesh.refine
        return box_lex_indices(self.lo * r, (self.hi + 1) * r, self.mesh.fine + 1)

    def coarse_nodes(self):
        return box_lex_indices(self.lo, self.hi + 1, self.mesh.coarse + 1)

    def center_fine_elems_local(self):
        """Local indices (within the patch) of the home element's fine elements."""
        c = self.center_local
        r = self.mesh.refine
        return box_lex_indices(c * r, (c + 1) * r - 1, self.fine_counts)

    def cells_fine_elems_local(self):
        """(n_cells, r**d) local fine element indices per patch coarse cell."""
        return _cells_fine_elems_local(tuple(self.shape), tuple(self.mesh.refine))


@lru_cache(maxsize=None)
def _cells_fine_elems_local(shape, refine):
    shape = np.asarray(shape, dtype=np.int64)
    refine = np.asarray(refine, dtype=np.int64)
    d = len(shape)
    fine_counts = shape * refine
    n_cells = int(np.prod(shape))
    out = np.empty((n_cells, int(np.prod(refine))), dtype=np.int64)
    rem = np.arange(n_cells, dtype=np.int64)
    multis = np.zeros((n_cells, d), dtype=np.int64)
    for a in range(d):
        multis[:, a] = rem % shape[a]
        rem = rem // shape[a]
    for c in range(n_cells):
        m = multis[c]
        out[c] = box_lex_indices(m * refine, (m + 1) * refine - 1, fine_counts)
    return out


def patch(mesh, T, k):
    """The patch U_k(T): elements within k index layers of T, clipped to the mesh."""
    if not 0 <= T < mesh.n_coarse_elems:
        raise ValueError(f"element index {T} out of range")
    if k < 0:
        raise ValueError("patch radius k must be >= 0")
    m = mesh.coarse_multi(T)
    lo = np.maximum(m - k, 0)
    hi = np.minimum(m + k, mesh.coarse - 1)
    return Patch(mesh=mesh, T=int(T), k=int(k), lo=lo, hi=hi)


@dataclass
class FaceSet:
    """All faces of the coarse mesh, grouped by normal axis.

    Every face carries the unit normal +e_axis. ``elem_minus``/``elem_plus``
    hold the adjacent elements on the -n and +n side (-1 when absent, i.e. on
    the domain boundary). ``kind`` is 0 for interior faces, 1 for faces on the
    Dirichlet boundary and 2 for faces on the Neumann boundary.
    """

    mesh: MeshPair
    axis: np.ndarray
    plane: np.ndarray
    transverse: np.ndarray
    elem_minus: np.ndarray
    elem_plus: np.ndarray
    measure: np.ndarray
    kind: np.ndarray
    axis_offsets: np.ndarray

    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2

    @property
    def n_faces(self):
        return len(self.axis)

    def face_id(self, axis, plane, transverse):
        """Global face index from (axis, plane position, transverse cell multi)."""
        mesh = self.mesh
        counts = mesh.coarse
        others = [a for a in range(mesh.dim) if a != axis]
        idx = np.asarray(plane, dtype=np.int64)
        stride = counts[axis] + 1
        transverse = np.asarray(transverse, dtype=np.int64)
        for j, a in enumerate(others):
            t = transverse[..., j] if transverse.ndim > 1 else transverse[j]
            idx = idx + stride * t
            stride *= counts[a]
        return self.axis_offsets[axis] + idx

    def element_incidence(self):
        """Sparse (n_elems, n_faces) orientation matrix with +-1 entries.

        Entry (T, F) is +1 when n_F exits T (F is T's upper face along its
        axis) and -1 when n_F enters T. Row T lists the 2d faces of T.
        """
        import scipy.sparse as sp

        key = "incidence"
        if key not in self.mesh._cache:
            mesh = self.mesh
            n_el = mesh.n_coarse_elems
            rows, cols, vals = [], [], []
            interior = self.kind == self.INTERIOR
            for side_elems, sign in ((self.elem_minus, 1.0), (self.elem_plus, -1.0)):
                present = side_elems >= 0
                rows.append(side_elems[present])
                cols.append(np.nonzero(present)[0])
                vals.append(np.full(present.sum(), sign))
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            vals = np.concatenate(vals)
            theta = sp.coo_matrix((vals, (rows, cols)), shape=(n_el, self.n_faces))
            self.mesh._cache[key] = theta.tocsr()
        return self.mesh._cache[key]


def faces(mesh):
    """Enumerate the coarse faces of the mesh. Cached on the mesh."""
    key = "faces"
    if key in mesh._cache:
        return mesh._cache[key]
    d = mesh.dim
    counts = mesh.coarse
    H = mesh.H
    axis_l, plane_l, trans_l, eminus_l, eplus_l, meas_l, kind_l = ([] for _ in range(7))
    offsets = np.zeros(d + 1, dtype=np.int64)
    for a in range(d):
        others = [b for b in range(d) if b != a]
        face_counts = [counts[a] + 1] + [counts[b] for b in others]
        n_a = int(np.prod(face_counts))
        offsets[a + 1] = offsets[a] + n_a
        rem = np.arange(n_a, dtype=np.int64)
        plane = rem % face_counts[0]
        rem = rem // face_counts[0]
        trans = np.zeros((n_a, max(d - 1, 1)), dtype=np.int64)
        for j, b in enumerate(others):
            trans[:, j] = rem % counts[b]
            rem = rem // counts[b]
        # adjacent elements via the element multi-index with axis a at plane-1 / plane
        def elem_at(plane_coord):
            ok = (plane_coord >= 0) & (plane_coord < counts[a])
            multi = np.zeros((n_a, d), dtype=np.int64)
            multi[:, a] = np.clip(plane_coord, 0, counts[a] - 1)
            for j, b in enumerate(others):
                multi[:, b] = trans[:, j]
            idx = np.zeros(n_a, dtype=np.int64)
            stride = 1
            for b in range(d):
                idx += multi[:, b] * stride
                stride *= counts[b]
            return np.where(ok, idx, -1)

        eminus = elem_at(plane - 1)
        eplus = elem_at(plane)
        on_boundary = (eminus < 0) | (eplus < 0)
        kind = np.zeros(n_a, dtype=np.int64)
        is_diri = np.where(
            eminus < 0, bool(mesh.dirichlet[a, 0]), bool(mesh.dirichlet[a, 1])
        )
        kind[on_boundary] = np.where(is_diri[on_boundary], FaceSet.DIRICHLET, FaceSet.NEUMANN)
        measure = float(np.prod([H[b] for b in others])) if d > 1 else 1.0
        axis_l.append(np.full(n_a, a, dtype=np.int64))
        plane_l.append(plane)
        trans_l.append(trans)
        eminus_l.append(eminus)
        eplus_l.append(eplus)
        meas_l.append(np.full(n_a, measure))
        kind_l.append(kind)
    fs = FaceSet(
        mesh=mesh,
        axis=np.concatenate(axis_l),
        plane=np.concatenate(plane_l),
        transverse=np.concatenate(trans_l, axis=0),
        elem_minus=np.concatenate(eminus_l),
        elem_plus=np.concatenate(eplus_l),
        measure=np.concatenate(meas_l),
        kind=np.concatenate(kind_l),
        axis_offsets=offsets,
    )
    mesh._cache[key] = fs
    return fs


@dataclass
class DofPartition:
    """Free/fixed fine nodes of a patch plus the interpolation constraint nodes.

    Fixed nodes are those on the artificial patch boundary (inside the domain)
    together with nodes on the Dirichlet boundary; corrector problems solve on
    the free nodes. Constrained coarse nodes are the non-Dirichlet coarse
    nodes in the patch closure, whose quasi-interpolation values are pinned
    to zero.
    """

    free: np.ndarray
    fixed: np.ndarray
    cons_coarse_local: np.ndarray
    cons_coarse_global: np.ndarray


def classify_fine_dofs(mesh, p):
    """Partition the patch fine nodes and pick the constrained coarse nodes."""
    d = mesh.dim
    fine_counts = p.fine_counts
    n_nodes = p.n_fine_nodes
    fixed = np.zeros(n_nodes, dtype=bool)
    rem = np.arange(n_nodes, dtype=np.int64)
    for a in range(d):
        coord = rem % (fine_counts[a] + 1)
        rem = rem // (fine_counts[a] + 1)
        lo_is_domain = p.touch_lo[a]
        hi_is_domain = p.touch_hi[a]
        # artificial patch boundary is always fixed; domain boundary only if Dirichlet
        fixed |= (coord == 0) & (mesh.dirichlet[a, 0] if lo_is_domain else True)
        fixed |= (coord == fine_counts[a]) & (mesh.dirichlet[a, 1] if hi_is_domain else True)
    free = np.nonzero(~fixed)[0]
    fixed_idx = np.nonzero(fixed)[0]

    shape = p.shape
    n_cn = p.n_coarse_nodes
    cons = np.ones(n_cn, dtype=bool)
    rem = np.arange(n_cn, dtype=np.int64)
    for a in range(d):
        coord = rem % (shape[a] + 1)
        rem = rem // (shape[a] + 1)
        if p.touch_lo[a] and mesh.dirichlet[a, 0]:
            cons &= coord != 0
        if p.touch_hi[a] and mesh.dirichlet[a, 1]:
            cons &= coord != shape[a]
    cons_local = np.nonzero(cons)[0]
    cons_global = p.coarse_nodes()[cons_local]
    return DofPartition(
        free=free,
        fixed=fixed_idx,
        cons_coarse_local=cons_local,
        cons_coarse_global=cons_global,
    )
