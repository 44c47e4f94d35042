"""Quasi-interpolation onto the coarse space and its kernel constraints.

The operator is  I_H = E_H o Pi_H : first project onto the broken coarse Q1
space element by element (exact L2 projection, closed form on the uniform
grid), then average the element traces at each coarse node. Nodes on the
Dirichlet boundary are set to zero, so the range of I_H is the coarse space
with the essential boundary condition built in. The fine-scale space of the
method is the kernel of I_H, which corrector problems impose through the
constraint matrices built here.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import fem
from .grid import box_connectivity

__all__ = ["InterpOperator"]


def _node_cardinality(counts):
    """Number of mesh elements adjacent to each node of a structured grid."""
    counts = np.asarray(counts, dtype=np.int64)
    n_nodes = int(np.prod(counts + 1))
    card = np.ones(n_nodes, dtype=float)
    rem = np.arange(n_nodes, dtype=np.int64)
    for a in range(len(counts)):
        coord = rem % (counts[a] + 1)
        rem = rem // (counts[a] + 1)
        card *= np.where((coord > 0) & (coord < counts[a]), 2.0, 1.0)
    return card


class InterpOperator:
    """Precomputed stencils for I_H on a MeshPair."""

    def __init__(self, mesh):
        self.mesh = mesh
        d = mesh.dim
        r = mesh.refine
        # W[i, p] = integral over one coarse cell of (coarse hat i) * (fine hat p);
        # tensor product of 1D rows, all exact because both factors are P1 per cell
        W = None
        for a in reversed(range(d)):
            # 1D fine mass on the cell's subgrid, then rows against the two hats
            nf = int(r[a])
            M = np.zeros((nf + 1, nf + 1))
            m1 = np.array([[2.0, 1.0], [1.0, 2.0]]) * (mesh.h[a] / 6.0)
            for e in range(nf):
                M[e : e + 2, e : e + 2] += m1
            hat = np.stack([1.0 - np.arange(nf + 1) / nf, np.arange(nf + 1) / nf])
            w1 = hat @ M
            W = w1 if W is None else np.kron(W, w1)
        self.W = W
        Mc = fem.element_mass(mesh.H)
        self.proj = np.linalg.solve(Mc, W)  # (2^d, (r+1)^d): nodal coefficients
        self.card = _node_cardinality(mesh.coarse)
        self.dirichlet = mesh.dirichlet_coarse_mask()
        self._corner_nodes = box_connectivity(tuple(mesh.coarse))
        self._matrix = None

    def project_broken(self, v):
        """Elementwise L2 projection: (n_coarse_elems, 2^d) corner values per cell."""
        nodes = self.mesh.fine_nodes_of_coarse_elems()
        v = np.asarray(v, dtype=float)
        return v[nodes] @ self.proj.T

    def node_average(self, broken):
        """Average element traces at each coarse node; zero on Dirichlet nodes."""
        out = np.zeros(self.mesh.n_coarse_nodes)
        np.add.at(out, self._corner_nodes, broken)
        out /= self.card
        out[self.dirichlet] = 0.0
        return out

    def interpolate(self, v):
        return self.node_average(self.project_broken(v))

    def matrix(self):
        """Global sparse I_H: (n_coarse_nodes, n_fine_nodes)."""
        if self._matrix is None:
            mesh = self.mesh
            nodes = mesh.fine_nodes_of_coarse_elems()
            n_ce, n_loc = nodes.shape
            m = self.proj.shape[0]
            rows = np.repeat(self._corner_nodes, n_loc, axis=1).reshape(-1)
            cols = np.tile(nodes, (1, m)).reshape(-1)
            weights = (1.0 / self.card)[self._corner_nodes]  # (n_ce, m)
            vals = (weights[:, :, None] * self.proj[None, :, :]).reshape(-1)
            M = sp.coo_matrix(
                (vals, (rows, cols)), shape=(mesh.n_coarse_nodes, mesh.n_fine_nodes)
            ).tocsr()
            # zero the Dirichlet rows
            keep = sp.diags((~self.dirichlet).astype(float))
            self._matrix = (keep @ M).tocsr()
        return self._matrix

    def patch_constraint_matrix(self, p, dofs):
        """Rows of I_H (extension by zero) for a patch, on the free fine dofs.

        Row r is the value of I_H(v~) at constrained coarse node r, where v~
        extends a patch function by zero: elements outside the patch then
        contribute zero traces but still count in the node cardinality, so the
        weights use the global mesh adjacency. Cached by patch geometry.
        """
        key = ("constraints", p.shape_key)
        cache = self.mesh._cache
        if key in cache:
            C = cache[key]
        else:
            shape = p.shape
            corner_nodes = box_connectivity(tuple(shape))  # patch-local coarse nodes
            # global cardinality of the patch coarse nodes, gathered through the
            # patch-local layout; identical for all patches sharing shape_key
            card_global = self.card[p.coarse_nodes()]
            conn_nodes = _patch_fine_nodes_of_cells(shape, self.mesh.refine)
            n_cells, n_loc = conn_nodes.shape
            m = corner_nodes.shape[1]
            rows = np.repeat(corner_nodes, n_loc, axis=1).reshape(-1)
            cols = np.tile(conn_nodes, (1, m)).reshape(-1)
            weights = (1.0 / card_global)[corner_nodes]
            vals = (weights[:, :, None] * self.proj[None, :, :]).reshape(-1)
            C = sp.coo_matrix(
                (vals, (rows, cols)), shape=(p.n_coarse_nodes, p.n_fine_nodes)
            ).tocsr()
            C = C[dofs.cons_coarse_local][:, dofs.free].tocsr()
            cache[key] = C
        return C


def _patch_fine_nodes_of_cells(shape, refine):
    """(n_cells, (r+1)^d) patch-local fine node indices per patch coarse cell."""
    from .grid import box_lex_indices

    shape = np.asarray(shape, dtype=np.int64)
    refine = np.asarray(refine, dtype=np.int64)
    d = len(shape)
    fine_counts = shape * refine
    n_cells = int(np.prod(shape))
    out = np.empty((n_cells, int(np.prod(refine + 1))), dtype=np.int64)
    rem = np.arange(n_cells, dtype=np.int64)
    multis = np.zeros((n_cells, d), dtype=np.int64)
    for a in range(d):
        multis[:, a] = rem % shape[a]
        rem = rem // shape[a]
    for c in range(n_cells):
        mlt = multis[c]
        out[c] = box_lex_indices(mlt * refine, (mlt + 1) * refine, fine_counts + 1)
    return out
