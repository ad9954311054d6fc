"""Discrete MRF optimisation on a control-point lattice.

The pairwise term between lattice neighbours is quadratic in the label
difference, so the min-sum message from a child to its parent separates over
the three displacement axes and is computed with three 1D min-convolutions.
Messages are passed exactly along a minimum spanning tree of the lattice.

Labels live on a cube ``{-l_max..l_max}^3`` (units of the quantisation step);
the flat index of label ``(ix, iy, iz)`` is ``((iz + l) * n + (iy + l)) * n + (ix + l)``
with ``n = 2 l + 1``.
"""
from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, minimum_spanning_tree


def configure_threads() -> int:
    """Apply the ABLATE_EVAL_THREADS cap to numba's worker pool."""
    cap = os.environ.get("ABLATE_EVAL_THREADS")
    if cap:
        n = max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
    return numba.get_num_threads()


def label_grid(l_max: int) -> np.ndarray:
    """Integer label coordinates (x, y, z), shape ((2 l_max + 1)^3, 3), flat-index order."""
    r = np.arange(-l_max, l_max + 1)
    iz, iy, ix = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)


def tie_order(labels: np.ndarray) -> np.ndarray:
    """Label indices sorted by squared norm, then lexicographically on (x, y, z)."""
    norms = (labels.astype(np.int64) ** 2).sum(axis=1)
    return np.lexsort((labels[:, 2], labels[:, 1], labels[:, 0], norms))


@njit(parallel=True, cache=True)
def data_cost_table(desc_f, desc_m, nodes, offsets, disp, excl_f, excl_m):
    """Mean absolute descriptor difference for every (node, label).

    desc_f, desc_m: (nz, ny, nx, C) float32 descriptors of fixed / moving.
    nodes: (N, 3) int node positions (z, y, x) in voxels.
    offsets: (S, 3) int patch sample offsets (z, y, x).
    disp: (L, 3) int label displacements (z, y, x) in voxels.
    excl_f, excl_m: (nz, ny, nx) bool exclusion masks; excluded samples are
        dropped from the mean. A (node, label) with no valid sample costs 0.
    """
    nz, ny, nx, nc = desc_f.shape
    n_nodes = nodes.shape[0]
    n_lab = disp.shape[0]
    out = np.zeros((n_nodes, n_lab))
    for n in prange(n_nodes):
        acc = np.zeros(n_lab)
        cnt = np.zeros(n_lab, dtype=np.int64)
        for s in range(offsets.shape[0]):
            pz = min(max(nodes[n, 0] + offsets[s, 0], 0), nz - 1)
            py = min(max(nodes[n, 1] + offsets[s, 1], 0), ny - 1)
            px = min(max(nodes[n, 2] + offsets[s, 2], 0), nx - 1)
            if excl_f[pz, py, px]:
                continue
            for lab in range(n_lab):
                qz = min(max(pz + disp[lab, 0], 0), nz - 1)
                qy = min(max(py + disp[lab, 1], 0), ny - 1)
                qx = min(max(px + disp[lab, 2], 0), nx - 1)
                if excl_m[qz, qy, qx]:
                    continue
                d = 0.0
                for c in range(nc):
                    d += abs(np.float64(desc_f[pz, py, px, c]) - np.float64(desc_m[qz, qy, qx, c]))
                acc[lab] += d
                cnt[lab] += 1
        for lab in range(n_lab):
            if cnt[lab] > 0:
                out[n, lab] = acc[lab] / (cnt[lab] * nc)
    return out


@njit(cache=True)
def _min_conv_axis(b, axis, w, shift, n):
    """out[..j..] = min_i b[..i..] + w * (i - j + shift)^2 along one axis of an n^3 cube."""
    out = np.empty_like(b)
    for u in range(n):
        for v in range(n):
            for j in range(n):
                best = np.inf
                for i in range(n):
                    d = i - j + shift
                    if axis == 0:
                        val = b[u, v, i]
                    elif axis == 1:
                        val = b[u, i, v]
                    else:
                        val = b[i, u, v]
                    val += w * d * d
                    if val < best:
                        best = val
                if axis == 0:
                    out[u, v, j] = best
                elif axis == 1:
                    out[u, j, v] = best
                else:
                    out[j, u, v] = best
    return out


@njit(cache=True)
def tree_dp(unary, order, parent, weights, shifts, labels, ties):
    """Exact min-sum labelling of a tree.

    unary: (N, L) data costs.
    order: BFS order, root first. parent: parent index per node (root: -1).
    weights: (N, 3) per-axis quadratic weights of the edge node -> parent.
    shifts: (N, 3) per-axis offset delta so the edge cost is
        sum_a weights[a] * (f_node[a] - f_parent[a] + shifts[a])^2.
    labels: (L, 3) integer label coordinates (x, y, z). ties: tie-break order.
    Returns (assignment, minimum tree energy).
    """
    n_nodes, n_lab = unary.shape
    n = int(round(n_lab ** (1.0 / 3.0)))
    belief = unary.copy()
    for k in range(n_nodes - 1, 0, -1):
        c = order[k]
        p = parent[c]
        cube = belief[c].reshape((n, n, n))
        # the cube is indexed [iz, iy, ix]; axis 0 of _min_conv_axis is x
        cube = _min_conv_axis(cube, 0, weights[c, 0], shifts[c, 0], n)
        cube = _min_conv_axis(cube, 1, weights[c, 1], shifts[c, 1], n)
        cube = _min_conv_axis(cube, 2, weights[c, 2], shifts[c, 2], n)
        belief[p] += cube.reshape(n_lab)
    assign = np.empty(n_nodes, dtype=np.int64)
    root = order[0]
    best = np.inf
    best_l = 0
    for t in range(n_lab):
        lab = ties[t]
        if belief[root, lab] < best:
            best = belief[root, lab]
            best_l = lab
    assign[root] = best_l
    energy = best
    for k in range(1, n_nodes):
        c = order[k]
        fp = labels[assign[parent[c]]]
        best = np.inf
        best_l = 0
        for t in range(n_lab):
            lab = ties[t]
            v = belief[c, lab]
            for a in range(3):
                d = labels[lab, a] - fp[a] + shifts[c, a]
                v += weights[c, a] * d * d
            if v < best:
                best = v
                best_l = lab
        assign[c] = best_l
    return assign, energy


def lattice_edges(shape) -> np.ndarray:
    """6-neighbour edges ``(i, j, axis)`` of a node lattice of array shape (kz, ky, kx).

    ``axis`` is the world axis (0 = x, 1 = y, 2 = z) the edge runs along.
    """
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    edges = []
    for arr_axis, world_axis in ((2, 0), (1, 1), (0, 2)):
        a = np.take(idx, np.arange(shape[arr_axis] - 1), axis=arr_axis).ravel()
        b = np.take(idx, np.arange(1, shape[arr_axis]), axis=arr_axis).ravel()
        edges.append(np.stack([a, b, np.full_like(a, world_axis)], axis=1))
    return np.concatenate(edges) if edges else np.zeros((0, 3), dtype=np.int64)


def spanning_tree(n_nodes: int, edges: np.ndarray, weights: np.ndarray, root: int = 0):
    """Minimum spanning tree of the lattice and its BFS orientation.

    Returns ``(order, parent, tree_edges)``; ``tree_edges`` rows are ``(child, parent)``.
    """
    if n_nodes == 1:
        return np.zeros(1, dtype=np.int64), np.full(1, -1, dtype=np.int64), np.zeros((0, 2), dtype=np.int64)
    # csgraph treats 0 as "no edge", so shift all weights by a constant
    w = np.asarray(weights, dtype=np.float64) + 1.0
    g = coo_matrix((w, (edges[:, 0], edges[:, 1])), shape=(n_nodes, n_nodes)).tocsr()
    mst = minimum_spanning_tree(g)
    order, pred = breadth_first_order(mst, root, directed=False, return_predecessors=True)
    if len(order) != n_nodes:
        raise RuntimeError("control lattice is not connected")
    parent = pred.astype(np.int64)
    parent[root] = -1
    children = order[1:]
    tree_edges = np.stack([children, parent[children]], axis=1)
    return order.astype(np.int64), parent, tree_edges


@njit(cache=True)
def icm_refine(unary, assign, nbr, nbr_w, nbr_shift, labels, ties, max_sweeps):
    """Greedy coordinate descent on the full lattice energy.

    nbr: (N, 6) neighbour indices (-1 for none). nbr_w, nbr_shift: (N, 6, 3)
    quadratic weights and offsets, so the edge cost seen from node p is
    sum_a w[a] * (f_p[a] - f_q[a] + shift[a])^2. A node only moves when its
    local energy strictly drops, so the total energy never increases.
    Returns (assignment, sweeps used).
    """
    n_nodes, n_lab = unary.shape
    out = assign.copy()
    sweeps = 0
    for it in range(max_sweeps):
        sweeps += 1
        changed = 0
        for p in range(n_nodes):
            cur = out[p]
            best = np.inf
            best_l = cur
            for t in range(n_lab):
                lab = ties[t]
                v = unary[p, lab]
                for k in range(nbr.shape[1]):
                    q = nbr[p, k]
                    if q < 0:
                        continue
                    fq = out[q]
                    for a in range(3):
                        d = labels[lab, a] - labels[fq, a] + nbr_shift[p, k, a]
                        v += nbr_w[p, k, a] * d * d
                if v < best:
                    best = v
                    best_l = lab
            # recompute the current label's cost to compare on equal footing
            vc = unary[p, cur]
            for k in range(nbr.shape[1]):
                q = nbr[p, k]
                if q < 0:
                    continue
                fq = out[q]
                for a in range(3):
                    d = labels[cur, a] - labels[fq, a] + nbr_shift[p, k, a]
                    vc += nbr_w[p, k, a] * d * d
            if best < vc - 1e-12 and best_l != cur:
                out[p] = best_l
                changed += 1
        if changed == 0:
            break
    return out, sweeps
