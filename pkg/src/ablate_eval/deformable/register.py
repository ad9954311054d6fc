"""Coarse-to-fine discrete deformable registration.

Each level places a uniform control lattice over the fixed image, gives every
node a cube of candidate displacements, scores them by descriptor similarity
and solves the MRF energy

    E(f) = sum_p D(f_p) + alpha * sum_(p,q) |u_p - u_q|^2 / |x_p - x_q|

exactly on a minimum spanning tree of the 6-connected lattice, then polishes
the tree optimum with coordinate descent on the full lattice. ``u_p`` is the
node's total displacement in mm (running field plus the level's increment).
The increments are upsampled trilinearly and added to the running field.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from ..errors import NumericalError, ValidationError
from ..volume import DisplacementField, GridMeta, Mask, Volume, check_same_grid, normalize
from ..warp import apply_field
from . import mrf
from .ssc import compute_ssc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LevelConfig:
    node_spacing: int  # voxels
    l_max: int
    q: int  # label quantisation step, voxels

    def __post_init__(self):
        if self.node_spacing < 1 or self.l_max < 0 or self.q < 1:
            raise ValidationError(f"invalid level config {self}")


DEFAULT_LEVELS = (LevelConfig(8, 6, 2), LevelConfig(6, 4, 1), LevelConfig(4, 2, 1))


@dataclass
class DeformConfig:
    levels: tuple = DEFAULT_LEVELS
    alpha: float = 0.02  # balances mean-abs descriptor costs against mm^2 smoothness
    patch_radius: int = 1
    samples_per_axis: int = 4  # patch samples per axis for the data term
    refine_sweeps: int = 20  # full-lattice coordinate-descent sweeps after the tree solve
    keep_best: bool = True  # fall back to the zero increment if it has lower lattice energy

    def __post_init__(self):
        self.levels = tuple(lv if isinstance(lv, LevelConfig) else LevelConfig(*lv) for lv in self.levels)
        if not self.levels:
            raise ValidationError("at least one level is required")
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.refine_sweeps < 0:
            raise ValidationError("refine_sweeps must be >= 0")
        if self.patch_radius < 0 or self.samples_per_axis < 1:
            raise ValidationError("patch_radius must be >= 0 and samples_per_axis >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["levels"] = [asdict(lv) for lv in self.levels]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DeformConfig":
        d = dict(d)
        if "levels" in d:
            d["levels"] = tuple(LevelConfig(**lv) if isinstance(lv, dict) else LevelConfig(*lv)
                                for lv in d["levels"])
        return cls(**d)


@dataclass(frozen=True)
class ControlGrid:
    """Uniform node lattice with nodes at voxel indices ``k * node_spacing``.

    The lattice extends far enough that its last node reaches or passes the last
    voxel on every axis.
    """

    node_spacing: int
    grid: GridMeta
    level: int = 0

    @property
    def shape(self) -> tuple:
        """Node lattice array shape (kz, ky, kx)."""
        s = self.node_spacing
        return tuple(int(math.ceil((n - 1) / s)) + 1 for n in self.grid.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def node_voxels(self) -> np.ndarray:
        """(N, 3) node positions (z, y, x) in voxel units, flat lattice order."""
        kz, ky, kx = self.shape
        s = self.node_spacing
        zz, yy, xx = np.meshgrid(np.arange(kz) * s, np.arange(ky) * s, np.arange(kx) * s, indexing="ij")
        return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)

    def node_world(self) -> np.ndarray:
        """(N, 3) node positions (x, y, z) in mm."""
        return self.grid.index_to_world(self.node_voxels()[:, ::-1].astype(np.float64))

    def edge_length_mm(self, axis: int) -> float:
        return self.node_spacing * self.grid.spacing[axis]


@dataclass(frozen=True)
class LabelSpace:
    l_max: int
    q: int

    @property
    def size(self) -> int:
        return (2 * self.l_max + 1) ** 3

    def units(self) -> np.ndarray:
        """(L, 3) label coordinates (x, y, z) in quantisation units."""
        return mrf.label_grid(self.l_max)

    def voxels_zyx(self) -> np.ndarray:
        """(L, 3) displacement in voxels, (z, y, x) order, for the cost kernel."""
        return (self.units() * self.q)[:, ::-1].copy()

    def mm(self, spacing) -> np.ndarray:
        """(L, 3) displacement in mm, (x, y, z) order."""
        return self.units() * self.q * np.asarray(spacing, dtype=np.float64)

    @property
    def zero_index(self) -> int:
        return self.size // 2


def patch_offsets(node_spacing: int, samples_per_axis: int = 4) -> np.ndarray:
    """Deterministic sample offsets (z, y, x) spanning a node's cell."""
    r = node_spacing // 2
    k = max(1, min(samples_per_axis, 2 * r + 1))
    one = np.unique(np.floor(np.linspace(-r, r, k) + 0.5).astype(np.int64))
    oz, oy, ox = np.meshgrid(one, one, one, indexing="ij")
    return np.stack([oz.ravel(), oy.ravel(), ox.ravel()], axis=1)


# ----------------------------------------------------------------------------
# Energy terms


def reg_cost(u_p, u_q, x_p, x_q) -> float:
    """Pairwise smoothness ``|u_p - u_q|^2 / |x_p - x_q|`` (mm units)."""
    dist = float(np.linalg.norm(np.asarray(x_p, dtype=np.float64) - np.asarray(x_q, dtype=np.float64)))
    if dist == 0.0:
        raise ValidationError("reg_cost needs distinct node positions")
    du = np.asarray(u_p, dtype=np.float64) - np.asarray(u_q, dtype=np.float64)
    return float(du @ du) / dist


def data_cost(desc_fixed, desc_moving, p_zyx, f_p_zyx, offsets, excl_fixed=None, excl_moving=None) -> float:
    """Data term for one node and one displacement (voxels, z-y-x order).

    Mean absolute difference between the fixed descriptors sampled at
    ``p + o`` and the moving descriptors at ``p + o + f_p`` over the patch
    offsets ``o``; coordinates are clamped to the grid.
    """
    shape = desc_fixed.shape[:3]
    hi = np.asarray(shape) - 1
    pts = np.clip(np.asarray(p_zyx)[None, :] + offsets, 0, hi)
    qts = np.clip(pts + np.asarray(f_p_zyx)[None, :], 0, hi)
    keep = np.ones(len(pts), dtype=bool)
    if excl_fixed is not None:
        keep &= ~excl_fixed[tuple(pts.T)]
    if excl_moving is not None:
        keep &= ~excl_moving[tuple(qts.T)]
    if not keep.any():
        return 0.0
    a = desc_fixed[tuple(pts[keep].T)].astype(np.float64)
    b = desc_moving[tuple(qts[keep].T)].astype(np.float64)
    return float(np.abs(a - b).mean())


def _edge_terms(cgrid: ControlGrid, edges: np.ndarray, labels: LabelSpace, prior: np.ndarray, alpha: float):
    """Per-edge quadratic weights and shifts in label units.

    For an edge (i, j) the cost is ``sum_a w[a] (f_i[a] - f_j[a] + shift[a])^2``.
    """
    qs = labels.q * np.asarray(cgrid.grid.spacing)
    lengths = np.array([cgrid.edge_length_mm(a) for a in range(3)])[edges[:, 2]]
    w = alpha * qs[None, :] ** 2 / lengths[:, None]
    shift = (prior[edges[:, 0]] - prior[edges[:, 1]]) / qs[None, :]
    return w, shift


def _neighbour_terms(cgrid: ControlGrid, edges: np.ndarray, labels: LabelSpace, prior: np.ndarray, alpha: float):
    """Per-node view of the lattice edges for the coordinate-descent refinement."""
    n = cgrid.n_nodes
    nbr = np.full((n, 6), -1, dtype=np.int64)
    nw = np.zeros((n, 6, 3))
    ns = np.zeros((n, 6, 3))
    if len(edges):
        w, shift = _edge_terms(cgrid, edges, labels, prior, alpha)
        i, j, ax = edges[:, 0], edges[:, 1], edges[:, 2]
        nbr[i, 2 * ax + 1] = j
        nw[i, 2 * ax + 1] = w
        ns[i, 2 * ax + 1] = shift
        nbr[j, 2 * ax] = i
        nw[j, 2 * ax] = w
        ns[j, 2 * ax] = -shift
    return nbr, nw, ns


def total_energy(unary: np.ndarray, cgrid: ControlGrid, labels: LabelSpace, assignment, alpha: float,
                 prior: Optional[np.ndarray] = None, edges: Optional[np.ndarray] = None) -> float:
    """Energy of ``assignment`` over the full 6-connected lattice (or the given edges).

    ``unary`` is the (N, L) data-cost table and ``prior`` the (N, 3) running
    displacement at the nodes in mm.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    n = cgrid.n_nodes
    prior = np.zeros((n, 3)) if prior is None else np.asarray(prior, dtype=np.float64)
    data = float(unary[np.arange(n), assignment].sum())
    if edges is None:
        edges = mrf.lattice_edges(cgrid.shape)
    if len(edges) == 0 or alpha == 0:
        return data
    u = prior + labels.mm(cgrid.grid.spacing)[assignment]
    du = u[edges[:, 0]] - u[edges[:, 1]]
    lengths = np.array([cgrid.edge_length_mm(a) for a in range(3)])[edges[:, 2]]
    return data + alpha * float(((du * du).sum(axis=1) / lengths).sum())


# ----------------------------------------------------------------------------
# Level optimisation


@dataclass
class LevelResult:
    labels: np.ndarray  # (N,) final label indices
    tree_labels: np.ndarray  # (N,) exact tree optimum
    displacement: np.ndarray  # (N, 3) increment in mm, (x, y, z)
    unary: np.ndarray
    tree_edges: np.ndarray  # (child, parent)
    tree_energy: float
    energy_zero: float
    energy: float
    used_fallback: bool
    refine_sweeps: int = 0


def node_features(desc: np.ndarray, nodes: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Mean descriptor over each node's patch samples, (N, C)."""
    hi = np.asarray(desc.shape[:3]) - 1
    pts = np.clip(nodes[:, None, :] + offsets[None, :, :], 0, hi)
    return desc[pts[..., 0], pts[..., 1], pts[..., 2]].astype(np.float64).mean(axis=1)


def solve_lattice(unary: np.ndarray, cgrid: ControlGrid, labels: LabelSpace, alpha: float,
                  prior: np.ndarray, edge_weights: np.ndarray, keep_best: bool = True,
                  refine_sweeps: int = 20) -> LevelResult:
    edges = mrf.lattice_edges(cgrid.shape)
    n = cgrid.n_nodes
    root = n // 2
    order, parent, tree_edges = mrf.spanning_tree(n, edges, edge_weights, root)
    # orient weights/shifts along child -> parent
    w = np.zeros((n, 3))
    shift = np.zeros((n, 3))
    if len(tree_edges):
        children = tree_edges[:, 0]
        parents = tree_edges[:, 1]
        diff = np.abs(cgrid.node_voxels()[children] - cgrid.node_voxels()[parents])
        axis = 2 - np.argmax(diff, axis=1)  # array axis -> world axis
        te = np.stack([children, parents, axis], axis=1)
        ew, es = _edge_terms(cgrid, te, labels, prior, alpha)
        w[children] = ew
        shift[children] = es
    units = labels.units()
    ties = mrf.tie_order(units)
    assign, tree_energy = mrf.tree_dp(np.ascontiguousarray(unary, dtype=np.float64), order, parent,
                                      w, shift, units.astype(np.int64), ties.astype(np.int64))
    zero = np.full(n, labels.zero_index, dtype=np.int64)
    e_zero = total_energy(unary, cgrid, labels, zero, alpha, prior, edges)
    refined, sweeps = assign, 0
    if refine_sweeps > 0 and len(edges):
        # refine both the tree optimum and the zero assignment on the full
        # lattice and keep the lower energy
        nbr, nw, ns = _neighbour_terms(cgrid, edges, labels, prior, alpha)
        u64 = np.ascontiguousarray(unary, dtype=np.float64)
        refined, sweeps = mrf.icm_refine(u64, assign, nbr, nw, ns, units.astype(np.int64),
                                         ties.astype(np.int64), refine_sweeps)
        from_zero, sweeps0 = mrf.icm_refine(u64, zero, nbr, nw, ns, units.astype(np.int64),
                                            ties.astype(np.int64), refine_sweeps)
        if (total_energy(unary, cgrid, labels, from_zero, alpha, prior, edges)
                < total_energy(unary, cgrid, labels, refined, alpha, prior, edges)):
            refined, sweeps = from_zero, sweeps0
    e_out = total_energy(unary, cgrid, labels, refined, alpha, prior, edges)
    fallback = keep_best and e_zero < e_out
    final = zero if fallback else refined
    return LevelResult(
        labels=final, tree_labels=assign,
        displacement=labels.mm(cgrid.grid.spacing)[final],
        unary=unary, tree_edges=tree_edges, tree_energy=float(tree_energy),
        energy_zero=e_zero, energy=min(e_zero, e_out) if keep_best else e_out,
        used_fallback=bool(fallback), refine_sweeps=int(sweeps),
    )


def optimize_level(desc_fixed: np.ndarray, desc_moving: np.ndarray, cgrid: ControlGrid, labels: LabelSpace,
                   alpha: float, prior: Optional[np.ndarray] = None, excl_fixed=None, excl_moving=None,
                   samples_per_axis: int = 4, keep_best: bool = True, refine_sweeps: int = 20) -> LevelResult:
    """Choose one displacement increment per node.

    ``desc_moving`` must already reflect the running field (the moving image is
    warped before its descriptors are computed); ``prior`` carries that field at
    the nodes (mm) so the smoothness term acts on total displacements.
    """
    shape = desc_fixed.shape[:3]
    nodes = cgrid.node_voxels()
    offsets = patch_offsets(cgrid.node_spacing, samples_per_axis)
    ef = np.zeros(shape, dtype=bool) if excl_fixed is None else np.asarray(excl_fixed, dtype=bool)
    em = np.zeros(shape, dtype=bool) if excl_moving is None else np.asarray(excl_moving, dtype=bool)
    mrf.configure_threads()
    unary = mrf.data_cost_table(desc_fixed, desc_moving, nodes.astype(np.int64), offsets,
                                labels.voxels_zyx().astype(np.int64), ef, em)
    feats = node_features(desc_fixed, nodes, offsets)
    edges = mrf.lattice_edges(cgrid.shape)
    edge_w = np.abs(feats[edges[:, 0]] - feats[edges[:, 1]]).sum(axis=1)
    prior = np.zeros((cgrid.n_nodes, 3)) if prior is None else prior
    return solve_lattice(unary, cgrid, labels, alpha, prior, edge_w, keep_best, refine_sweeps)


def scale_field(node_disp: np.ndarray, cgrid: ControlGrid, target: Optional[GridMeta] = None) -> DisplacementField:
    """Trilinearly interpolate (N, 3) node displacements (mm) to a dense field."""
    target = target or cgrid.grid
    kshape = cgrid.shape
    nodes = np.asarray(node_disp, dtype=np.float64).reshape(kshape + (3,))
    if not np.any(nodes):
        return DisplacementField.zeros(target)
    # voxel index of target voxels expressed in node units
    s = cgrid.node_spacing
    ratio = np.asarray(target.spacing) / np.asarray(cgrid.grid.spacing)
    axes = [np.arange(n) * r / s for n, r in zip(target.shape, ratio[::-1])]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    out = np.empty(target.shape + (3,))
    for c in range(3):
        out[..., c] = ndimage.map_coordinates(nodes[..., c], coords, order=1, mode="nearest", prefilter=False)
    return DisplacementField(out, target)


def sample_field_at_nodes(field: DisplacementField, cgrid: ControlGrid) -> np.ndarray:
    if not np.any(field.data):
        return np.zeros((cgrid.n_nodes, 3))
    nodes = cgrid.node_voxels().T.astype(np.float64)
    out = np.empty((cgrid.n_nodes, 3))
    for c in range(3):
        out[:, c] = ndimage.map_coordinates(field.data[..., c], nodes, order=1, mode="nearest", prefilter=False)
    return out


# ----------------------------------------------------------------------------
# Driver


@dataclass
class DeformResult:
    field: DisplacementField
    report: dict = field(default_factory=dict)


def register_deformable(moving: Volume, fixed: Volume, exclude_moving: Optional[Mask] = None,
                        exclude_fixed: Optional[Mask] = None, cfg: Optional[DeformConfig] = None,
                        return_result: bool = False):
    """Register ``moving`` (already rigidly aligned) onto ``fixed``.

    Voxels inside ``exclude_moving`` / ``exclude_fixed`` (tumor and treatment
    regions) are left out of the data term. Returns the dense displacement
    field on the fixed grid, pulling moving onto fixed via
    ``moving(x + u(x))``; with ``return_result`` a :class:`DeformResult`
    carrying a per-level report is returned instead.
    """
    cfg = cfg or DeformConfig()
    grid = check_same_grid(moving, fixed, exclude_moving, exclude_fixed, what="deformable registration inputs")
    if np.ptp(moving.data) == 0 or np.ptp(fixed.data) == 0:
        raise NumericalError("deformable registration needs non-constant images")

    fixed_n = normalize(fixed)
    moving_n = normalize(moving)
    desc_f = compute_ssc(fixed_n, cfg.patch_radius)
    ef = None if exclude_fixed is None else exclude_fixed.data
    running = DisplacementField.zeros(grid)
    levels_report = []
    for li, lv in enumerate(cfg.levels):
        t0 = time.perf_counter()
        warped = apply_field(moving_n, running)
        desc_m = compute_ssc(warped, cfg.patch_radius)
        em = None if exclude_moving is None else apply_field(exclude_moving, running).data
        cgrid = ControlGrid(lv.node_spacing, grid, li)
        labels = LabelSpace(lv.l_max, lv.q)
        prior = sample_field_at_nodes(running, cgrid)
        res = optimize_level(desc_f, desc_m, cgrid, labels, cfg.alpha, prior, ef, em,
                             cfg.samples_per_axis, cfg.keep_best, cfg.refine_sweeps)
        inc = scale_field(res.displacement, cgrid, grid)
        running = DisplacementField(running.data.astype(np.float64) + inc.data, grid)
        levels_report.append({
            "level": li, "node_spacing": lv.node_spacing, "l_max": lv.l_max, "q": lv.q,
            "nodes": cgrid.n_nodes, "labels": labels.size,
            "energy_before": res.energy_zero, "energy_after": res.energy,
            "tree_energy": res.tree_energy, "used_fallback": res.used_fallback,
            "refine_sweeps": res.refine_sweeps,
            "seconds": round(time.perf_counter() - t0, 3),
        })
        log.info("deformable level %d: energy %.4f -> %.4f (%d nodes, %d labels)",
                 li, res.energy_zero, res.energy, cgrid.n_nodes, labels.size)
    report = {
        "levels": levels_report,
        "config": cfg.to_json(),
        "descriptor": "ssc-6-neighbourhood-12ch",
        "optimizer": "mst-tree-dp+lattice-icm",
        "neighbourhood": "6-connected",
        "mean_displacement_mm": float(running.magnitude().mean()),
    }
    if return_result:
        return DeformResult(running, report)
    return running
