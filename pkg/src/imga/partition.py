"""Element cost model, weighted space-filling-curve partitioning and overlap tags."""
import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .classify import Marker

DEFAULT_RATIO = 3.3
MIN_SAMPLES = 30


@dataclass(frozen=True)
class WeightModel:
    """``ratio`` is the cost of one surface point relative to one volume point."""
    ratio: float = DEFAULT_RATIO
    n_tgp: int = 8

    def __post_init__(self):
        if self.ratio <= 0:
            raise ValueError("cost ratio must be positive")
        if self.n_tgp < 8:
            raise ValueError("a full element has at least 8 quadrature points")

    @classmethod
    def for_basis(cls, bf, ratio=DEFAULT_RATIO):
        return cls(ratio, (bf + 1) ** 3)


def element_weight(marker, n_vgp=0, n_sgp=0, model=WeightModel()):
    if marker == Marker.OUT:
        return 1.0
    if marker == Marker.IN:
        return 0.0
    return n_vgp / model.n_tgp + model.ratio * n_sgp / model.n_tgp


def element_weights(markers, plan=None, model=WeightModel()):
    """Vectorised :func:`element_weight` over all leaves."""
    w = np.where(markers == Marker.OUT, 1.0, 0.0)
    cut = np.flatnonzero(markers == Marker.INTERCEPTED)
    if cut.size:
        if plan is None:
            raise ValueError("intercepted elements need a quadrature plan")
        w[plan.elements] = (plan.n_volume + model.ratio * plan.n_surface) / model.n_tgp
    return w


@dataclass(frozen=True)
class CostRatio:
    ratio: float
    std: float
    t_volume: float
    t_surface: float


def estimate_cost_ratio(t_volume, t_surface):
    """Mean per-point volume cost over mean per-point surface cost.

    Non-positive samples are discarded; at least 30 valid samples of each are
    required. ``std`` propagates the sample spreads to first order.
    """
    tv = np.asarray(t_volume, float)
    ts = np.asarray(t_surface, float)
    tv, ts = tv[tv > 0], ts[ts > 0]
    if tv.size < MIN_SAMPLES or ts.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} positive samples of each kind")
    mv, ms = tv.mean(), ts.mean()
    r = mv / ms
    std = r * np.hypot(tv.std(ddof=1) / mv, ts.std(ddof=1) / ms)
    return CostRatio(float(r), float(std), float(mv), float(ms))


@dataclass
class PartitionResult:
    bounds: np.ndarray   # p + 1 offsets into the SFC-ordered leaf list
    weights: np.ndarray  # per part
    counts: np.ndarray   # per part

    @property
    def p(self):
        return int(self.counts.size)

    def part_of(self):
        return np.repeat(np.arange(self.p), self.counts)

    def imbalance(self):
        ideal = self.weights.sum() / self.p
        return float(self.weights.max() / ideal)


def weighted_sfc_partition(weights, p):
    """Cut the SFC-ordered weights into ``p`` contiguous ranges.

    The k-th cut is the leaf boundary whose prefix sum is nearest to
    ``k * total / p``, kept strictly increasing so no part is empty.
    """
    w = np.asarray(weights, float)
    n = w.size
    if p < 1:
        raise ValueError("need at least one part")
    if p > n:
        raise ValueError(f"{p} parts requested for {n} leaves")
    prefix = np.concatenate([[0.0], np.cumsum(w)])
    total = prefix[-1]
    if total <= 0:
        raise ValueError("total weight must be positive")
    bounds = [0]
    for k in range(1, p):
        lo, hi = bounds[-1] + 1, n - (p - k)
        target = k * total / p
        j = np.searchsorted(prefix[lo:hi + 1], target)
        cand = [c for c in (lo + j - 1, lo + j) if lo <= c <= hi]
        bounds.append(min(cand, key=lambda c: (abs(prefix[c] - target), c)))
    bounds.append(n)
    b = np.array(bounds, dtype=np.int64)
    part_w = prefix[b[1:]] - prefix[b[:-1]]
    return PartitionResult(b, np.add.reduceat(w, b[:-1]) if n else part_w, np.diff(b))


def equal_count_partition(n, p, weights=None):
    b = np.round(np.linspace(0, n, p + 1)).astype(np.int64)
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    return PartitionResult(b, np.add.reduceat(w, b[:-1]), np.diff(b))


@dataclass
class ImbalanceStats:
    count_fraction: np.ndarray
    weight_fraction: np.ndarray

    def to_csv(self, path, result):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["part", "elements", "weight", "element_fraction", "weight_fraction"])
            for k in range(result.p):
                out.writerow([k, int(result.counts[k]), repr(float(result.weights[k])),
                              repr(float(self.count_fraction[k])), repr(float(self.weight_fraction[k]))])


def imbalance_stats(result):
    return ImbalanceStats(result.counts / result.counts.max(),
                          result.weights / result.weights.max())


INDEPENDENT, DEPENDENT = 0, 1


def element_dofs(nodemap):
    """Sparse element-by-global-dof incidence (hanging nodes expanded)."""
    n_el, nloc = nodemap.conn.shape
    rows = sp.csr_matrix((np.ones(n_el * nloc), (np.repeat(np.arange(n_el), nloc),
                                                 nodemap.conn.ravel())),
                         shape=(n_el, nodemap.n_nodes))
    inc = (rows @ nodemap.constraint).tocsr()
    inc.data[:] = 1.0
    return inc


def tag_elements(tree, result, nodemap):
    """Dependent when an element shares a degree of freedom with another part."""
    part = result.part_of()
    if part.size != tree.n_leaves:
        raise ValueError("partition does not cover the tree")
    inc = element_dofs(nodemap).tocoo()
    owner = part[inc.row]
    lo = np.full(nodemap.n_global, np.iinfo(np.int64).max)
    hi = np.full(nodemap.n_global, -1)
    np.minimum.at(lo, inc.col, owner)
    np.maximum.at(hi, inc.col, owner)
    shared = lo != hi
    tags = np.zeros(part.size, dtype=np.int8)
    dep_rows = np.unique(inc.row[shared[inc.col]])
    tags[dep_rows] = DEPENDENT
    return tags
