"""Cluster tree and block cluster tree for hierarchical matrix assembly.

Indices are clustered by recursive bisection of the site cloud; pairs of
clusters form the block tree, where well-separated pairs become low-rank
leaves and small near pairs become dense leaves.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class HParams:
    leafsize: int = 32
    eta: float = 2.0
    aca_eps: float = 1e-4
    aca_max_rank: int = 256

    def __post_init__(self):
        if self.leafsize < 1:
            raise ValueError("leafsize must be >= 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0 < self.aca_eps < 1:
            raise ValueError("aca_eps must lie in (0, 1)")
        if self.aca_max_rank < 1:
            raise ValueError("aca_max_rank must be >= 1")


@dataclass
class ClusterNode:
    start: int                  # contiguous range [start, stop) into the permutation
    stop: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    children: list = field(default_factory=list)

    @property
    def size(self):
        return self.stop - self.start

    @property
    def is_leaf(self):
        return not self.children

    def diameter(self):
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))


@dataclass
class ClusterTree:
    root: ClusterNode
    perm: np.ndarray            # perm[slot] = original index at permuted slot
    positions: np.ndarray


def build_cluster_tree(positions, leafsize):
    """Recursive median bisection along the longest bounding-box axis.

    The lower half takes ceil(count/2) indices; coordinate ties are broken
    by original index, ascending, so the tree is a pure function of the
    input.  Recursion stops at `leafsize` indices.
    """
    positions = np.asarray(positions, dtype=float)
    if len(positions) == 0:
        raise ValueError("need at least one position")
    perm = np.arange(len(positions), dtype=np.int64)

    def build(lo, hi):
        idx = perm[lo:hi]
        pts = positions[idx]
        bmin, bmax = pts.min(axis=0), pts.max(axis=0)
        node = ClusterNode(lo, hi, bmin, bmax)
        count = hi - lo
        if count <= leafsize:
            return node
        axis = int(np.argmax(bmax - bmin))   # first max wins: x before y before z
        order = np.lexsort((idx, pts[:, axis]))
        perm[lo:hi] = idx[order]
        mid = lo + (count + 1) // 2
        node.children = [build(lo, mid), build(mid, hi)]
        return node

    root = build(0, len(positions))
    return ClusterTree(root=root, perm=perm, positions=positions)


def box_distance(amin, amax, bmin, bmax):
    """Euclidean distance between two axis-aligned boxes (0 if overlapping)."""
    gap = np.maximum(0.0, np.maximum(amin - bmax, bmin - amax))
    return float(np.sqrt(np.dot(gap, gap)))


def admissible_boxes(amin, amax, bmin, bmax, eta):
    """Separation test: max diameter bounded by eta times the box distance.

    Pairs at zero distance (overlapping or identical boxes) are never
    admissible, so self blocks stay dense even for degenerate point
    clusters.
    """
    dist = box_distance(amin, amax, bmin, bmax)
    if dist <= 0.0:
        return False
    da = np.linalg.norm(amax - amin)
    db = np.linalg.norm(bmax - bmin)
    return max(da, db) <= eta * dist


def admissible(t, s, eta):
    return admissible_boxes(t.bbox_min, t.bbox_max, s.bbox_min, s.bbox_max, eta)


LOWRANK = "lowrank"
DENSE = "dense"
SPLIT = "split"


@dataclass
class BlockNode:
    row: ClusterNode
    col: ClusterNode
    kind: str
    level: int
    children: list = field(default_factory=list)


def build_block_tree(root_t, root_s, params):
    """Standard admissibility-driven recursion over cluster pairs.

    Admissible pairs terminate as low-rank leaves; pairs of tree leaves
    terminate dense; otherwise the non-leaf sides are subdivided (a leaf
    paired with a non-leaf subdivides only the non-leaf side).
    """

    def build(t, s, level):
        if admissible(t, s, params.eta):
            return BlockNode(t, s, LOWRANK, level)
        if t.is_leaf and s.is_leaf:
            return BlockNode(t, s, DENSE, level)
        node = BlockNode(t, s, SPLIT, level)
        for tc in (t.children or [t]):
            for sc in (s.children or [s]):
                node.children.append(build(tc, sc, level + 1))
        return node

    return build(root_t, root_s, 1)


def block_leaves(root):
    """Leaf blocks in pre-order."""
    out = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.kind == SPLIT:
            stack.extend(reversed(node.children))
        else:
            out.append(node)
    return out
