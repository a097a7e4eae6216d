"""Per-page reading order: group clustering, recursive whitespace cuts,
and a gap/alignment fallback for regions the cuts cannot separate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .config import EngineConfig
from .docmodel import BoundingBox, SemanticCategory, hull_of
from .layout import LayoutNode, LayoutTree

PAGE_REGION = BoundingBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class OrderUnit:
    """One orderable unit: a standalone block, or a whole group collapsed."""

    unit_id: str
    page_index: int
    category: SemanticCategory
    boxes: tuple[BoundingBox, ...]
    member_ids: tuple[str, ...]

    @property
    def hull(self) -> BoundingBox:
        return hull_of(self.boxes)


@dataclass(frozen=True)
class Leaf:
    unit_ids: tuple[str, ...]


@dataclass(frozen=True)
class HCut:
    y: float
    children: tuple["CutTree", ...]


@dataclass(frozen=True)
class VCut:
    x: float
    children: tuple["CutTree", ...]


CutTree = Union[Leaf, HCut, VCut]


def group_cluster(tree: LayoutTree) -> list[OrderUnit]:
    """Collapse each group into one unit hulling all members.

    The anchor (the node owning partners) names the unit; members are kept in
    their own reading order (top-to-bottom, then left-to-right).
    """
    nodes = {n.id: n for n in tree.top_items()}
    partner_of: dict[str, str] = {}
    for node in tree.top_items():
        for _kind, other in node.group_links:
            if other not in nodes:
                continue  # link to a nested child; stays inside its parent
            other_node = nodes[other]
            if _is_anchor_side(node, other_node):
                partner_of[other] = node.id

    units: list[OrderUnit] = []
    for node in tree.top_items():
        if node.id in partner_of:
            continue
        member_nodes = [node] + [
            nodes[pid] for pid, aid in partner_of.items() if aid == node.id
        ]
        member_nodes.sort(key=lambda n: (n.box.y0, n.box.x0, n.id))
        units.append(
            OrderUnit(
                unit_id=node.id,
                page_index=tree.page_index,
                category=node.category,
                boxes=tuple(n.box for n in member_nodes),
                member_ids=tuple(n.id for n in member_nodes),
            )
        )
    return units


def _is_anchor_side(node: LayoutNode, other: LayoutNode) -> bool:
    from .docmodel import ANCHOR_CATEGORIES, PARTNER_CATEGORIES

    if node.category in ANCHOR_CATEGORIES and other.category in PARTNER_CATEGORIES:
        return True
    if node.category in PARTNER_CATEGORIES and other.category in ANCHOR_CATEGORIES:
        return False
    # Degenerate pairings (hint groups without a clear anchor/partner split):
    # the lexicographically smaller id acts as the anchor.
    return node.id < other.id


def _projection_gaps(
    units: list[OrderUnit], axis: str, min_gap: float
) -> list[tuple[float, float]]:
    """Interior empty gaps along one axis as (width, midpoint), widest first."""
    if axis == "y":
        intervals = sorted((u.hull.y0, u.hull.y1) for u in units)
    else:
        intervals = sorted((u.hull.x0, u.hull.x1) for u in units)
    merged: list[tuple[float, float]] = []
    for start, end in intervals:
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    gaps = []
    for (a0, a1), (b0, _b1) in zip(merged, merged[1:]):
        width = b0 - a1
        if width >= min_gap:
            gaps.append((width, (a1 + b0) / 2.0))
    gaps.sort(key=lambda g: (-g[0], g[1]))
    return gaps


def xy_cut(
    units: list[OrderUnit], region: BoundingBox = PAGE_REGION, cfg: EngineConfig | None = None
) -> CutTree:
    """Recursively split along the widest whitespace gap (>= min_gap).

    Horizontal cuts win ties. A region with no admissible gap becomes a leaf
    whose units are ordered by (y0, x0).
    """
    cfg = cfg or EngineConfig()
    if len(units) <= 1:
        return Leaf(tuple(u.unit_id for u in units))

    h_gaps = _projection_gaps(units, "y", cfg.min_gap)
    v_gaps = _projection_gaps(units, "x", cfg.min_gap)
    best_h = h_gaps[0] if h_gaps else None
    best_v = v_gaps[0] if v_gaps else None

    if best_h is None and best_v is None:
        ordered = sorted(units, key=lambda u: (u.hull.y0, u.hull.x0, u.unit_id))
        return Leaf(tuple(u.unit_id for u in ordered))

    use_horizontal = best_v is None or (best_h is not None and best_h[0] >= best_v[0])
    if use_horizontal:
        _, y = best_h
        first = [u for u in units if u.hull.center[1] < y]
        second = [u for u in units if u.hull.center[1] >= y]
        return HCut(
            y=y,
            children=(
                xy_cut(first, BoundingBox(region.x0, region.y0, region.x1, y), cfg),
                xy_cut(second, BoundingBox(region.x0, y, region.x1, region.y1), cfg),
            ),
        )
    _, x = best_v
    first = [u for u in units if u.hull.center[0] < x]
    second = [u for u in units if u.hull.center[0] >= x]
    return VCut(
        x=x,
        children=(
            xy_cut(first, BoundingBox(region.x0, region.y0, x, region.y1), cfg),
            xy_cut(second, BoundingBox(x, region.y0, region.x1, region.y1), cfg),
        ),
    )


def cut_leaves(tree: CutTree) -> list[Leaf]:
    if isinstance(tree, Leaf):
        return [tree]
    out: list[Leaf] = []
    for child in tree.children:
        out.extend(cut_leaves(child))
    return out


def gap_tree_order(
    units: list[OrderUnit],
    region: BoundingBox = PAGE_REGION,
    cfg: EngineConfig | None = None,
) -> list[str]:
    """Deterministic order for layouts the cuts cannot separate.

    u precedes v when u sits fully above v with enough horizontal overlap, or
    when both share a band (vertical overlap) and u starts clearly further
    left. The precedence graph is topologically sorted; ties and cycles break
    by (y0, x0, id).
    """
    cfg = cfg or EngineConfig()
    n = len(units)
    if n <= 1:
        return [u.unit_id for u in units]

    hulls = [u.hull for u in units]
    succ: list[set[int]] = [set() for _ in range(n)]
    indeg = [0] * n

    def add_edge(i: int, j: int) -> None:
        if j not in succ[i]:
            succ[i].add(j)
            indeg[j] += 1

    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = hulls[i], hulls[j]
            overlap_x = min(a.x1, b.x1) - max(a.x0, b.x0)
            min_w = min(a.width, b.width)
            if a.y1 <= b.y0 and min_w > 0 and overlap_x / min_w >= cfg.h_overlap:
                add_edge(i, j)
                continue
            overlap_y = min(a.y1, b.y1) - max(a.y0, b.y0)
            min_h = min(a.height, b.height)
            same_band = min_h > 0 and overlap_y / min_h >= cfg.v_overlap
            if same_band and (b.x0 - a.x0) >= cfg.align_tol:
                add_edge(i, j)

    def sort_key(i: int):
        return (hulls[i].y0, hulls[i].x0, units[i].unit_id)

    remaining = set(range(n))
    ready = sorted((i for i in remaining if indeg[i] == 0), key=sort_key)
    order: list[int] = []
    while remaining:
        if not ready:
            # Cycle: release the visually first node and drop its in-edges.
            victim = min(remaining, key=sort_key)
            indeg[victim] = 0
            ready = [victim]
        i = ready.pop(0)
        if i not in remaining:
            continue
        remaining.discard(i)
        order.append(i)
        changed = False
        for j in succ[i]:
            if j in remaining:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
                    changed = True
        if changed:
            ready.sort(key=sort_key)
    return [units[i].unit_id for i in order]


def order_units(tree: LayoutTree, cfg: EngineConfig | None = None) -> list[OrderUnit]:
    """Cluster groups, cut the page, refine unsplit leaves; ordered units."""
    cfg = cfg or EngineConfig()
    units = group_cluster(tree)
    if not units:
        return []
    by_id = {u.unit_id: u for u in units}
    cut = xy_cut(units, PAGE_REGION, cfg)
    ordered: list[OrderUnit] = []
    for leaf in cut_leaves(cut):
        if len(leaf.unit_ids) > 1:
            leaf_units = [by_id[uid] for uid in leaf.unit_ids]
            ordered.extend(by_id[uid] for uid in gap_tree_order(leaf_units, PAGE_REGION, cfg))
        else:
            ordered.extend(by_id[uid] for uid in leaf.unit_ids)
    return ordered


def reading_order(tree: LayoutTree, cfg: EngineConfig | None = None) -> list[str]:
    return [u.unit_id for u in order_units(tree, cfg)]
