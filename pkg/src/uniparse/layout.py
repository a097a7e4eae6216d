"""Two-layer layout tree: containment, group pairing, functional filtering.

Bottom-layer detections become roots; top-layer detections nest under the
root that contains them (by intersection-over-child-area) or stay orphans.
Grouped elements (figure+caption, formula+id, molecule+identifier, ...) are
linked symmetrically, either via explicit group hints or by a geometric
nearest-partner fallback. Functional page furniture is filtered out last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .config import EngineConfig
from .docmodel import (
    ANCHOR_CATEGORIES,
    FUNCTIONAL_CATEGORIES,
    PARTNER_CATEGORIES,
    Detection,
    Layer,
    SemanticCategory,
)


class RelationKind(str, Enum):
    CAPTION = "caption"
    TITLE = "title"
    FOOTNOTE = "footnote"
    FORMULA_ID = "formula_id"
    MOLECULE_IDENTIFIER = "molecule_identifier"
    MARKUSH_DESCRIPTION = "markush_description"
    LEGEND = "legend"


# (partner category, anchor category) -> relation. A caption acts as a title
# when it belongs to a table, as a caption everywhere else.
def relation_for(partner: SemanticCategory, anchor: SemanticCategory) -> RelationKind:
    if partner is SemanticCategory.CAPTION:
        if anchor is SemanticCategory.TABLE:
            return RelationKind.TITLE
        return RelationKind.CAPTION
    return {
        SemanticCategory.TABLE_FOOTNOTE: RelationKind.FOOTNOTE,
        SemanticCategory.FORMULA_ID: RelationKind.FORMULA_ID,
        SemanticCategory.MOLECULE_IDENTIFIER: RelationKind.MOLECULE_IDENTIFIER,
        SemanticCategory.MARKUSH_DESCRIPTION: RelationKind.MARKUSH_DESCRIPTION,
        SemanticCategory.FIGURE_LEGEND: RelationKind.LEGEND,
    }[partner]


# Which partner categories an anchor category accepts.
COMPATIBLE_PARTNERS: dict[SemanticCategory, frozenset[SemanticCategory]] = {
    SemanticCategory.IMAGE: frozenset({SemanticCategory.CAPTION, SemanticCategory.FIGURE_LEGEND}),
    SemanticCategory.FIGURE: frozenset({SemanticCategory.CAPTION, SemanticCategory.FIGURE_LEGEND}),
    SemanticCategory.CHART: frozenset({SemanticCategory.CAPTION, SemanticCategory.FIGURE_LEGEND}),
    SemanticCategory.CHEMICAL_REACTION: frozenset(
        {SemanticCategory.CAPTION, SemanticCategory.FIGURE_LEGEND}
    ),
    SemanticCategory.TABLE: frozenset(
        {SemanticCategory.CAPTION, SemanticCategory.TABLE_FOOTNOTE}
    ),
    SemanticCategory.FORMULA: frozenset({SemanticCategory.FORMULA_ID}),
    SemanticCategory.MOLECULE: frozenset(
        {SemanticCategory.MOLECULE_IDENTIFIER, SemanticCategory.MARKUSH_DESCRIPTION}
    ),
}


@dataclass
class LayoutNode:
    detection: Detection
    children: list["LayoutNode"] = field(default_factory=list)
    group_links: list[tuple[RelationKind, str]] = field(default_factory=list)

    @property
    def id(self) -> str:
        return self.detection.id

    @property
    def category(self) -> SemanticCategory:
        return self.detection.category

    @property
    def box(self):
        return self.detection.box


@dataclass
class LayoutTree:
    page_index: int
    roots: list[LayoutNode] = field(default_factory=list)
    orphans: list[LayoutNode] = field(default_factory=list)
    removed: list[Detection] = field(default_factory=list)
    page_number_texts: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def top_items(self) -> list[LayoutNode]:
        """Roots and orphans: the page-level units before ordering."""
        return [*self.roots, *self.orphans]

    def iter_nodes(self):
        for node in self.top_items():
            yield node
            yield from node.children

    def find(self, detection_id: str) -> LayoutNode | None:
        for node in self.iter_nodes():
            if node.id == detection_id:
                return node
        return None

    def detection_count(self) -> int:
        return (
            len(self.roots)
            + sum(len(r.children) for r in self.roots)
            + len(self.orphans)
            + len(self.removed)
        )


def assign_children(
    detections: list[Detection], cfg: EngineConfig | None = None
) -> tuple[dict[str, str], set[str]]:
    """Map each top-layer detection to its containing bottom-layer parent.

    A child maps to the parent maximizing intersection-over-child-area (IoA),
    requiring IoA >= ioa_threshold; ties break by smaller parent area, then
    lexicographic parent id. Everything unassigned is an orphan.
    """
    cfg = cfg or EngineConfig()
    bottoms = [d for d in detections if d.layer is Layer.BOTTOM]
    parent_map: dict[str, str] = {}
    orphans: set[str] = set()
    for det in detections:
        if det.layer is not Layer.TOP:
            continue
        child_area = det.box.area
        best: tuple[float, float, str] | None = None
        if child_area > 0.0:
            for parent in bottoms:
                ioa = det.box.intersection_area(parent.box) / child_area
                if ioa < cfg.ioa_threshold:
                    continue
                key = (-ioa, parent.box.area, parent.id)
                if best is None or key < best:
                    best = key
        if best is None:
            orphans.add(det.id)
        else:
            parent_map[det.id] = best[2]
    return parent_map, orphans


def build_layout_tree(
    page_index: int, detections: list[Detection], cfg: EngineConfig | None = None
) -> LayoutTree:
    """assign_children over one page's detections, assembled into a tree."""
    cfg = cfg or EngineConfig()
    parent_map, orphan_ids = assign_children(detections, cfg)
    nodes = {d.id: LayoutNode(d) for d in detections}
    tree = LayoutTree(page_index=page_index)
    for det in detections:
        node = nodes[det.id]
        if det.layer is Layer.BOTTOM:
            tree.roots.append(node)
        elif det.id in parent_map:
            nodes[parent_map[det.id]].children.append(node)
        else:
            tree.orphans.append(node)
    return tree


def pair_groups(tree: LayoutTree, cfg: EngineConfig | None = None) -> LayoutTree:
    """Link grouped elements. Hints dominate; geometry is the fallback.

    All members of one group hint link pairwise to the group's anchor. For
    hint-less detections, each anchor greedily takes the nearest compatible
    partner whose box center lies within `pair_distance` of the anchor's box
    edge, preferring the natural vertical adjacency (caption below an image,
    title above a table). A partner links to at most one anchor.
    """
    cfg = cfg or EngineConfig()
    nodes = {n.id: n for n in tree.iter_nodes()}
    for node in nodes.values():
        node.group_links = []
    tree.warnings = [w for w in tree.warnings if not w.startswith("group:")]

    hinted: set[str] = set()
    by_hint: dict[str, list[LayoutNode]] = {}
    for node in nodes.values():
        if node.detection.group_hint is not None:
            by_hint.setdefault(node.detection.group_hint, []).append(node)
            hinted.add(node.id)

    for hint in sorted(by_hint):
        members = sorted(by_hint[hint], key=lambda n: n.id)
        if len(members) < 2:
            continue
        anchors = [m for m in members if m.category in ANCHOR_CATEGORIES]
        if not anchors:
            tree.warnings.append(f"group:{hint}: no anchor among members")
            continue
        if len(anchors) > 1:
            tree.warnings.append(f"group:{hint}: multiple anchors, using {anchors[0].id}")
        anchor = anchors[0]
        for member in members:
            if member is anchor:
                continue
            kind = (
                relation_for(member.category, anchor.category)
                if member.category in PARTNER_CATEGORIES
                else RelationKind.CAPTION
            )
            _link(anchor, member, kind)

    _pair_by_geometry(tree, nodes, hinted, cfg)
    return tree


def _link(anchor: LayoutNode, partner: LayoutNode, kind: RelationKind) -> None:
    if (kind, partner.id) not in anchor.group_links:
        anchor.group_links.append((kind, partner.id))
    if (kind, anchor.id) not in partner.group_links:
        partner.group_links.append((kind, anchor.id))


def _preferred_direction(partner: SemanticCategory, anchor: SemanticCategory) -> str:
    # Where the partner normally sits relative to its anchor.
    if partner is SemanticCategory.CAPTION and anchor is SemanticCategory.TABLE:
        return "above"
    if partner is SemanticCategory.FORMULA_ID:
        return "beside"
    return "below"


def _is_preferred(partner_node: LayoutNode, anchor_node: LayoutNode) -> bool:
    direction = _preferred_direction(partner_node.category, anchor_node.category)
    _, cy = partner_node.box.center
    if direction == "above":
        return cy <= anchor_node.box.y0
    if direction == "beside":
        return anchor_node.box.y0 <= cy <= anchor_node.box.y1
    return cy >= anchor_node.box.y1


def _pair_by_geometry(
    tree: LayoutTree, nodes: dict[str, LayoutNode], hinted: set[str], cfg: EngineConfig
) -> None:
    # Only page-level nodes pair geometrically; nested inline elements
    # reintegrate through placeholders instead of forming groups.
    top_level = tree.top_items()
    anchors = [
        n for n in top_level if n.category in ANCHOR_CATEGORIES and n.id not in hinted
    ]
    partners = [
        n
        for n in top_level
        if n.category in PARTNER_CATEGORIES and n.id not in hinted and not n.group_links
    ]
    candidates = []
    for anchor in anchors:
        compatible = COMPATIBLE_PARTNERS.get(anchor.category, frozenset())
        for partner in partners:
            if partner.category not in compatible:
                continue
            cx, cy = partner.box.center
            dist = anchor.box.distance_to_point(cx, cy)
            if dist > cfg.pair_distance:
                continue
            preferred = 0 if _is_preferred(partner, anchor) else 1
            candidates.append((preferred, dist, anchor.id, partner.id, anchor, partner))

    # Vertically adjacent candidates in the natural direction link first,
    # each tier greedily by ascending distance.
    taken_partners: set[str] = set()
    taken_slots: set[tuple[str, SemanticCategory]] = set()
    for _pref, dist, anchor_id, partner_id, anchor, partner in sorted(
        candidates, key=lambda c: c[:4]
    ):
        if partner_id in taken_partners:
            continue
        slot = (anchor_id, partner.category)
        if slot in taken_slots:
            continue
        taken_partners.add(partner_id)
        taken_slots.add(slot)
        _link(anchor, partner, relation_for(partner.category, anchor.category))


def filter_functional(tree: LayoutTree) -> LayoutTree:
    """Drop headers, footers, sidebars, watermarks and page numbers.

    Page-number text survives in tree metadata; divider lines stay; anything
    carrying a group link is never removed.
    """
    kept_roots: list[LayoutNode] = []
    for node in tree.roots:
        cat = node.category
        removable = cat in FUNCTIONAL_CATEGORIES or cat is SemanticCategory.PAGE_NUMBER
        if removable and not node.group_links:
            if cat is SemanticCategory.PAGE_NUMBER:
                tree.page_number_texts.append(node.detection.truth_text or "")
            tree.removed.append(node.detection)
            # Nested children of removed furniture would vanish with their
            # parent; surface them as orphans instead.
            tree.orphans.extend(node.children)
            node.children = []
        else:
            kept_roots.append(node)
    tree.roots = kept_roots
    return tree


def build_page_tree(
    page_index: int, detections: list[Detection], cfg: EngineConfig | None = None
) -> LayoutTree:
    """Full per-page layout pass: containment, pairing, filtering."""
    cfg = cfg or EngineConfig()
    tree = build_layout_tree(page_index, list(detections), cfg)
    pair_groups(tree, cfg)
    filter_functional(tree)
    return tree


def group_pairs(tree: LayoutTree) -> set[frozenset[str]]:
    """All linked pairs on a page as unordered id 2-sets."""
    pairs: set[frozenset[str]] = set()
    for node in tree.iter_nodes():
        for _kind, other in node.group_links:
            pairs.add(frozenset({node.id, other}))
    return pairs


def tree_to_dict(tree: LayoutTree) -> dict:
    """Layout tree in the IR file dialect, with children[] and group_links[]."""

    def node_dict(node: LayoutNode) -> dict:
        return {
            "id": node.id,
            "category": node.category.value,
            "box": node.box.as_list(),
            "children": [node_dict(c) for c in node.children],
            "group_links": [
                {"relation": kind.value, "node_id": other} for kind, other in node.group_links
            ],
        }

    return {
        "page_index": tree.page_index,
        "roots": [node_dict(n) for n in tree.roots],
        "orphans": [node_dict(n) for n in tree.orphans],
        "removed": [d.id for d in tree.removed],
        "page_number_texts": list(tree.page_number_texts),
        "warnings": list(tree.warnings),
    }
