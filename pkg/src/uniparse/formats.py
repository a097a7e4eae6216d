"""Final outputs: canonical structured dump, Markdown, HTML, and semantic
chunks. All emitters are pure and deterministic; none may leak a placeholder
literal.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum

from .consolidate import FlowItem, Partner, SectionNode
from .docmodel import BoundingBox, SemanticCategory, canonical_json
from .layout import RelationKind
from .payloads import (
    Caption,
    ChartTable,
    ContentPayload,
    ESmiles,
    Latex,
    Reaction,
    TableGrid,
    Text,
    payload_from_dict,
    payload_text,
    payload_to_dict,
    render_grid_html,
    render_inline,
)

STRUCTURED_VERSION = "1"

TEXTUAL_CATEGORIES = frozenset(
    {
        SemanticCategory.DOCUMENT_TITLE,
        SemanticCategory.SECTION_TITLE,
        SemanticCategory.PARAGRAPH,
        SemanticCategory.REFERENCES,
        SemanticCategory.TABLE_OF_CONTENTS,
        SemanticCategory.KEY_VALUE_ITEM,
        SemanticCategory.CODE_BLOCK,
        SemanticCategory.FOOTNOTE,
        SemanticCategory.CAPTION,
        SemanticCategory.TABLE_FOOTNOTE,
        SemanticCategory.FORMULA_ID,
        SemanticCategory.MOLECULE_IDENTIFIER,
        SemanticCategory.MARKUSH_DESCRIPTION,
        SemanticCategory.FIGURE_LEGEND,
    }
)

FIGURE_CATEGORIES = frozenset(
    {
        SemanticCategory.IMAGE,
        SemanticCategory.FIGURE,
        SemanticCategory.CHART,
        SemanticCategory.MOLECULE,
        SemanticCategory.CHEMICAL_REACTION,
    }
)


@dataclass
class ParsedDocument:
    doc_id: str
    root: SectionNode
    language_tag: str = "en"
    tokens_emitted: int = 0
    tokens_resolved: int = 0
    tokens_failed: int = 0
    failed_tasks: tuple[str, ...] = ()

    def iter_items(self):
        yield from self.root.iter_items()


# ---------------------------------------------------------------------------
# Structured dump (lossless, canonical, round-trippable)
# ---------------------------------------------------------------------------


def to_structured(doc: ParsedDocument) -> str:
    return canonical_json(_doc_to_dict(doc))


def _doc_to_dict(doc: ParsedDocument) -> dict:
    return {
        "version": STRUCTURED_VERSION,
        "doc_id": doc.doc_id,
        "language_tag": doc.language_tag,
        "stats": {
            "tokens_emitted": doc.tokens_emitted,
            "tokens_resolved": doc.tokens_resolved,
            "tokens_failed": doc.tokens_failed,
            "failed_tasks": sorted(doc.failed_tasks),
        },
        "root": _section_to_dict(doc.root),
    }


def _section_to_dict(section: SectionNode) -> dict:
    return {
        "level": section.level,
        "title": section.title,
        "body": [_item_to_dict(item) for item in section.body],
        "children": [_section_to_dict(child) for child in section.children],
    }


def _item_to_dict(item: FlowItem) -> dict:
    return {
        "id": item.item_id,
        "page_index": item.page_index,
        "category": item.category.value,
        "box": item.box.as_list(),
        "payload": payload_to_dict(item.payload) if item.payload is not None else None,
        "partners": [
            {
                "relation": p.relation.value,
                "category": p.category.value,
                "id": p.detection_id,
                "payload": payload_to_dict(p.payload) if p.payload is not None else None,
            }
            for p in item.partners
        ],
        "provenance": {
            "merged_ids": list(item.merged_ids),
            "pages": list(item.pages),
        },
        "group_hint": item.group_hint,
    }


def load_structured(text: str) -> ParsedDocument:
    data = json.loads(text)
    stats = data.get("stats", {})
    return ParsedDocument(
        doc_id=data["doc_id"],
        root=_section_from_dict(data["root"]),
        language_tag=data.get("language_tag", "en"),
        tokens_emitted=int(stats.get("tokens_emitted", 0)),
        tokens_resolved=int(stats.get("tokens_resolved", 0)),
        tokens_failed=int(stats.get("tokens_failed", 0)),
        failed_tasks=tuple(stats.get("failed_tasks", ())),
    )


def _section_from_dict(data: dict) -> SectionNode:
    return SectionNode(
        level=int(data["level"]),
        title=data["title"],
        body=[_item_from_dict(d) for d in data["body"]],
        children=[_section_from_dict(d) for d in data["children"]],
    )


def _item_from_dict(data: dict) -> FlowItem:
    provenance = data.get("provenance", {})
    return FlowItem(
        item_id=data["id"],
        page_index=int(data["page_index"]),
        category=SemanticCategory(data["category"]),
        box=BoundingBox(*data["box"]),
        payload=payload_from_dict(data["payload"]) if data.get("payload") is not None else None,
        partners=tuple(
            Partner(
                relation=RelationKind(p["relation"]),
                category=SemanticCategory(p["category"]),
                detection_id=p["id"],
                payload=payload_from_dict(p["payload"]) if p.get("payload") is not None else None,
            )
            for p in data.get("partners", ())
        ),
        merged_ids=tuple(provenance.get("merged_ids", ())),
        source_pages=tuple(provenance.get("pages", ())),
        group_hint=data.get("group_hint"),
    )


# ---------------------------------------------------------------------------
# Markdown
# ---------------------------------------------------------------------------


def to_markdown(doc: ParsedDocument) -> str:
    lines: list[str] = []
    _walk_markdown(doc.root, lines)
    out = "\n\n".join(block for block in lines if block)
    return out + "\n" if out else ""


def _walk_markdown(section: SectionNode, lines: list[str]) -> None:
    if section.level > 0 and section.title:
        level = min(section.level, 6)
        lines.append(f"{'#' * level} {section.title}")
        body = section.body[1:] if _body_opens_with_title(section) else section.body
    else:
        body = section.body
    for item in body:
        lines.append(_item_markdown(item))
    for child in section.children:
        _walk_markdown(child, lines)


def _body_opens_with_title(section: SectionNode) -> bool:
    return bool(section.body) and section.body[0].category is SemanticCategory.SECTION_TITLE


def _item_markdown(item: FlowItem) -> str:
    cat = item.category
    if cat is SemanticCategory.DOCUMENT_TITLE:
        return f"# {item.text}"
    if cat is SemanticCategory.SECTION_TITLE:
        return f"## {item.text}"
    if cat is SemanticCategory.DIVIDER_LINE:
        return "---"
    if cat is SemanticCategory.CODE_BLOCK:
        return f"```\n{item.text}\n```"
    if cat is SemanticCategory.FORMULA:
        return _formula_markdown(item)
    if cat is SemanticCategory.TABLE:
        return _table_markdown(item)
    if cat in FIGURE_CATEGORIES:
        return _figure_markdown(item)
    if item.payload is None:
        return f"<!-- unparsed {cat.value} {item.item_id} -->"
    return render_inline(item.payload) if not isinstance(item.payload, Text) else item.payload.value


def _formula_markdown(item: FlowItem) -> str:
    body = item.text if item.payload is not None else ""
    line = f"$${body}$$"
    formula_id = item.partner_of(RelationKind.FORMULA_ID)
    if formula_id is not None and formula_id.payload is not None:
        line += f" {payload_text(formula_id.payload)}"
    return line


def _table_markdown(item: FlowItem) -> str:
    parts = []
    caption = item.caption_text()
    if caption:
        parts.append(f"**{caption}**")
    grid = item.payload if isinstance(item.payload, TableGrid) else None
    if grid is None:
        parts.append(f"<!-- unparsed table {item.item_id} -->")
    elif grid.is_rectangular():
        parts.append(_pipe_table(grid))
    else:
        parts.append(render_grid_html(grid))
    footnote = item.partner_of(RelationKind.FOOTNOTE)
    if footnote is not None and footnote.payload is not None:
        parts.append(payload_text(footnote.payload))
    return "\n\n".join(parts)


def _pipe_table(grid: TableGrid) -> str:
    rows: dict[int, dict[int, str]] = {}
    for cell in grid.cells:
        rows.setdefault(cell.row, {})[cell.col] = cell.text().replace("|", "\\|")
    lines = []
    header = rows.get(0, {})
    lines.append("| " + " | ".join(header.get(c, "") for c in range(grid.cols)) + " |")
    lines.append("| " + " | ".join("---" for _ in range(grid.cols)) + " |")
    for r in range(1, grid.rows):
        row = rows.get(r, {})
        lines.append("| " + " | ".join(row.get(c, "") for c in range(grid.cols)) + " |")
    return "\n".join(lines)


def _figure_markdown(item: FlowItem) -> str:
    parts = []
    caption = item.caption_text() or ""
    if isinstance(item.payload, (ESmiles, Reaction)):
        parts.append(render_inline(item.payload))
    elif isinstance(item.payload, ChartTable):
        grid = item.payload.grid
        parts.append(_pipe_table(grid) if grid.is_rectangular() else render_grid_html(grid))
    elif isinstance(item.payload, (Caption, Text)):
        parts.append(f"![{payload_text(item.payload)}]({item.item_id})")
    else:
        parts.append(f"![]({item.item_id})")
    if caption:
        parts.append(caption)
    legend = item.partner_of(RelationKind.LEGEND)
    if legend is not None and legend.payload is not None:
        parts.append(payload_text(legend.payload))
    identifier = item.partner_of(RelationKind.MOLECULE_IDENTIFIER)
    if identifier is not None and identifier.payload is not None:
        parts.append(payload_text(identifier.payload))
    markush = item.partner_of(RelationKind.MARKUSH_DESCRIPTION)
    if markush is not None and markush.payload is not None:
        parts.append(payload_text(markush.payload))
    return "\n\n".join(p for p in parts if p)


# ---------------------------------------------------------------------------
# HTML
# ---------------------------------------------------------------------------

_RAW_SPAN_RE = re.compile(r"(<smiles>.*?</smiles>|<reaction>.*?</reaction>|<table>.*?</table>)", re.DOTALL)


def _escape_html(text: str) -> str:
    """Escape text while keeping our own injected inline tags intact."""
    out = []
    for part in _RAW_SPAN_RE.split(text):
        if _RAW_SPAN_RE.fullmatch(part):
            out.append(part)
        else:
            out.append(
                part.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            )
    return "".join(out)


def to_html(doc: ParsedDocument) -> str:
    lines = [
        "<!DOCTYPE html>",
        "<html>",
        f"<head><meta charset=\"utf-8\"/><title>{_escape_html(doc.doc_id)}</title></head>",
        "<body>",
    ]
    _walk_html(doc.root, lines)
    lines.extend(["</body>", "</html>"])
    return "\n".join(lines) + "\n"


def _walk_html(section: SectionNode, lines: list[str]) -> None:
    is_root = section.level == 0
    if not is_root:
        lines.append("<section>")
        if section.title:
            level = min(max(section.level, 1), 6)
            lines.append(f"<h{level}>{_escape_html(section.title)}</h{level}>")
    body = section.body
    if not is_root and _body_opens_with_title(section):
        body = body[1:]
    for item in body:
        lines.append(_item_html(item))
    for child in section.children:
        _walk_html(child, lines)
    if not is_root:
        lines.append("</section>")


def _item_html(item: FlowItem) -> str:
    cat = item.category
    if cat is SemanticCategory.DOCUMENT_TITLE:
        return f"<h1>{_escape_html(item.text)}</h1>"
    if cat is SemanticCategory.SECTION_TITLE:
        return f"<h2>{_escape_html(item.text)}</h2>"
    if cat is SemanticCategory.DIVIDER_LINE:
        return "<hr/>"
    if cat is SemanticCategory.CODE_BLOCK:
        return f"<pre><code>{_escape_html(item.text)}</code></pre>"
    if cat is SemanticCategory.FORMULA:
        formula_id = item.partner_of(RelationKind.FORMULA_ID)
        suffix = (
            f" {_escape_html(payload_text(formula_id.payload))}"
            if formula_id is not None and formula_id.payload is not None
            else ""
        )
        return f"<p>$${_escape_html(item.text)}$${suffix}</p>"
    if cat is SemanticCategory.TABLE:
        return _table_html(item)
    if cat in FIGURE_CATEGORIES:
        return _figure_html(item)
    if item.payload is None:
        return f"<!-- unparsed {cat.value} {item.item_id} -->"
    return f"<p>{_escape_html(render_inline(item.payload) if not isinstance(item.payload, Text) else item.payload.value)}</p>"


def _table_html(item: FlowItem) -> str:
    parts = []
    caption = item.caption_text()
    grid = item.payload if isinstance(item.payload, TableGrid) else None
    body = render_grid_html(grid) if grid is not None else ""
    if caption:
        body = body.replace("<table>", f"<table>\n<caption>{_escape_html(caption)}</caption>", 1)
    parts.append(body or f"<!-- unparsed table {item.item_id} -->")
    footnote = item.partner_of(RelationKind.FOOTNOTE)
    if footnote is not None and footnote.payload is not None:
        parts.append(f"<p>{_escape_html(payload_text(footnote.payload))}</p>")
    return "\n".join(parts)


def _figure_html(item: FlowItem) -> str:
    inner: list[str] = []
    if isinstance(item.payload, (ESmiles, Reaction)):
        inner.append(f"<p>{render_inline(item.payload)}</p>")
    elif isinstance(item.payload, ChartTable):
        inner.append(render_grid_html(item.payload.grid))
    else:
        alt = _escape_html(payload_text(item.payload)) if item.payload is not None else ""
        inner.append(f'<img src="{item.item_id}" alt="{alt}"/>')
    caption_parts = []
    for relation in (
        RelationKind.CAPTION,
        RelationKind.TITLE,
        RelationKind.LEGEND,
        RelationKind.MOLECULE_IDENTIFIER,
        RelationKind.MARKUSH_DESCRIPTION,
    ):
        partner = item.partner_of(relation)
        if partner is not None and partner.payload is not None:
            caption_parts.append(_escape_html(payload_text(partner.payload)))
    if caption_parts:
        inner.append(f"<figcaption>{' '.join(caption_parts)}</figcaption>")
    return "<figure>\n" + "\n".join(inner) + "\n</figure>"


# ---------------------------------------------------------------------------
# Semantic chunking
# ---------------------------------------------------------------------------


class ChunkKind(Enum):
    TEXT = "text"
    TABLE_UNIT = "table_unit"
    FIGURE_UNIT = "figure_unit"


@dataclass
class Chunk:
    chunk_id: str
    section_path: tuple[str, ...]
    items: list[FlowItem]
    token_estimate: int
    kind: ChunkKind
    oversize: bool = False

    @property
    def text(self) -> str:
        return "\n\n".join(chunk_item_text(item) for item in self.items)


def chunk_item_text(item: FlowItem) -> str:
    """Plain-text view of one item including its partners."""
    parts = [payload_text(item.payload)]
    for partner in item.partners:
        parts.append(payload_text(partner.payload))
    return "\n".join(p for p in parts if p)


def _token_estimate(text: str) -> int:
    return len(text.split())


def _chunk_kind(items: list[FlowItem]) -> ChunkKind:
    if len(items) == 1:
        if items[0].category is SemanticCategory.TABLE:
            return ChunkKind.TABLE_UNIT
        if items[0].category in FIGURE_CATEGORIES:
            return ChunkKind.FIGURE_UNIT
    return ChunkKind.TEXT


def chunk(doc: ParsedDocument, max_tokens: int = 512) -> list[Chunk]:
    """Greedy, section-respecting, group-atomic packing of the body.

    Section boundaries always start a new chunk; a group unit never splits;
    an item exceeding max_tokens on its own becomes a singleton chunk flagged
    oversize.
    """
    if max_tokens < 32:
        raise ValueError("max_tokens must be >= 32")
    chunks: list[Chunk] = []

    def flush(pending: list[FlowItem], path: tuple[str, ...], tokens: int) -> None:
        if not pending:
            return
        chunks.append(
            Chunk(
                chunk_id=f"{doc.doc_id}:c{len(chunks):04d}",
                section_path=path,
                items=list(pending),
                token_estimate=tokens,
                kind=_chunk_kind(pending),
                oversize=len(pending) == 1 and tokens > max_tokens,
            )
        )

    def walk(section: SectionNode, path: tuple[str, ...]) -> None:
        here = path if section.level == 0 else (*path, section.title)
        pending: list[FlowItem] = []
        tokens = 0
        for item in section.body:
            size = _token_estimate(chunk_item_text(item))
            if pending and tokens + size > max_tokens:
                flush(pending, here, tokens)
                pending, tokens = [], 0
            pending.append(item)
            tokens += size
            if tokens > max_tokens:
                flush(pending, here, tokens)
                pending, tokens = [], 0
        flush(pending, here, tokens)
        for child in section.children:
            walk(child, here)

    walk(doc.root, ())
    return chunks


def chunks_to_jsonl(chunks: list[Chunk]) -> str:
    lines = []
    for c in chunks:
        lines.append(
            json.dumps(
                {
                    "chunk_id": c.chunk_id,
                    "section_path": list(c.section_path),
                    "text": c.text,
                    "token_estimate": c.token_estimate,
                    "kind": c.kind.value,
                    "oversize": c.oversize,
                    "item_ids": [i.item_id for i in c.items],
                },
                ensure_ascii=False,
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")
