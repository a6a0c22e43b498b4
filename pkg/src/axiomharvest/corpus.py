"""Document data model and corpus ingestion.

A textbook arrives as one JSON file per book: a tree of nodes, each node
carrying a kind, optional text, typography attributes, an optional equation
payload and children. Loading flattens the tree into an ordered sequence of
discourse elements (preorder traversal) while container typography (bounding
boxes, "Theorem" labels, font scaling) propagates down to the elements it
encloses.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

ELEMENT_KINDS = ("sentence", "heading", "title", "figure", "table", "caption", "equation")
LABEL_KINDS = ("axiom", "theorem", "corollary", "property", "none")

_TOKEN_RE = re.compile(r"\d+\.\d+|\w+|[^\w\s]", re.UNICODE)
_FIGURE_REF_RE = re.compile(r"\b(?:Figure|Fig\.?)\s*(\d+(?:\.\d+)*)", re.IGNORECASE)

# Characters that make a text line look like a formula.
_EQUATIONISH = set("0123456789=+-*/^()×·−")


def tokenize(text: str) -> list[str]:
    """Split on whitespace and punctuation; punctuation marks stay as tokens.

    Original case is preserved; callers lowercase for feature matching.
    """
    return _TOKEN_RE.findall(text)


def lower_tokens(text: str) -> list[str]:
    return [t.lower() for t in tokenize(text)]


@dataclass(frozen=True)
class Typography:
    """Formatting attributes of an element, merged over its ancestors."""

    bold: bool = False
    italic: bool = False
    underline: bool = False
    boxed: bool = False
    colored: bool = False
    font_scale: float = 1.0
    labeled_kind: str = "none"

    def __post_init__(self) -> None:
        if self.font_scale <= 0:
            raise ValueError(f"font_scale must be positive, got {self.font_scale}")
        if self.labeled_kind not in LABEL_KINDS:
            raise ValueError(f"unknown labeled_kind {self.labeled_kind!r}")

    def merged_into(self, child: "Typography") -> "Typography":
        """Effective typography for a node nested inside ``self``."""
        return Typography(
            bold=self.bold or child.bold,
            italic=self.italic or child.italic,
            underline=self.underline or child.underline,
            boxed=self.boxed or child.boxed,
            colored=self.colored or child.colored,
            font_scale=self.font_scale * child.font_scale,
            labeled_kind=child.labeled_kind if child.labeled_kind != "none" else self.labeled_kind,
        )


@dataclass(frozen=True)
class DiscourseElement:
    """One sentence/heading/figure/equation/caption with layout annotations."""

    id: str
    book_id: str
    seq_index: int
    kind: str
    text: str
    typography: Typography = field(default_factory=Typography)
    hierarchy_path: tuple[str, ...] = ()
    figure_refs: tuple[str, ...] = ()
    equation_payload: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ELEMENT_KINDS:
            raise ValueError(f"unknown element kind {self.kind!r}")
        if (self.kind == "equation") != (self.equation_payload is not None):
            raise ValueError("kind=equation iff equation_payload present")

    @property
    def tokens(self) -> list[str]:
        return tokenize(self.text)

    @property
    def parent_path(self) -> tuple[str, ...]:
        return self.hierarchy_path[:-1]


@dataclass(frozen=True)
class Book:
    book_id: str
    elements: tuple[DiscourseElement, ...]

    def __post_init__(self) -> None:
        for i, el in enumerate(self.elements):
            if el.seq_index != i:
                raise ValueError(f"book {self.book_id}: seq_index {el.seq_index} at position {i}")

    def __len__(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class Corpus:
    books: tuple[Book, ...]

    def __post_init__(self) -> None:
        ids = [b.book_id for b in self.books]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate book_id in corpus")

    def book(self, book_id: str) -> Book:
        for b in self.books:
            if b.book_id == book_id:
                return b
        raise KeyError(book_id)


@dataclass(frozen=True)
class AxiomMention:
    """Contiguous element span hypothesized to state one axiom."""

    book_id: str
    start: int
    end: int
    diagram_ref: str | None = None

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError(f"mention span [{self.start}, {self.end}] reversed")

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def overlaps(self, other: "AxiomMention") -> bool:
        return self.book_id == other.book_id and not (
            self.end < other.start or other.end < self.start
        )


@dataclass(frozen=True)
class GoldAnnotations:
    """Gold mentions, their clustering into globally ordered axioms, and parses.

    ``clusters`` lists mention indices (into ``mentions``) grouped by global
    axiom, in global order. ``parses`` maps mention index to rule text in the
    rule file format. ``problems`` optionally pairs problem ids with the
    index of the correct answer choice.
    """

    mentions: tuple[AxiomMention, ...]
    clusters: tuple[tuple[int, ...], ...]
    parses: dict[int, str] = field(default_factory=dict)
    problems: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for cluster in self.clusters:
            for idx in cluster:
                if idx in seen:
                    raise ValueError(f"mention {idx} in two clusters")
                if not (0 <= idx < len(self.mentions)):
                    raise ValueError(f"cluster references unknown mention {idx}")
                seen.add(idx)
        if seen != set(range(len(self.mentions))):
            raise ValueError("clusters must partition exactly the gold mentions")

    def mentions_of(self, book_id: str) -> list[AxiomMention]:
        return [m for m in self.mentions if m.book_id == book_id]

    def gold_tags(self, book: Book) -> list[str]:
        """BIO tag sequence that reproduces this book's gold mentions."""
        tags = ["O"] * len(book)
        for m in self.mentions_of(book.book_id):
            tags[m.start] = "B"
            for k in range(m.start + 1, m.end + 1):
                tags[k] = "I"
        return tags


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the seeded synthetic-corpus generator."""

    num_books: int = 2
    num_global_axioms: int = 6
    mention_drop_rate: float = 0.0
    order_swap_rate: float = 0.0
    paraphrase_noise: float = 0.0
    typography_noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("mention_drop_rate", "order_swap_rate", "paraphrase_noise", "typography_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        if self.num_global_axioms < 1:
            raise ValueError("num_global_axioms must be >= 1")
        if self.num_books < 1:
            raise ValueError("num_books must be >= 1")


class CorpusFormatError(ValueError):
    """Raised when a document file does not follow the book JSON format."""


def find_figure_refs(text: str) -> tuple[str, ...]:
    return tuple(f"Figure {m.group(1)}" for m in _FIGURE_REF_RE.finditer(text))


def looks_like_equation(text: str) -> bool:
    """Heuristic: most non-space characters are formula characters.

    Single capital letters count as point labels; longer alphabetic runs
    count against the formula reading.
    """
    chars = [c for c in text if not c.isspace()]
    if not chars:
        return False
    score = 0
    runs = re.findall(r"[A-Za-z]+|[^A-Za-z]", text.replace(" ", ""))
    for run in runs:
        if run.isalpha():
            if run.isupper() and len(run) <= 3:
                score += len(run)
        elif run in _EQUATIONISH:
            score += 1
    return score > 0.5 * len(chars)


def _parse_typography(node: dict, where: str) -> Typography:
    raw = node.get("typography") or {}
    if not isinstance(raw, dict):
        raise CorpusFormatError(f"{where}: typography must be an object")
    label = str(raw.get("label") or "none").lower()
    if label not in LABEL_KINDS:
        label = "none"
    try:
        return Typography(
            bold=bool(raw.get("bold", False)),
            italic=bool(raw.get("italic", False)),
            underline=bool(raw.get("underline", False)),
            boxed=bool(raw.get("boxed", False)),
            colored=bool(raw.get("colored", False)),
            font_scale=float(raw.get("font_scale", 1.0)),
            labeled_kind=label,
        )
    except (TypeError, ValueError) as exc:
        raise CorpusFormatError(f"{where}: bad typography ({exc})") from exc


def _element_kind(node: dict, text: str, equation: str | None) -> tuple[str, str | None]:
    kind = str(node.get("kind") or "sentence").lower()
    if equation is not None or kind == "equation":
        return "equation", equation if equation is not None else text
    if kind in ELEMENT_KINDS:
        if kind != "equation" and looks_like_equation(text):
            return "equation", text
        return kind, None
    # Unknown leaf kinds (e.g. "paragraph") carry prose.
    if looks_like_equation(text):
        return "equation", text
    return "sentence", None


def load_book(path: Path, book_id: str | None = None) -> Book:
    """Parse one document file into a flat element sequence."""
    try:
        root = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path.name}: invalid JSON ({exc})") from exc
    if not isinstance(root, dict):
        raise CorpusFormatError(f"{path.name}: root must be an object")
    bid = book_id or str(root.get("book_id") or path.stem)

    elements: list[DiscourseElement] = []

    def visit(node: dict, path_labels: tuple[str, ...], inherited: Typography, where: str) -> None:
        if not isinstance(node, dict):
            raise CorpusFormatError(f"{path.name}: node {where} must be an object")
        typo = inherited.merged_into(_parse_typography(node, f"{path.name}:{where}"))
        text = str(node.get("text") or "").strip()
        equation = node.get("equation")
        if equation is not None:
            equation = str(equation)
        if text or equation is not None:
            kind, payload = _element_kind(node, text, equation)
            elements.append(
                DiscourseElement(
                    id=f"{bid}:{len(elements)}",
                    book_id=bid,
                    seq_index=len(elements),
                    kind=kind,
                    text=text or (payload or ""),
                    typography=typo,
                    hierarchy_path=path_labels,
                    figure_refs=find_figure_refs(text),
                    equation_payload=payload,
                )
            )
        children = node.get("children") or []
        if not isinstance(children, list):
            raise CorpusFormatError(f"{path.name}: children of {where} must be a list")
        for i, child in enumerate(children):
            kind = "node"
            if isinstance(child, dict):
                kind = str(child.get("kind") or "node").lower()
            label = f"{kind}[{i}]"
            visit(child, path_labels + (label,), typo, f"{where}/{label}")

    root_kind = str(root.get("kind") or "book").lower()
    visit(root, (f"{root_kind}[0]",), Typography(), root_kind)
    return Book(book_id=bid, elements=tuple(elements))


def load_corpus(path: str | Path) -> Corpus:
    """Load every ``*.json`` book file in a directory."""
    directory = Path(path)
    if not directory.is_dir():
        raise CorpusFormatError(f"{directory} is not a directory")
    books = [load_book(p) for p in sorted(directory.glob("*.json"))]
    return Corpus(books=tuple(books))


def _typography_dict(t: Typography) -> dict:
    return {
        "bold": t.bold,
        "italic": t.italic,
        "underline": t.underline,
        "boxed": t.boxed,
        "colored": t.colored,
        "font_scale": t.font_scale,
        "label": t.labeled_kind if t.labeled_kind != "none" else "",
    }


def book_to_tree(book: Book) -> dict:
    """Rebuild a nested document tree from flat elements.

    Containers are recreated from hierarchy paths; each element becomes the
    node named by the last component of its path. Effective typography is
    written on the element node itself, so loading the result reproduces the
    same flat sequence.
    """
    root: dict = {"kind": "book", "book_id": book.book_id, "children": []}
    # index map: path prefix -> node dict
    nodes: dict[tuple[str, ...], dict] = {}

    def ensure(path: tuple[str, ...]) -> dict:
        if not path:
            return root
        if path in nodes:
            return nodes[path]
        parent = ensure(path[:-1])
        kind, idx = _split_label(path[-1])
        node = {"kind": kind, "_idx": idx, "children": []}
        parent["children"].append(node)
        nodes[path] = node
        return node

    for el in book.elements:
        if len(el.hierarchy_path) < 1:
            raise ValueError("element missing hierarchy path")
        root_label = el.hierarchy_path[0]
        root["kind"] = _split_label(root_label)[0]
        node = ensure(el.hierarchy_path[1:])
        node["kind"] = _split_label(el.hierarchy_path[-1])[0] if len(el.hierarchy_path) > 1 else root["kind"]
        node["text"] = el.text
        node["typography"] = _typography_dict(el.typography)
        if el.equation_payload is not None:
            node["equation"] = el.equation_payload
            node["kind"] = "equation"

    def finalize(node: dict) -> None:
        children = node.get("children", [])
        children.sort(key=lambda c: c["_idx"])
        slots = [c["_idx"] for c in children]
        if slots != list(range(len(slots))):
            # Pad skipped child slots so labels survive a reload.
            padded = []
            want = 0
            for c in children:
                while want < c["_idx"]:
                    padded.append({"kind": "node", "_idx": want, "children": []})
                    want += 1
                padded.append(c)
                want = c["_idx"] + 1
            children = padded
            node["children"] = children
        for c in children:
            finalize(c)
            c.pop("_idx", None)

    finalize(root)
    root.pop("_idx", None)
    return root


def save_corpus(corpus: Corpus, directory: str | Path) -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for book in corpus.books:
        p = out / f"{book.book_id}.json"
        p.write_text(json.dumps(book_to_tree(book), indent=1, sort_keys=True), encoding="utf-8")
        written.append(p)
    return written


def _split_label(label: str) -> tuple[str, int]:
    m = re.fullmatch(r"(.+)\[(\d+)\]", label)
    if not m:
        raise ValueError(f"bad hierarchy label {label!r}")
    return m.group(1), int(m.group(2))


def extract_mentions(book: Book, tags: list[str] | tuple[str, ...]) -> list[AxiomMention]:
    """Collapse a BIO tag sequence into axiom mentions.

    Maximal contiguous B/I blocks become mentions; B always opens a new
    mention, and an I directly after O also opens one. If any element in
    the span references a figure, the first such reference becomes the
    mention's diagram.
    """
    if len(tags) != len(book.elements):
        raise ValueError(f"got {len(tags)} tags for {len(book.elements)} elements")
    mentions: list[AxiomMention] = []
    start: int | None = None

    def close(end: int) -> None:
        nonlocal start
        if start is None:
            return
        diagram = None
        for el in book.elements[start : end + 1]:
            if el.figure_refs:
                diagram = el.figure_refs[0]
                break
        mentions.append(AxiomMention(book_id=book.book_id, start=start, end=end, diagram_ref=diagram))
        start = None

    for k, tag in enumerate(tags):
        if tag == "B":
            close(k - 1)
            start = k
        elif tag == "I":
            if start is None:
                start = k
        elif tag == "O":
            close(k - 1)
        else:
            raise ValueError(f"unknown tag {tag!r} at position {k}")
    close(len(tags) - 1)
    return mentions


def tags_for_mentions(book: Book, mentions: list[AxiomMention]) -> list[str]:
    """Inverse of extract_mentions for non-overlapping mention lists."""
    tags = ["O"] * len(book)
    for m in mentions:
        tags[m.start] = "B"
        for k in range(m.start + 1, m.end + 1):
            tags[k] = "I"
    return tags


def load_gold(path: str | Path) -> GoldAnnotations:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    mentions = tuple(
        AxiomMention(
            book_id=str(m["book"]),
            start=int(m["start"]),
            end=int(m["end"]),
            diagram_ref=m.get("diagram"),
        )
        for m in data["mentions"]
    )
    clusters = tuple(tuple(int(i) for i in c) for c in data["clusters"])
    parses = {int(k): str(v) for k, v in (data.get("parses") or {}).items()}
    problems = tuple((str(p), int(i)) for p, i in (data.get("problems") or []))
    return GoldAnnotations(mentions=mentions, clusters=clusters, parses=parses, problems=problems)


def save_gold(gold: GoldAnnotations, path: str | Path) -> None:
    data = {
        "mentions": [
            {"book": m.book_id, "start": m.start, "end": m.end, "diagram": m.diagram_ref}
            for m in gold.mentions
        ],
        "clusters": [list(c) for c in gold.clusters],
        "parses": {str(k): v for k, v in sorted(gold.parses.items())},
        "problems": [[p, i] for p, i in gold.problems],
    }
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")
