"""Sparse feature extraction for identification, alignment and splitting.

Three feature families share this module: per-position tag-pair features for
the sequence labeler, mention-pair similarity features for alignment, and
boundary features for the premise/conclusion split model. External analyzers
(RST parser, EDU segmenter, word aligner, POS tagger, syntax) are injected
as optional hooks; when a hook is absent its features are simply not
emitted. Lightweight internal substitutes cover alignment score (greedy
one-to-one word matching) and skip-bigram similarity.

Every feature belongs to a named group so the ablation harness can switch
groups off wholesale.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

from .corpus import AxiomMention, Book, DiscourseElement, lower_tokens
from .equations import template_match
from .lexicon import STOPWORDS, Lexicon

DEFAULT_KEYWORDS = frozenset(
    {"hence", "if", "equal", "twice", "proportion", "ratio", "product"}
)

_ATC_RE = re.compile(r"\b(axiom|theorem|corollary|property)\b", re.IGNORECASE)

FEATURE_GROUPS: dict[str, str] = {
    "ident:sentence-overlap": "unigram/bigram overlap of adjacent elements",
    "ident:geometry-entities": "normalized geometry entity count",
    "ident:keywords": "geometry keyword indicator",
    "ident:rst-edge": "RST relation between adjacent elements (hook)",
    "ident:axiom-theorem-corollary": "axiom/theorem/corollary labels, element and section level",
    "ident:equation": "element contains an equation",
    "ident:associated-diagram": "element references a figure",
    "ident:bold-underline": "bold or underlined text",
    "ident:bounding-box": "adjacent elements share a bounding box",
    "ident:json-structure": "adjacent elements share a hierarchy node",
    "align:overlap": "unigram/bigram/entity overlap of mention pair",
    "align:lcs": "longest-common-subsequence ratio",
    "align:num-elements": "difference in element counts",
    "align:alignment-scores": "word alignment score (hook or greedy substitute)",
    "align:summarization": "skip-bigram similarity",
    "align:json-structure": "matching node kinds (boxed/labeled/diagram)",
    "align:equation-template": "equation template match",
    "align:image-caption": "caption unigram overlap when both mentions have diagrams",
    "split:span-similarity": "words/relations/arguments shared by the spans",
    "split:num-relations": "geometry relations per span",
    "split:span-lengths": "span length ratio",
    "split:relative-position": "lexical head positions relative to the split",
    "split:discourse-markers": "top-100 marker tokens at span edges",
    "split:punctuation": "punctuation at the segment border",
    "split:text-organization": "same sentence / same paragraph",
    "split:rst-parse": "RST segmentation match and label (hook)",
    "split:edu-segmenter": "EDU boundary probability (hook)",
    "split:head-node": "head/attachment word features (hook)",
    "split:syntax": "syntax tree distances (hook)",
    "split:dominance": "span dominance relation (hook)",
    "split:json-structure": "same hierarchy node conjoined with same paragraph",
}


class FeatureVector:
    """Sparse map from feature name to value; zero entries are never stored."""

    __slots__ = ("entries",)

    def __init__(self, entries: dict[str, float] | None = None):
        self.entries: dict[str, float] = {}
        if entries:
            for k, v in entries.items():
                self.add(k, v)

    def add(self, name: str, value: float) -> None:
        if value == 0:
            return
        new = self.entries.get(name, 0.0) + value
        if new == 0:
            self.entries.pop(name, None)
        else:
            self.entries[name] = new

    def dot(self, weights: dict[str, float]) -> float:
        return sum(weights.get(name, 0.0) * v for name, v in self.entries.items())

    def items(self):
        return self.entries.items()

    def __getitem__(self, name: str) -> float:
        return self.entries.get(name, 0.0)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureVector) and self.entries == other.entries

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v:g}" for k, v in sorted(self.entries.items()))
        return f"FeatureVector({inner})"


@dataclass(frozen=True)
class AnalyzerHooks:
    """Optional external analyzers; absent hooks mean absent features."""

    rst_relation: Callable[[DiscourseElement, DiscourseElement], str | None] | None = None
    edu_boundary_prob: Callable[[list[str], int], float] | None = None
    external_align_score: Callable[["MentionView", "MentionView"], float] | None = None
    pos_tagger: Callable[[list[str]], list[str]] | None = None
    lexical_head: Callable[[list[str]], int | None] | None = None
    attachment: Callable[[list[str], int], str | None] | None = None
    syntax_depth: Callable[[list[str], int], int | None] | None = None
    dominance: Callable[[list[str], list[str]], str | None] | None = None


@dataclass(frozen=True)
class GeometryKeywordTable:
    """Trigger keywords plus the lexicon used for entity counting."""

    keywords: frozenset[str]
    entity_lexicon: Lexicon

    def __post_init__(self) -> None:
        if not DEFAULT_KEYWORDS <= self.keywords:
            raise ValueError("keyword table must contain the core geometry keywords")

    @classmethod
    def default(cls, lexicon: Lexicon) -> "GeometryKeywordTable":
        return cls(keywords=DEFAULT_KEYWORDS, entity_lexicon=lexicon)


@dataclass(frozen=True)
class MentionView:
    """A mention with its elements and precomputed text-derived views."""

    mention: AxiomMention
    elements: tuple[DiscourseElement, ...]
    tokens: tuple[str, ...]
    token_element: tuple[int, ...]  # element offset within the mention, per token
    entity_items: frozenset[str]
    equations: tuple[str, ...]
    caption_tokens: tuple[str, ...]

    @property
    def book_id(self) -> str:
        return self.mention.book_id

    @property
    def has_diagram(self) -> bool:
        return self.mention.diagram_ref is not None

    @property
    def boxed(self) -> bool:
        return any(el.typography.boxed for el in self.elements)

    @property
    def labeled(self) -> bool:
        return any(el.typography.labeled_kind != "none" for el in self.elements)

    def element_of_token(self, idx: int) -> DiscourseElement:
        return self.elements[self.token_element[idx]]


def resolve_caption(book: Book, diagram_ref: str | None) -> tuple[str, ...]:
    """Caption tokens for a referenced figure: the caption element directly
    after the figure if present, else the figure's own text."""
    if diagram_ref is None:
        return ()
    needle = diagram_ref.lower()
    for el in book.elements:
        if el.kind == "figure" and needle in el.text.lower():
            nxt = book.elements[el.seq_index + 1] if el.seq_index + 1 < len(book) else None
            if nxt is not None and nxt.kind == "caption":
                return tuple(lower_tokens(nxt.text))
            return tuple(lower_tokens(el.text))
    return ()


def mention_view(book: Book, mention: AxiomMention, lexicon: Lexicon) -> MentionView:
    elements = book.elements[mention.start : mention.end + 1]
    tokens: list[str] = []
    token_element: list[int] = []
    equations: list[str] = []
    entity_items: set[str] = set()
    for offset, el in enumerate(elements):
        toks = el.tokens
        tokens.extend(toks)
        token_element.extend([offset] * len(toks))
        if el.equation_payload is not None:
            equations.append(el.equation_payload)
        for _, _, name in lexicon.find_triggers(toks):
            entity_items.add(f"pred:{name}")
        for _, _, name in lexicon.find_entity_nouns(toks):
            entity_items.add(f"type:{name}")
        for tok in toks:
            if lexicon.is_label(tok):
                entity_items.add(f"label:{tok}")
    return MentionView(
        mention=mention,
        elements=tuple(elements),
        tokens=tuple(tokens),
        token_element=tuple(token_element),
        entity_items=frozenset(entity_items),
        equations=tuple(equations),
        caption_tokens=resolve_caption(book, mention.diagram_ref),
    )


# ---------------------------------------------------------------------------
# shared similarity helpers


def lcs_ratio(a: list[str] | tuple[str, ...], b: list[str] | tuple[str, ...]) -> float:
    """2*LCS(a,b) / (|a|+|b|); 0 when both are empty."""
    if not a or not b:
        return 0.0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[-1]))
        prev = cur
    return 2.0 * prev[-1] / (len(a) + len(b))


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def bigrams(tokens) -> set[tuple[str, str]]:
    return {(tokens[i], tokens[i + 1]) for i in range(len(tokens) - 1)}


def skip_bigram_f1(a: list[str], b: list[str]) -> float:
    """Skip-bigram F-measure: ordered token pairs with any gap."""
    sa = {(a[i], a[j]) for i in range(len(a)) for j in range(i + 1, len(a))}
    sb = {(b[i], b[j]) for i in range(len(b)) for j in range(i + 1, len(b))}
    if not sa or not sb:
        return 0.0
    common = len(sa & sb)
    if common == 0:
        return 0.0
    p = common / len(sa)
    r = common / len(sb)
    return 2 * p * r / (p + r)


def greedy_match_ratio(a: list[str], b: list[str]) -> float:
    """One-to-one identical-token matching, normalized by total length."""
    if not a or not b:
        return 0.0
    from collections import Counter

    ca, cb = Counter(a), Counter(b)
    matched = sum(min(ca[t], cb[t]) for t in ca)
    return 2.0 * matched / (len(a) + len(b))


def equation_template_match(e1: str, e2: str) -> bool:
    """True iff the equations share a structure after point-label renaming."""
    return template_match(e1, e2)


# ---------------------------------------------------------------------------
# identification features (per lattice position, conjoined with a tag pair)

START_TAG = "^"


def _mentions_atc(el: DiscourseElement) -> bool:
    return el.typography.labeled_kind != "none" or bool(_ATC_RE.search(el.text))


def _section_atc(el: DiscourseElement) -> bool:
    return any(_ATC_RE.search(label) for label in el.parent_path)


def ident_features(
    book: Book,
    k: int,
    y_prev: str,
    y_cur: str,
    kw: GeometryKeywordTable,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> FeatureVector:
    """Features for the tag transition (y_prev at k-1, y_cur at k).

    Pairwise content features compare the adjacent elements k-1 and k, so
    the tag conjunction lines up with the text pair being compared.
    """
    if not 0 <= k < len(book.elements):
        raise ValueError(f"position {k} outside book of length {len(book.elements)}")
    hooks = hooks or AnalyzerHooks()
    el = book.elements[k]
    prev_el = book.elements[k - 1] if k > 0 else None
    fv = FeatureVector()
    fv.add(f"trans|{y_prev}|{y_cur}", 1.0)

    toks = [t.lower() for t in el.tokens]

    if "ident:sentence-overlap" not in ablate and prev_el is not None:
        ptoks = [t.lower() for t in prev_el.tokens]
        fv.add(f"ov1|{y_prev}|{y_cur}", jaccard(set(ptoks), set(toks)))
        fv.add(f"ov2|{y_prev}|{y_cur}", jaccard(bigrams(ptoks), bigrams(toks)))

    if "ident:geometry-entities" not in ablate and toks:
        fv.add(f"geoent|{y_cur}", kw.entity_lexicon.entity_token_count(el.tokens) / len(toks))

    if "ident:keywords" not in ablate and any(t in kw.keywords for t in toks):
        fv.add(f"kw|{y_cur}", 1.0)

    if "ident:rst-edge" not in ablate and hooks.rst_relation is not None and prev_el is not None:
        label = hooks.rst_relation(prev_el, el)
        if label:
            fv.add(f"rst={label}|{y_prev}|{y_cur}", 1.0)

    if "ident:axiom-theorem-corollary" not in ablate:
        if _mentions_atc(el):
            fv.add(f"atc_cur|{y_cur}", 1.0)
        if prev_el is not None and _mentions_atc(prev_el):
            fv.add(f"atc_prev|{y_prev}", 1.0)
        if _section_atc(el):
            fv.add(f"atc_sec|{y_cur}", 1.0)
        if prev_el is not None and _section_atc(prev_el):
            fv.add(f"atc_sec_prev|{y_prev}", 1.0)

    if "ident:equation" not in ablate:
        if el.kind == "equation":
            fv.add(f"eq_cur|{y_cur}", 1.0)
        if prev_el is not None and prev_el.kind == "equation":
            fv.add(f"eq_prev|{y_prev}", 1.0)

    if "ident:associated-diagram" not in ablate and el.figure_refs:
        fv.add(f"diag|{y_cur}", 1.0)

    if "ident:bold-underline" not in ablate:
        if el.typography.bold or el.typography.underline:
            fv.add(f"boldul|{y_cur}", 1.0)
        if prev_el is not None and (prev_el.typography.bold or prev_el.typography.underline):
            fv.add(f"boldul_prev|{y_prev}", 1.0)

    if "ident:bounding-box" not in ablate and prev_el is not None:
        if el.typography.boxed and prev_el.typography.boxed:
            fv.add(f"box|{y_prev}|{y_cur}", 1.0)

    if "ident:json-structure" not in ablate and prev_el is not None:
        if el.parent_path == prev_el.parent_path:
            fv.add(f"samenode|{y_prev}|{y_cur}", 1.0)

    return fv


# ---------------------------------------------------------------------------
# alignment features (mention pair, symmetric)


def align_features(
    m1: MentionView,
    m2: MentionView,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> FeatureVector:
    """Similarity features for a cross-book mention pair."""
    if m1.book_id == m2.book_id:
        raise ValueError("alignment features are defined for cross-book pairs only")
    hooks = hooks or AnalyzerHooks()
    fv = FeatureVector()
    t1 = [t.lower() for t in m1.tokens]
    t2 = [t.lower() for t in m2.tokens]

    if "align:overlap" not in ablate:
        fv.add("ov1", jaccard(set(t1), set(t2)))
        fv.add("ov2", jaccard(bigrams(t1), bigrams(t2)))
        fv.add("oventity", jaccard(set(m1.entity_items), set(m2.entity_items)))

    if "align:lcs" not in ablate:
        fv.add("lcs", lcs_ratio(t1, t2))

    if "align:num-elements" not in ablate:
        fv.add("elcount_diff", float(abs(len(m1.elements) - len(m2.elements))))

    if "align:alignment-scores" not in ablate:
        if hooks.external_align_score is not None:
            fv.add("alignsc", hooks.external_align_score(m1, m2))
        else:
            fv.add("alignsc", greedy_match_ratio(t1, t2))

    if "align:summarization" not in ablate:
        fv.add("skipbi", skip_bigram_f1(t1, t2))

    if "align:json-structure" not in ablate:
        if m1.boxed and m2.boxed:
            fv.add("both_boxed", 1.0)
        if m1.labeled and m2.labeled:
            fv.add("both_labeled", 1.0)
        if m1.has_diagram and m2.has_diagram:
            fv.add("both_diagram", 1.0)

    if "align:equation-template" not in ablate:
        if any(equation_template_match(e1, e2) for e1 in m1.equations for e2 in m2.equations):
            fv.add("eqtpl", 1.0)

    if "align:image-caption" not in ablate and m1.has_diagram and m2.has_diagram:
        fv.add("capov", jaccard(set(m1.caption_tokens), set(m2.caption_tokens)))

    return fv


# ---------------------------------------------------------------------------
# split features (premise/conclusion boundary within a mention)


def _span_head(tokens: list[str], lexicon: Lexicon, hooks: AnalyzerHooks, base: int) -> int | None:
    """Index (absolute) of the span's lexical head.

    Uses the syntax hook when present; otherwise the first lexicon trigger
    token, else the first content word.
    """
    if not tokens:
        return None
    if hooks.lexical_head is not None:
        idx = hooks.lexical_head(tokens)
        return base + idx if idx is not None else None
    hits = lexicon.find_triggers(tokens)
    if hits:
        return base + hits[0][0]
    for i, tok in enumerate(tokens):
        if tok.isalpha() and tok.lower() not in STOPWORDS:
            return base + i
    return base


def _is_punct(token: str) -> bool:
    return not any(c.isalnum() for c in token)


def split_features(
    mv: MentionView,
    split: int,
    lexicon: Lexicon,
    markers: tuple[str, ...] = (),
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> FeatureVector:
    """Features for splitting a mention's text at an inter-token boundary.

    ``split`` tokens go to the premise span, the rest to the conclusion.
    A split of 0 (empty premise) only arises for forced equation splits.
    """
    n = len(mv.tokens)
    if not 0 <= split <= n:
        raise ValueError(f"split {split} outside mention of {n} tokens")
    hooks = hooks or AnalyzerHooks()
    fv = FeatureVector()
    left = list(mv.tokens[:split])
    right = list(mv.tokens[split:])
    lleft = [t.lower() for t in left]
    lright = [t.lower() for t in right]
    marker_set = set(markers)

    if "split:span-similarity" not in ablate:
        fv.add("ssim_w", jaccard(set(lleft), set(lright)))
        rel_l = {name for _, _, name in lexicon.find_triggers(left)}
        rel_r = {name for _, _, name in lexicon.find_triggers(right)}
        fv.add("ssim_rel", jaccard(rel_l, rel_r))
        arg_l = {t for t in left if lexicon.is_label(t)}
        arg_r = {t for t in right if lexicon.is_label(t)}
        fv.add("ssim_arg", jaccard(arg_l, arg_r))

    if "split:num-relations" not in ablate:
        fv.add("nrel_l", float(len(lexicon.find_triggers(left))))
        fv.add("nrel_r", float(len(lexicon.find_triggers(right))))

    if "split:span-lengths" not in ablate and left and right:
        fv.add("lenratio", min(len(left), len(right)) / max(len(left), len(right)))

    if "split:relative-position" not in ablate and n:
        head_l = _span_head(left, lexicon, hooks, 0)
        head_r = _span_head(right, lexicon, hooks, split)
        if head_l is not None:
            fv.add("headrel_l", (head_l - split) / n)
        if head_r is not None:
            fv.add("headrel_r", (head_r - split) / n)

    if "split:discourse-markers" not in ablate:
        edges = []
        if left:
            edges.append(("marker_left", lleft[-1]))
            edges.append(("marker_lfirst", lleft[0]))
        if right:
            edges.append(("marker_right", lright[0]))
            edges.append(("marker_rlast", lright[-1]))
        for name, tok in edges:
            if tok in marker_set:
                fv.add(f"{name}={tok}", 1.0)
        if hooks.pos_tagger is not None and left and right:
            tags = hooks.pos_tagger(list(mv.tokens))
            fv.add(f"marker_pos_left={tags[split - 1]}", 1.0)
            fv.add(f"marker_pos_right={tags[split]}", 1.0)

    if "split:punctuation" not in ablate and left and right:
        if _is_punct(left[-1]) or _is_punct(right[0]):
            fv.add("punct_border", 1.0)

    same_sent = False
    same_para = False
    if left and right:
        el_l = mv.element_of_token(split - 1)
        el_r = mv.element_of_token(split)
        same_sent = el_l is el_r
        same_para = el_l.parent_path == el_r.parent_path
        if "split:text-organization" not in ablate:
            if same_sent:
                fv.add("same_sent", 1.0)
            if same_para:
                fv.add("same_para", 1.0)

        if "split:rst-parse" not in ablate and hooks.rst_relation is not None:
            label = hooks.rst_relation(el_l, el_r)
            if label:
                fv.add(f"rst_split={label}", 1.0)
                if not same_sent:
                    fv.add("rst_seg_match", 1.0)

    if "split:edu-segmenter" not in ablate and hooks.edu_boundary_prob is not None:
        fv.add("edu_prob", hooks.edu_boundary_prob(list(mv.tokens), split))

    if "split:head-node" not in ablate and hooks.lexical_head is not None and left and right:
        hl = hooks.lexical_head(left)
        hr = hooks.lexical_head(right)
        if hl is not None and hr is not None:
            wl, wr = lleft[hl], lright[hr]
            fv.add(f"head_l={wl}", 1.0)
            fv.add(f"head_r={wr}", 1.0)
            fv.add(f"head_pair={wl}|{wr}", 1.0)
            if hooks.attachment is not None:
                att = hooks.attachment(list(mv.tokens), split)
                if att:
                    fv.add(f"attach={att}", 1.0)

    if "split:syntax" not in ablate and hooks.syntax_depth is not None and left and right:
        dl = hooks.syntax_depth(list(mv.tokens), split - 1)
        dr = hooks.syntax_depth(list(mv.tokens), split)
        if dl is not None and dr is not None:
            fv.add("syndist_l", float(dl))
            fv.add("syndist_r", float(dr))
            fv.add("syndist_diff", float(dl - dr))

    if "split:dominance" not in ablate and hooks.dominance is not None and left and right:
        dom = hooks.dominance(left, right)
        if dom:
            fv.add(f"dom={dom}", 1.0)

    if "split:json-structure" not in ablate and left and right and same_para:
        el_l = mv.element_of_token(split - 1)
        el_r = mv.element_of_token(split)
        if el_l.parent_path == el_r.parent_path:
            fv.add("samenode_para", 1.0)

    return fv


def validate_groups(groups) -> None:
    unknown = [g for g in groups if g not in FEATURE_GROUPS]
    if unknown:
        raise ValueError(f"unknown feature groups: {', '.join(sorted(unknown))}")
