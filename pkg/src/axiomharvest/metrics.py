"""Evaluation metrics: mention PRF, pairwise alignment PRF, NMI, parse PRF,
and SAT-style grading."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .corpus import AxiomMention


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, matched: int, num_pred: int, num_gold: int) -> "PRF":
        p = matched / num_pred if num_pred else 0.0
        r = matched / num_gold if num_gold else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)

    def as_percent(self) -> tuple[float, float, float]:
        return (100 * self.precision, 100 * self.recall, 100 * self.f1)


def _overlap(a: AxiomMention, b: AxiomMention) -> int:
    if a.book_id != b.book_id:
        return 0
    lo = max(a.start, b.start)
    hi = min(a.end, b.end)
    return max(0, hi - lo + 1)


def _relaxed_match(pred: AxiomMention, gold: AxiomMention, gold_only: bool) -> bool:
    ov = _overlap(pred, gold)
    if ov == 0:
        return False
    pred_len = pred.end - pred.start + 1
    gold_len = gold.end - gold.start + 1
    if gold_only:
        return ov > 0.5 * gold_len
    return ov > 0.5 * pred_len and ov > 0.5 * gold_len


def ident_prf(
    pred: list[AxiomMention],
    gold: list[AxiomMention],
    mode: str = "strict",
    relaxed_gold_only: bool = False,
) -> PRF:
    """Mention identification PRF.

    Strict mode requires exact span equality. Relaxed mode requires the
    overlap to exceed half of both spans (or half of the gold span only,
    with ``relaxed_gold_only``), matched greedily one-to-one by descending
    overlap with ties to earlier spans.
    """
    if mode not in ("strict", "relaxed"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "strict":
        matched = len({(m.book_id, m.span) for m in pred} & {(m.book_id, m.span) for m in gold})
        return PRF.from_counts(matched, len(pred), len(gold))

    candidates = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gold):
            if _relaxed_match(p, g, relaxed_gold_only):
                candidates.append((-_overlap(p, g), p.book_id, p.start, g.start, i, j))
    candidates.sort()
    used_pred: set[int] = set()
    used_gold: set[int] = set()
    matched = 0
    for _, _, _, _, i, j in candidates:
        if i in used_pred or j in used_gold:
            continue
        used_pred.add(i)
        used_gold.add(j)
        matched += 1
    return PRF.from_counts(matched, len(pred), len(gold))


def _pairs(clusters: list[list]) -> set[frozenset]:
    out = set()
    for cluster in clusters:
        for i, a in enumerate(cluster):
            for b in cluster[i + 1 :]:
                out.add(frozenset((a, b)))
    return out


def alignment_pair_prf(pred_clusters: list[list], gold_clusters: list[list]) -> PRF:
    """PRF over same-cluster decisions for every unordered mention pair."""
    pred_universe = {m for c in pred_clusters for m in c}
    gold_universe = {m for c in gold_clusters for m in c}
    if pred_universe != gold_universe:
        raise ValueError("pred and gold clusterings cover different mentions")
    pred_pairs = _pairs(pred_clusters)
    gold_pairs = _pairs(gold_clusters)
    return PRF.from_counts(len(pred_pairs & gold_pairs), len(pred_pairs), len(gold_pairs))


def nmi(pred_clusters: list[list], gold_clusters: list[list]) -> float:
    """Normalized mutual information I(P;G)/sqrt(H(P)H(G)).

    When both partitions are trivial (single cluster or all singletons with
    zero entropy), 0/0 is defined as 1 if the partitions are identical in
    shape, else 0.
    """
    pred_universe = {m for c in pred_clusters for m in c}
    gold_universe = {m for c in gold_clusters for m in c}
    if not pred_universe:
        raise ValueError("empty mention universe")
    if pred_universe != gold_universe:
        raise ValueError("pred and gold clusterings cover different mentions")
    n = len(pred_universe)
    pred_sizes = [len(c) for c in pred_clusters if c]
    gold_sizes = [len(c) for c in gold_clusters if c]
    h_pred = -sum(s / n * math.log(s / n) for s in pred_sizes)
    h_gold = -sum(s / n * math.log(s / n) for s in gold_sizes)
    if h_pred == 0.0 or h_gold == 0.0:
        same_shape = sorted(pred_sizes) == sorted(gold_sizes)
        return 1.0 if (h_pred == 0.0 and h_gold == 0.0 and same_shape) else 0.0
    mutual = 0.0
    for cp in pred_clusters:
        sp = set(cp)
        for cg in gold_clusters:
            inter = len(sp & set(cg))
            if inter:
                mutual += inter / n * math.log(n * inter / (len(cp) * len(cg)))
    return mutual / math.sqrt(h_pred * h_gold)


def parse_prf(pred_rules: dict, gold_rules: dict, level: str = "full") -> PRF:
    """Parse accuracy over rules paired by global axiom id.

    ``level='literal'`` scores the multiset of canonical premise/conclusion
    literals and equations; ``level='full'`` credits only exact canonical
    rule equality. Axioms present on only one side count as misses. Values
    are canonicalized HornRules (see the parser module) or None.
    """
    if level not in ("literal", "full"):
        raise ValueError(f"unknown level {level!r}")
    axioms = set(pred_rules) | set(gold_rules)
    if level == "full":
        matched = sum(
            1
            for a in axioms
            if pred_rules.get(a) is not None
            and gold_rules.get(a) is not None
            and pred_rules[a].canonical_text() == gold_rules[a].canonical_text()
        )
        n_pred = sum(1 for a in axioms if pred_rules.get(a) is not None)
        n_gold = sum(1 for a in axioms if gold_rules.get(a) is not None)
        return PRF.from_counts(matched, n_pred, n_gold)

    matched = 0
    n_pred = 0
    n_gold = 0
    for a in axioms:
        p = pred_rules.get(a)
        g = gold_rules.get(a)
        pc = Counter(p.literal_items()) if p is not None else Counter()
        gc = Counter(g.literal_items()) if g is not None else Counter()
        matched += sum((pc & gc).values())
        n_pred += sum(pc.values())
        n_gold += sum(gc.values())
    return PRF.from_counts(matched, n_pred, n_gold)


def sat_score(answers: list[str]) -> float:
    """SAT grading: +1 per correct, -0.25 per wrong, 0 per abstention,
    scaled to a 0-100 range over the number of questions."""
    if not answers:
        raise ValueError("no answers to grade")
    for a in answers:
        if a not in ("correct", "wrong", "abstain"):
            raise ValueError(f"unknown answer outcome {a!r}")
    correct = sum(1 for a in answers if a == "correct")
    wrong = sum(1 for a in answers if a == "wrong")
    return 100.0 * (correct - 0.25 * wrong) / len(answers)
