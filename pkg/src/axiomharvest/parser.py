"""Axiom parsing: mention text to weighted horn-clause rules.

The base parser splits a mention into premise and conclusion spans with a
log-linear boundary model (beam search over contiguous splits; an equation
element forces the split), then maps each span to logical formulas with a
deterministic trigger/slot mapper over the lexicon. Redundant parses of the
same axiom from several sources are fused by one of four heuristics.
"""

from __future__ import annotations

import itertools
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import equations as eqmod
from .equations import Equation, EquationError, parse_equation
from .features import AnalyzerHooks, MentionView, split_features
from .lexicon import Lexicon, PredicateDef

logger = logging.getLogger(__name__)

_LABEL_TOKEN = re.compile(r"[A-Z]{1,4}$")
_ARTICLES_NEW = {"a", "an", "another"}


# ---------------------------------------------------------------------------
# terms and formulas


@dataclass(frozen=True)
class Var:
    name: str
    vtype: str

    def __str__(self) -> str:
        return f"?{self.name}"


@dataclass(frozen=True)
class Const:
    name: str
    vtype: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class App:
    fn: str
    args: tuple["Term", ...]
    vtype: str

    def __str__(self) -> str:
        return f"{self.fn}({', '.join(str(a) for a in self.args)})"


Term = Var | Const | App


@dataclass(frozen=True)
class Literal:
    predicate: str
    args: tuple[Term, ...]

    def __str__(self) -> str:
        return f"{self.predicate}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Formula:
    literals: tuple[Literal, ...] = ()
    equations: tuple[Equation, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.literals and not self.equations

    def __str__(self) -> str:
        parts = [str(lit) for lit in self.literals]
        parts.extend(f"eq({eq})" for eq in self.equations)
        return " , ".join(parts) if parts else "true"


@dataclass(frozen=True)
class SplitCandidate:
    """A premise/conclusion boundary: ``split`` tokens form the premise."""

    split: int
    premise_span: tuple[int, int]
    conclusion_span: tuple[int, int]
    forced: bool = False
    score: float | None = None


@dataclass(frozen=True)
class HornRule:
    premise: Formula
    conclusion: Formula
    confidence: float = 1.0
    provenance: tuple[str, tuple[int, int], int] | None = None
    diagram_ref: str | None = None

    def __post_init__(self) -> None:
        if self.conclusion.empty:
            raise ValueError("horn rule conclusion must be nonempty")
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"confidence must be in (0,1], got {self.confidence}")

    def text(self) -> str:
        return f"{self.confidence:.6g} :: {self.premise} => {self.conclusion} ."

    def canonical(self) -> "HornRule":
        return canonicalize_rule(self)

    def canonical_text(self) -> str:
        c = self.canonical()
        return f"{c.premise} => {c.conclusion}"

    def literal_items(self) -> list[tuple[str, str]]:
        """Canonical premise/conclusion literals and equations, for scoring."""
        c = self.canonical()
        items = [("p", str(lit)) for lit in c.premise.literals]
        items += [("p-eq", eqmod.canonical_template(eq)) for eq in c.premise.equations]
        items += [("c", str(lit)) for lit in c.conclusion.literals]
        items += [("c-eq", eqmod.canonical_template(eq)) for eq in c.conclusion.equations]
        return items


@dataclass
class SplitModel:
    w: dict[str, float] = field(default_factory=dict)
    beam_size: int = 10
    markers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValueError("beam size must be >= 1")


# ---------------------------------------------------------------------------
# splits


def enumerate_splits(mv: MentionView) -> list[SplitCandidate]:
    """All premise/conclusion split candidates of a mention.

    A mention containing an equation element yields exactly one forced
    candidate: the equation (and everything after it) is the conclusion.
    Otherwise every inter-token boundary is a candidate.
    """
    n = len(mv.tokens)
    if n == 0:
        raise ValueError("cannot split an empty mention")
    eq_offsets = [
        off for off, el in enumerate(mv.elements) if el.equation_payload is not None
    ]
    if eq_offsets:
        first = eq_offsets[0]
        split = next(
            (i for i, off in enumerate(mv.token_element) if off == first), 0
        )
        return [
            SplitCandidate(
                split=split,
                premise_span=(0, split),
                conclusion_span=(split, n),
                forced=True,
            )
        ]
    return [
        SplitCandidate(split=p, premise_span=(0, p), conclusion_span=(p, n))
        for p in range(1, n)
    ]


def score_split(
    mv: MentionView,
    cand: SplitCandidate,
    model: SplitModel,
    lexicon: Lexicon,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> float:
    fv = split_features(mv, cand.split, lexicon, model.markers, hooks, ablate)
    return fv.dot(model.w)


# ---------------------------------------------------------------------------
# span-to-formula mapping


@dataclass
class _Entity:
    pos: int
    kind: str  # "label" or "noun"
    label: str | None = None
    var: Var | None = None

    def points(self) -> list[str]:
        return list(self.label) if self.label else []


def _collect_entities(tokens: list[str], lexicon: Lexicon) -> list[_Entity]:
    """Label constants and generic-noun variables in span order.

    'a <noun>' introduces a fresh typed variable; 'the <noun>' (or a bare
    noun) reuses the last variable of that type when one exists.
    """
    trigger_spans = [(s, e) for s, e, _ in lexicon.find_triggers(tokens)]

    def inside_trigger(i: int) -> bool:
        return any(s <= i < e for s, e in trigger_spans)

    entities: list[_Entity] = []
    last_var_of_type: dict[str, Var] = {}
    counter = itertools.count(1)
    noun_spans = lexicon.find_entity_nouns(tokens)
    noun_positions = {}
    for s, e, tname in noun_spans:
        noun_positions[s] = (e, tname)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if i in noun_positions:
            e, tname = noun_positions[i]
            det = tokens[i - 1].lower() if i > 0 else ""
            if det in _ARTICLES_NEW or tname not in last_var_of_type:
                var = Var(name=f"{tname[0]}{next(counter)}", vtype=tname)
                last_var_of_type[tname] = var
            else:
                var = last_var_of_type[tname]
            entities.append(_Entity(pos=i, kind="noun", var=var))
            i = e
            continue
        if _LABEL_TOKEN.fullmatch(tok) and not inside_trigger(i):
            entities.append(_Entity(pos=i, kind="label", label=tok))
        i += 1
    return entities


def _realize(entity: _Entity, slot_type: str) -> Term | None:
    """A term of ``slot_type`` from an entity mention, if possible."""
    if entity.kind == "noun":
        return entity.var if entity.var.vtype == slot_type else None
    label = entity.label
    pts = tuple(Const(c, "point") for c in label)
    if slot_type == "point" and len(label) == 1:
        return pts[0]
    if slot_type == "segment" and len(label) == 2:
        return App("seg", pts, "segment")
    if slot_type == "line" and len(label) == 2:
        return App("line", pts, "line")
    if slot_type == "angle" and len(label) == 3:
        return App("angle", pts, "angle")
    if slot_type == "triangle" and len(label) == 3:
        return App("tri", pts, "triangle")
    if slot_type == "quadrilateral" and len(label) == 4:
        return App("quad", pts, "quadrilateral")
    if slot_type == "circle" and len(label) == 1:
        # a circle named by its center letter
        return Const(label, "circle")
    return None


def _fill_literal(
    pred: PredicateDef,
    entities: list[_Entity],
    trigger_pos: int,
    used: set[int],
    fresh: itertools.count,
) -> tuple[Literal, int]:
    """Typed slot filling; returns the literal and how many slots were bound
    from actual entity mentions (fresh variables count as unbound)."""
    order = sorted(
        range(len(entities)),
        key=lambda i: (entities[i].pos < trigger_pos, abs(entities[i].pos - trigger_pos)),
    )
    args: list[Term] = []
    bound = 0
    slot = 0
    while slot < len(pred.arg_types):
        stype = pred.arg_types[slot]
        # a run of point slots can consume one multi-letter label
        if stype == "point":
            run = 0
            while slot + run < len(pred.arg_types) and pred.arg_types[slot + run] == "point":
                run += 1
            picked = None
            for i in order:
                if i in used or entities[i].kind != "label":
                    continue
                if len(entities[i].label) == run:
                    picked = i
                    break
            if picked is None:
                for i in order:
                    if i not in used and entities[i].kind == "label" and len(entities[i].label) == 1:
                        picked = i
                        run = 1
                        break
            if picked is not None:
                used.add(picked)
                for c in entities[picked].label:
                    args.append(Const(c, "point"))
                bound += len(entities[picked].label)
                slot += len(entities[picked].label)
                continue
            args.append(Var(f"p{next(fresh)}", "point"))
            slot += 1
            continue
        picked_term = None
        for i in order:
            if i in used:
                continue
            term = _realize(entities[i], stype)
            if term is not None:
                picked_term = term
                if entities[i].kind == "label":
                    used.add(i)
                bound += 1
                break
        if picked_term is None:
            picked_term = Var(f"{stype[0]}{next(fresh)}", stype)
        args.append(picked_term)
        slot += 1
    return Literal(predicate=pred.name, args=tuple(args)), bound


def map_span_to_formulas(
    tokens: list[str] | tuple[str, ...],
    lexicon: Lexicon,
    k: int = 10,
) -> list[tuple[Formula, float]]:
    """Top-k formulas for a token span with coverage scores.

    Equation spans become a single equation formula. Otherwise predicate
    triggers are detected longest-match-first and their argument slots are
    filled from entity mentions; score is (matched trigger tokens + bound
    slots) / (span tokens + total slots).
    """
    tokens = list(tokens)
    if not tokens:
        return [(Formula(), 0.0)]
    text = " ".join(tokens)
    if "=" in text:
        try:
            eq = parse_equation(text)
            return [(Formula(equations=(eq,)), 1.0)]
        except EquationError:
            pass
    triggers = lexicon.find_triggers(tokens)
    if not triggers:
        return [(Formula(), 0.0)]
    entities = _collect_entities(tokens, lexicon)
    used: set[int] = set()
    fresh = itertools.count(1)
    built: list[tuple[Literal, int, int]] = []  # literal, trigger tokens, bound slots
    for s, e, name in triggers:
        pred = lexicon.predicate(name)
        lit, bound = _fill_literal(pred, entities, s, used, fresh)
        built.append((lit, e - s, bound))

    def score_of(subset: tuple[int, ...]) -> float:
        trig_tokens = sum(built[i][1] for i in subset)
        bound = sum(built[i][2] for i in subset)
        slots = sum(len(built[i][0].args) for i in subset)
        return (trig_tokens + bound) / (len(tokens) + slots)

    indices = tuple(range(len(built)))
    candidates: list[tuple[int, ...]] = [indices]
    if len(built) > 1:
        candidates.extend(tuple(j for j in indices if j != i) for i in indices)
    results: list[tuple[Formula, float]] = []
    seen: set[str] = set()
    for subset in candidates:
        f = Formula(literals=tuple(built[i][0] for i in subset))
        key = str(f)
        if key in seen:
            continue
        seen.add(key)
        results.append((f, score_of(subset)))
    results.sort(key=lambda fs: (-fs[1], -len(fs[0].literals), str(fs[0])))
    return results[:k]


def parse_mention(
    mv: MentionView,
    model: SplitModel,
    lexicon: Lexicon,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> list[HornRule]:
    """Beam parse: best splits, best span formulas, softmax confidences."""
    cands = enumerate_splits(mv)
    scored = [
        replace(c, score=score_split(mv, c, model, lexicon, hooks, ablate)) for c in cands
    ]
    scored.sort(key=lambda c: (-c.score, c.split))
    scored = scored[: model.beam_size]
    combined: list[tuple[float, HornRule]] = []
    for cand in scored:
        premise_opts = map_span_to_formulas(
            mv.tokens[: cand.split], lexicon, k=model.beam_size
        )
        conclusion_opts = map_span_to_formulas(
            mv.tokens[cand.split :], lexicon, k=model.beam_size
        )
        for pf, ps in premise_opts:
            for cf, cs in conclusion_opts:
                if cf.empty:
                    continue
                total = cand.score + ps + cs
                rule = HornRule(
                    premise=pf,
                    conclusion=cf,
                    confidence=1.0,  # placeholder, normalized below
                    provenance=(mv.book_id, mv.mention.span, 0),
                    diagram_ref=mv.mention.diagram_ref,
                )
                combined.append((total, rule))
    if not combined:
        return []
    best: dict[str, tuple[float, HornRule]] = {}
    for total, rule in combined:
        key = rule.canonical_text()
        if key not in best or total > best[key][0]:
            best[key] = (total, rule)
    ranked = sorted(best.values(), key=lambda tr: (-tr[0], tr[1].canonical_text()))
    ranked = ranked[: model.beam_size]
    scores = np.array([t for t, _ in ranked])
    probs = np.exp(scores - scores.max())
    probs /= probs.sum()
    return [
        replace(rule, confidence=float(p), provenance=(mv.book_id, mv.mention.span, rank))
        for rank, ((_, rule), p) in enumerate(zip(ranked, probs))
    ]


# ---------------------------------------------------------------------------
# split model training


def build_marker_table(
    labeled: list[tuple[MentionView, int]], top: int = 100
) -> tuple[str, ...]:
    """Top tokens by frequency at gold span edges (first/last of each span)."""
    from collections import Counter

    counts: Counter[str] = Counter()
    for mv, split in labeled:
        toks = [t.lower() for t in mv.tokens]
        for idx in (0, split - 1, split, len(toks) - 1):
            if 0 <= idx < len(toks):
                counts[toks[idx]] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple(w for w, _ in ranked[:top])


def train_split_model(
    labeled: list[tuple[MentionView, int]],
    grid: list[float],
    lexicon: Lexicon,
    dev: list[tuple[MentionView, int]] | None = None,
    beam_size: int = 10,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
    max_iter: int = 200,
    gtol: float = 1e-5,
) -> SplitModel:
    """Maximize the conditional likelihood of gold splits, with the L2
    strength grid-tuned on dev split accuracy."""
    if not labeled:
        raise ValueError("no labeled splits to train on")
    markers = build_marker_table(labeled)

    def featurize(data):
        rows = []
        for mv, gold in data:
            cands = enumerate_splits(mv)
            if len(cands) < 2:
                continue  # forced or single-boundary mentions teach nothing
            fvs = [
                split_features(mv, c.split, lexicon, markers, hooks, ablate) for c in cands
            ]
            gold_idx = next((i for i, c in enumerate(cands) if c.split == gold), None)
            if gold_idx is None:
                raise ValueError(f"gold split {gold} is not a candidate boundary")
            rows.append((fvs, gold_idx))
        return rows

    rows = featurize(labeled)
    if not rows:
        raise ValueError("every training mention has a forced split; nothing to learn")
    names = sorted({n for fvs, _ in rows for fv in fvs for n in fv.entries})
    index = {n: i for i, n in enumerate(names)}
    enc = []
    for fvs, gold_idx in rows:
        enc.append(
            (
                [
                    (
                        np.array([index[n] for n in fv.entries], dtype=np.intp),
                        np.array(list(fv.entries.values())),
                    )
                    for fv in fvs
                ],
                gold_idx,
            )
        )

    def objective(x, lam):
        val = 0.0
        grad = np.zeros(len(names))
        for cands, gold_idx in enc:
            scores = np.array([v @ x[i] if len(i) else 0.0 for i, v in cands])
            m = scores.max()
            logz = m + math.log(np.exp(scores - m).sum())
            val += logz - scores[gold_idx]
            probs = np.exp(scores - logz)
            for (ids, vals), p in zip(cands, probs):
                if len(ids):
                    np.add.at(grad, ids, p * vals)
            ids, vals = cands[gold_idx]
            if len(ids):
                np.add.at(grad, ids, -vals)
        val += lam * float(x @ x)
        grad += 2 * lam * x
        return val, grad

    def fit(lam):
        res = minimize(
            objective,
            np.zeros(len(names)),
            args=(lam,),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-12},
        )
        if not np.all(np.isfinite(res.x)):
            raise RuntimeError(f"split training diverged at lambda={lam}")
        return res.x

    def accuracy(model, data):
        hits = total = 0
        for mv, gold in data:
            cands = enumerate_splits(mv)
            if len(cands) < 2:
                continue
            best = max(
                cands,
                key=lambda c: (score_split(mv, c, model, lexicon, hooks, ablate), -c.split),
            )
            hits += best.split == gold
            total += 1
        return hits / total if total else 0.0

    if not grid:
        raise ValueError("empty lambda grid")
    best_lam = grid[0]
    if dev:
        best_acc = -1.0
        for lam in grid:
            x = fit(lam)
            model = SplitModel(
                w={n: float(v) for n, v in zip(names, x) if v != 0.0},
                beam_size=beam_size,
                markers=markers,
            )
            acc = accuracy(model, dev)
            logger.info("split lambda=%s dev accuracy=%.4f", lam, acc)
            if acc > best_acc:
                best_lam, best_acc = lam, acc
    x = fit(best_lam)
    return SplitModel(
        w={n: float(v) for n, v in zip(names, x) if v != 0.0},
        beam_size=beam_size,
        markers=markers,
    )


# ---------------------------------------------------------------------------
# canonicalization


def _term_skeleton(term: Term) -> str:
    if isinstance(term, Var):
        return "?"
    if isinstance(term, Const):
        return "*" if _LABEL_TOKEN.fullmatch(term.name) else term.name
    return f"{term.fn}({','.join(_term_skeleton(a) for a in term.args)})"


def _rename_term(term: Term, labels: dict[str, str], vars_: dict[str, str]) -> Term:
    if isinstance(term, Var):
        if term.name not in vars_:
            vars_[term.name] = f"v{len(vars_) + 1}"
        return Var(vars_[term.name], term.vtype)
    if isinstance(term, Const):
        if _LABEL_TOKEN.fullmatch(term.name):
            if term.name not in labels:
                labels[term.name] = f"L{len(labels) + 1}"
            return Const(labels[term.name], term.vtype)
        return term
    return App(term.fn, tuple(_rename_term(a, labels, vars_) for a in term.args), term.vtype)


def canonicalize_rule(rule: HornRule) -> HornRule:
    """Canonical form: point-label constants and variables renamed in
    first-use order over skeleton-sorted literals, equations normalized
    under the same label map, literals finally sorted by rendering."""
    labels: dict[str, str] = {}
    vars_: dict[str, str] = {}

    def canon_side(f: Formula) -> Formula:
        pre_sorted = sorted(
            f.literals, key=lambda lit: (lit.predicate, [_term_skeleton(a) for a in lit.args])
        )
        renamed = [
            Literal(lit.predicate, tuple(_rename_term(a, labels, vars_) for a in lit.args))
            for lit in pre_sorted
        ]
        eqs = []
        for eq in f.equations:
            tpl = eqmod.canonical_template(eq, label_map=labels)
            eqs.append(parse_equation(tpl))
        return Formula(
            literals=tuple(sorted(renamed, key=str)),
            equations=tuple(sorted(eqs, key=str)),
        )

    premise = canon_side(rule.premise)
    conclusion = canon_side(rule.conclusion)
    return replace(rule, premise=premise, conclusion=conclusion)


# ---------------------------------------------------------------------------
# multi-source fusion


def _beam_key_conf(beam: list[HornRule]) -> dict[str, float]:
    out: dict[str, float] = {}
    for r in beam:
        key = r.canonical_text()
        out[key] = max(out.get(key, 0.0), r.confidence)
    return out


def _best_instance(beams: list[list[HornRule]], key: str) -> HornRule:
    best = None
    for beam in beams:
        for r in beam:
            if r.canonical_text() == key and (best is None or r.confidence > best.confidence):
                best = r
    assert best is not None
    return best


def fuse(
    beams: list[list[HornRule]],
    method: str = "majority",
    source_weights: list[float] | None = None,
    tau: float = 0.5,
    top_k: int = 5,
) -> HornRule:
    """Resolve one axiom's per-source parse beams into a single rule.

    majority: the canonical rule present in most beams (ties by total
    confidence). average: the rule with the highest mean confidence over
    sources, counting only each source's top ``top_k`` parses.
    source_confidence: highest sum of per-source weight times confidence.
    predicate_score: assemble a new rule from premise/conclusion predicates
    whose mean best-confidence support exceeds ``tau`` times the maximum
    support.
    """
    if not any(beams):
        raise ValueError("all parse beams are empty")
    n_sources = len(beams)
    if method == "majority":
        counts: dict[str, int] = {}
        totals: dict[str, float] = {}
        for beam in beams:
            for key, conf in _beam_key_conf(beam).items():
                counts[key] = counts.get(key, 0) + 1
                totals[key] = totals.get(key, 0.0) + conf
        winner = max(counts, key=lambda k: (counts[k], totals[k], k))
        return _best_instance(beams, winner).canonical()
    if method == "average":
        totals = {}
        for beam in beams:
            top = sorted(beam, key=lambda r: -r.confidence)[:top_k]
            for key, conf in _beam_key_conf(top).items():
                totals[key] = totals.get(key, 0.0) + conf
        winner = max(totals, key=lambda k: (totals[k] / n_sources, k))
        return _best_instance(beams, winner).canonical()
    if method == "source_confidence":
        if source_weights is None or len(source_weights) != n_sources:
            raise ValueError("source_confidence fusion needs one weight per source")
        totals = {}
        for weight, beam in zip(source_weights, beams):
            for key, conf in _beam_key_conf(beam).items():
                totals[key] = totals.get(key, 0.0) + weight * conf
        winner = max(totals, key=lambda k: (totals[k], k))
        return _best_instance(beams, winner).canonical()
    if method == "predicate_score":
        return _fuse_predicates(beams, tau)
    raise ValueError(f"unknown fusion method {method!r}")


def _pred_key(side: str, item) -> tuple[str, str]:
    if isinstance(item, Literal):
        return (side, f"lit:{item.predicate}/{len(item.args)}")
    return (side, f"eq:{eqmod.canonical_template(item)}")


def _fuse_predicates(beams: list[list[HornRule]], tau: float) -> HornRule:
    n_sources = len(beams)
    support: dict[tuple[str, str], float] = {}
    rep: dict[tuple[str, str], tuple[float, object]] = {}
    for beam in beams:
        per_source: dict[tuple[str, str], float] = {}
        for r in beam:
            c = r.canonical()
            for side, formula in (("p", c.premise), ("c", c.conclusion)):
                for item in list(formula.literals) + list(formula.equations):
                    key = _pred_key(side, item)
                    per_source[key] = max(per_source.get(key, 0.0), r.confidence)
                    if key not in rep or r.confidence > rep[key][0]:
                        rep[key] = (r.confidence, item)
        for key, conf in per_source.items():
            support[key] = support.get(key, 0.0) + conf / n_sources
    max_support = max(support.values())
    threshold = tau * max_support
    kept = [key for key, s in sorted(support.items()) if s > threshold]
    if not any(k[0] == "c" for k in kept):
        # keep at least the best-supported conclusion item
        best_c = max(
            (k for k in support if k[0] == "c"), key=lambda k: (support[k], k), default=None
        )
        if best_c is None:
            raise ValueError("no conclusion predicates present in any beam")
        kept.append(best_c)

    def side_formula(side: str) -> Formula:
        lits = []
        eqs = []
        for key in kept:
            if key[0] != side:
                continue
            item = rep[key][1]
            if isinstance(item, Literal):
                lits.append(item)
            else:
                eqs.append(item)
        return Formula(literals=tuple(lits), equations=tuple(eqs))

    kept_support = [support[k] for k in kept]
    confidence = min(1.0, max(1e-9, sum(kept_support) / len(kept_support)))
    rule = HornRule(
        premise=side_formula("p"), conclusion=side_formula("c"), confidence=confidence
    )
    return rule.canonical()


def conff(kept):
    return [k for k in kept if k[0] == "c"]


def conff_nonempty(items) -> bool:
    return bool(items)


def learn_source_confidence(
    dev_beams: dict[str, list[list[HornRule]]],
    gold: dict[str, HornRule],
) -> list[float]:
    """Weights over sources maximizing dev full-parse F1 of
    source_confidence fusion. Coordinate grid with step 0.1 on the simplex;
    ties break toward the uniform weighting, then lexicographically."""
    if not gold:
        raise ValueError("no gold rules to tune on")
    if not dev_beams:
        raise ValueError("no dev beams")
    n_sources = {len(beams) for beams in dev_beams.values()}
    if len(n_sources) != 1:
        raise ValueError("all axioms must have one beam per source")
    S = n_sources.pop()
    if S == 1:
        return [1.0]

    from .metrics import parse_prf

    def compositions(total: int, parts: int):
        if parts == 1:
            yield (total,)
            return
        for head in range(total + 1):
            for rest in compositions(total - head, parts - 1):
                yield (head,) + rest

    uniform = np.full(S, 1.0 / S)
    best = None
    for comp in compositions(10, S):
        weights = [c / 10.0 for c in comp]
        fused = {}
        for axiom, beams in dev_beams.items():
            if not any(beams):
                continue
            fused[axiom] = fuse(beams, "source_confidence", source_weights=weights)
        f1 = parse_prf(fused, gold, level="full").f1
        dist = float(np.linalg.norm(np.array(weights) - uniform))
        key = (-f1, dist, tuple(-w for w in weights))
        if best is None or key < best[0]:
            best = (key, weights)
    return best[1]


# ---------------------------------------------------------------------------
# rule text round-trip


class RuleFormatError(ValueError):
    pass


def _split_top_level(text: str, sep: str) -> list[str]:
    parts = []
    depth = 0
    cur = []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def _parse_term(text: str, expected_type: str, lexicon: Lexicon) -> Term:
    text = text.strip()
    if text.startswith("?"):
        return Var(text[1:], expected_type)
    m = re.fullmatch(r"([A-Za-z_][A-Za-z_0-9]*)\((.*)\)", text, re.DOTALL)
    if m:
        fn, argtext = m.group(1), m.group(2)
        fdef = lexicon.predicate(fn)
        args = _split_top_level(argtext, ",")
        if len(args) != fdef.arity:
            raise RuleFormatError(f"{fn}: expected {fdef.arity} args, got {len(args)}")
        terms = tuple(
            _parse_term(a, t, lexicon) for a, t in zip(args, fdef.arg_types)
        )
        return App(fn, terms, fdef.result_type or expected_type)
    return Const(text, expected_type)


def _parse_formula(text: str, lexicon: Lexicon) -> Formula:
    text = text.strip()
    if text in ("", "true"):
        return Formula()
    literals = []
    equations = []
    for part in _split_top_level(text, ","):
        m = re.fullmatch(r"eq\((.*)\)", part, re.DOTALL)
        if m:
            equations.append(parse_equation(m.group(1)))
            continue
        m = re.fullmatch(r"([A-Za-z_][A-Za-z_0-9]*)\((.*)\)", part, re.DOTALL)
        if not m:
            raise RuleFormatError(f"bad literal {part!r}")
        name, argtext = m.group(1), m.group(2)
        pdef = lexicon.predicate(name)
        args = _split_top_level(argtext, ",")
        if len(args) != pdef.arity:
            raise RuleFormatError(f"{name}: expected {pdef.arity} args, got {len(args)}")
        terms = tuple(_parse_term(a, t, lexicon) for a, t in zip(args, pdef.arg_types))
        literals.append(Literal(name, terms))
    return Formula(literals=tuple(literals), equations=tuple(equations))


def parse_rule_text(line: str, lexicon: Lexicon) -> HornRule:
    line = line.strip()
    if line.endswith("."):
        line = line[:-1].strip()
    conf_part, sep, rest = line.partition("::")
    if not sep:
        raise RuleFormatError(f"missing confidence separator in {line!r}")
    left, sep, right = rest.partition("=>")
    if not sep:
        raise RuleFormatError(f"missing => in {line!r}")
    return HornRule(
        premise=_parse_formula(left, lexicon),
        conclusion=_parse_formula(right, lexicon),
        confidence=float(conf_part.strip()),
    )


def load_rules(path, lexicon: Lexicon) -> list[HornRule]:
    rules = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rules.append(parse_rule_text(line, lexicon))
    return rules


def save_rules(rules: list[HornRule], path) -> None:
    Path(path).write_text("\n".join(r.text() for r in rules) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# split model persistence

_MODEL_HEADER = "axiomharvest-split-model v1"


def save_split_model(model: SplitModel, path) -> None:
    lines = [_MODEL_HEADER, f"beam_size\t{model.beam_size}"]
    for m in model.markers:
        lines.append(f"marker\t{m}")
    for name in sorted(model.w):
        lines.append(f"w\t{name}\t{model.w[name]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split_model(path) -> SplitModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MODEL_HEADER:
        raise ValueError(f"{path}: not a split model file")
    beam_size = 10
    markers: list[str] = []
    w: dict[str, float] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, _, rest = line.partition("\t")
        if kind == "beam_size":
            beam_size = int(rest)
        elif kind == "marker":
            markers.append(rest)
        elif kind == "w":
            name, _, value = rest.rpartition("\t")
            w[name] = float(value)
        else:
            raise ValueError(f"{path}: unknown record {kind!r}")
    return SplitModel(w=w, beam_size=beam_size, markers=tuple(markers))
