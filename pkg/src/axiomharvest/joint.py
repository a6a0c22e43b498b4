"""Joint axiom identification and alignment.

The joint model multiplies the sequence-labeling factor (tag transitions
scored by the identification weights) with the alignment factor (pair
scores over co-assigned mentions, soft ordering penalty included). A
Metropolis-Hastings chain alternates block moves over the tag sequences
(update / delete / introduce, proposed through the identification model
restricted to the affected window) with Gibbs sweeps over the alignment
variables.

The proposal machinery keeps the chain exactly invariant for the joint
distribution: every move reports the full log proposal asymmetry,
including the move-kind and target choice, the placement softmax in both
directions, the identification-score change, and the probability of the
alignment reconciliation draws. The acceptance probability is then
min(1, exp(alignment-score change + proposal log-ratio)). A paper-style
approximate mode accepts on the alignment ratio alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import align as align_mod
from .align import AlignModel, AlignmentClusters, AlignmentState, SamplerConfig, clusters_from_state
from .corpus import AxiomMention, Corpus, extract_mentions
from .crf import TAG_INDEX, FeatureLattice, IdentModel, LatticeScores, viterbi
from .features import AnalyzerHooks, FeatureVector, MentionView, align_features, mention_view
from .lexicon import Lexicon

logger = logging.getLogger(__name__)

Span = tuple[int, int]
MOVE_KINDS = ("update", "delete", "introduce")


class JointConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class JointState:
    """Tags per book, derived mentions, and slots aligned with mentions."""

    tags: dict[str, tuple[str, ...]]
    mentions: dict[str, tuple[AxiomMention, ...]]
    slots: dict[str, tuple[int, ...]]
    U: int

    def alignment(self) -> AlignmentState:
        return AlignmentState(slots=dict(self.slots), U=self.U)

    def as_key(self) -> tuple:
        return (
            tuple((b, self.tags[b]) for b in sorted(self.tags)),
            tuple((b, self.slots[b]) for b in sorted(self.slots)),
        )


def sanitize_tags(tags: list[str] | tuple[str, ...]) -> tuple[str, ...]:
    """Rewrite tag blocks so every mention starts with B (no O->I, no
    leading I); mention spans are unchanged."""
    out = list(tags)
    prev = "O"
    for k, t in enumerate(out):
        if t == "I" and prev == "O":
            out[k] = "B"
        prev = out[k]
    return tuple(out)


def state_from_tags(
    corpus: Corpus,
    tags: dict[str, list[str] | tuple[str, ...]],
    U: int,
    slots: dict[str, tuple[int, ...]] | None = None,
) -> JointState:
    mentions = {}
    out_tags = {}
    out_slots = {}
    for book in corpus.books:
        b = book.book_id
        clean = sanitize_tags(tags[b])
        ms = tuple(extract_mentions(book, list(clean)))
        out_tags[b] = clean
        mentions[b] = ms
        out_slots[b] = slots[b] if slots and b in slots else (0,) * len(ms)
        if len(out_slots[b]) != len(ms):
            raise JointConstraintError(f"book {b}: {len(out_slots[b])} slots for {len(ms)} mentions")
    return JointState(tags=out_tags, mentions=mentions, slots=out_slots, U=U)


def validate_state(st: JointState, corpus: Corpus, mode: str = "hard") -> None:
    """C1' unique labels (structural), C2' no O->I, C3' tags/slots agree,
    and C4' (alignment ordering) in hard mode."""
    for book in corpus.books:
        b = book.book_id
        tags = st.tags[b]
        if len(tags) != len(book.elements):
            raise JointConstraintError(f"book {b}: tag length mismatch")
        prev = "O"
        for t in tags:
            if prev == "O" and t == "I":
                raise JointConstraintError(f"book {b}: tag O followed by I")
            prev = t
        derived = tuple(extract_mentions(book, list(tags)))
        if tuple(m.span for m in derived) != tuple(m.span for m in st.mentions[b]):
            raise JointConstraintError(f"book {b}: mention boundaries disagree with tags")
        if len(st.slots[b]) != len(derived):
            raise JointConstraintError(f"book {b}: slot count disagrees with mentions")
    Z = st.alignment()
    if not align_mod.satisfies_c1(Z):
        raise JointConstraintError("duplicate slot within a book")
    if mode == "hard" and not align_mod.feasible(Z):
        raise JointConstraintError("ordering constraint violated in hard mode")


class JointContext:
    """Fixed per-run resources: lattices, dynamic pair features, models."""

    def __init__(
        self,
        corpus: Corpus,
        ident: IdentModel,
        alignm: AlignModel,
        lexicon: Lexicon,
        U: int,
        hooks: AnalyzerHooks | None = None,
        ablate: frozenset[str] = frozenset(),
    ):
        if ident.keywords is None:
            raise ValueError("identification model lacks a keyword table")
        self.corpus = corpus
        self.ident = ident
        self.align = alignm
        self.lexicon = lexicon
        self.U = U
        self.hooks = hooks
        self.ablate = ablate
        self.books = {b.book_id: b for b in corpus.books}
        self.feature_lattices = {
            b.book_id: FeatureLattice(b, ident.keywords, hooks, ablate) for b in corpus.books
        }
        self.lattices: dict[str, LatticeScores] = {
            bid: fl.scores(ident.theta) for bid, fl in self.feature_lattices.items()
        }
        self._views: dict[tuple[str, Span], MentionView] = {}
        self._pair_fv: dict[tuple[tuple[str, Span], tuple[str, Span]], FeatureVector] = {}
        self._pair_score: dict[tuple[tuple[str, Span], tuple[str, Span]], float] = {}

    def refresh_models(self, ident: IdentModel | None = None, alignm: AlignModel | None = None):
        if ident is not None:
            self.ident = ident
            self.lattices = {
                bid: fl.scores(ident.theta) for bid, fl in self.feature_lattices.items()
            }
        if alignm is not None:
            self.align = alignm
            self._pair_score.clear()

    def view(self, b: str, span: Span) -> MentionView:
        key = (b, span)
        if key not in self._views:
            mention = AxiomMention(book_id=b, start=span[0], end=span[1])
            self._views[key] = mention_view(self.books[b], mention, self.lexicon)
        return self._views[key]

    def pair_feature(self, a: tuple[str, Span], c: tuple[str, Span]) -> FeatureVector:
        if a > c:
            a, c = c, a
        key = (a, c)
        if key not in self._pair_fv:
            self._pair_fv[key] = align_features(
                self.view(*a), self.view(*c), self.hooks, self.ablate
            )
        return self._pair_fv[key]

    def pair_score(self, a: tuple[str, Span], c: tuple[str, Span]) -> float:
        if a > c:
            a, c = c, a
        key = (a, c)
        if key not in self._pair_score:
            self._pair_score[key] = self.pair_feature(a, c).dot(self.align.phi)
        return self._pair_score[key]

    # -- scoring ------------------------------------------------------------

    def ident_log_score(self, st: JointState) -> float:
        return sum(self.lattices[b].path_score(st.tags[b]) for b in st.tags)

    def align_log_score(self, st: JointState) -> float:
        members: dict[int, list[tuple[str, Span]]] = {}
        for b, ms in st.mentions.items():
            for i, m in enumerate(ms):
                k = st.slots[b][i]
                if k != 0:
                    members.setdefault(k, []).append((b, m.span))
        total = 0.0
        for group in members.values():
            for x in range(len(group)):
                for y in range(x + 1, len(group)):
                    if group[x][0] != group[y][0]:
                        total += self.pair_score(group[x], group[y])
        if self.align.mode == "soft":
            total -= self.align.nu * sum(
                align_mod.ordering_violations(row) for row in st.slots.values()
            )
        return total

    def joint_log_score(self, st: JointState) -> float:
        """log f_AI + log f_AA; raises on constraint violations."""
        validate_state(st, self.corpus, mode=self.align.mode)
        return self.ident_log_score(st) + self.align_log_score(st)


def joint_log_score(st: JointState, ctx: JointContext) -> float:
    return ctx.joint_log_score(st)


# ---------------------------------------------------------------------------
# block moves


def _mention_spans(tags: tuple[str, ...]) -> list[Span]:
    spans = []
    start = None
    for k, t in enumerate(tags):
        if t == "B":
            if start is not None:
                spans.append((start, k - 1))
            start = k
        elif t == "I":
            if start is None:
                start = k
        else:
            if start is not None:
                spans.append((start, k - 1))
                start = None
    if start is not None:
        spans.append((start, len(tags) - 1))
    return spans


def _o_runs(tags: tuple[str, ...]) -> list[Span]:
    runs = []
    start = None
    for k, t in enumerate(tags):
        if t == "O":
            if start is None:
                start = k
        else:
            if start is not None:
                runs.append((start, k - 1))
                start = None
    if start is not None:
        runs.append((start, len(tags) - 1))
    return runs


def _applicable_kinds(tags: tuple[str, ...]) -> list[str]:
    kinds = []
    spans = _mention_spans(tags)
    if spans:
        kinds.extend(("update", "delete"))
    if _o_runs(tags):
        kinds.append("introduce")
    return kinds


def _tags_with(tags: tuple[str, ...], clear: Span | None, put: Span | None) -> tuple[str, ...]:
    out = list(tags)
    if clear is not None:
        for k in range(clear[0], clear[1] + 1):
            out[k] = "O"
    if put is not None:
        out[put[0]] = "B"
        for k in range(put[0] + 1, put[1] + 1):
            out[k] = "I"
    return tuple(out)


def _window_score(lat: LatticeScores, tags: tuple[str, ...], window: range) -> float:
    total = 0.0
    for k in window:
        j = TAG_INDEX[tags[k]]
        if k == 0:
            total += float(lat.start[j])
        else:
            total += float(lat.trans[k - 1, TAG_INDEX[tags[k - 1]], j])
    return total


def _placement_logprobs(
    lat: LatticeScores,
    base_tags: tuple[str, ...],
    clear: Span | None,
    candidates: list[Span],
    window: range,
) -> dict[Span, float]:
    scores = np.array(
        [_window_score(lat, _tags_with(base_tags, clear, c), window) for c in candidates]
    )
    logz = float(scores.max() + np.log(np.exp(scores - scores.max()).sum()))
    return {c: float(s - logz) for c, s in zip(candidates, scores)}


def _update_candidates(tags: tuple[str, ...], spans: list[Span], j: int, width: int = 2) -> list[Span]:
    n = len(tags)
    s, e = spans[j]
    others = [sp for i, sp in enumerate(spans) if i != j]
    out = []
    for s2 in range(max(0, s - width), min(n - 1, s + width) + 1):
        for e2 in range(max(0, e - width), min(n - 1, e + width) + 1):
            if s2 > e2:
                continue
            if any(not (e2 < o[0] or o[1] < s2) for o in others):
                continue
            out.append((s2, e2))
    return out


def _intro_candidates(run: Span) -> list[Span]:
    a, b = run
    return [(s, e) for s in range(a, b + 1) for e in range(s, b + 1)]


def _move_window(n: int, lo_tag: int, hi_tag: int) -> range:
    """Lattice positions whose entries can change when tags inside
    [lo_tag, hi_tag] change: the entry at position k reads tags k-1 and k."""
    return range(max(0, lo_tag), min(n - 1, hi_tag + 1) + 1)


@dataclass(frozen=True)
class BlockMove:
    kind: str
    book: str
    target_span: Span
    new_span: Span | None  # None for delete

    def __post_init__(self) -> None:
        if self.kind not in MOVE_KINDS:
            raise ValueError(f"unknown move kind {self.kind!r}")


@dataclass(frozen=True)
class BlockMoveProposal:
    """A proposed joint state plus the complete acceptance correction.

    ``log_ratio`` bundles the identification-score change with the
    proposal asymmetry of the move itself and of the slot reconciliation
    draws, so acceptance is min(1, exp(align-score change + log_ratio)).
    A ``None`` log_ratio marks an irreversible reconciliation (reject).
    """

    move: BlockMove
    tags: tuple[str, ...]
    state: JointState
    log_ratio: float | None


class _JointSampler:
    """Mutable chain state over all books."""

    def __init__(self, ctx: JointContext, st: JointState,
                 clamp_books: set[str] | None = None):
        self.ctx = ctx
        self.U = st.U
        self.clamp = clamp_books or set()
        self.tags: dict[str, list[str]] = {b: list(t) for b, t in st.tags.items()}
        self.spans: dict[str, list[Span]] = {
            b: [m.span for m in ms] for b, ms in st.mentions.items()
        }
        self.slots: dict[str, list[int]] = {b: list(s) for b, s in st.slots.items()}

    def state(self) -> JointState:
        mentions = {
            b: tuple(
                extract_mentions(self.ctx.books[b], self.tags[b])
            )
            for b in self.tags
        }
        return JointState(
            tags={b: tuple(t) for b, t in self.tags.items()},
            mentions=mentions,
            slots={b: tuple(s) for b, s in self.slots.items()},
            U=self.U,
        )

    # -- alignment bookkeeping over span-identified mentions ---------------

    def members_of(self, k: int, skip: tuple[str, int] | None = None):
        for b in self.spans:
            for i, slot in enumerate(self.slots[b]):
                if slot == k and (skip is None or (b, i) != skip):
                    yield (b, self.spans[b][i])

    def pair_term(self, book: str, span: Span, k: int, skip_index: int | None = None) -> float:
        if k == 0:
            return 0.0
        total = 0.0
        for b2 in self.spans:
            if b2 == book:
                continue
            for i2, slot in enumerate(self.slots[b2]):
                if slot == k:
                    total += self.ctx.pair_score((book, span), (b2, self.spans[b2][i2]))
        return total

    def slot_candidates(self, book: str, i: int, row: list[int]) -> list[int]:
        if self.ctx.align.mode == "hard":
            lo = max((k for j, k in enumerate(row) if j < i and k != 0), default=0)
            hi = min((k for j, k in enumerate(row) if j > i and k != 0), default=self.U + 1)
            return [0] + [k for k in range(lo + 1, hi) if k <= self.U]
        used = {k for j, k in enumerate(row) if j != i and k != 0}
        return [0] + [k for k in range(1, self.U + 1) if k not in used]

    def slot_conditional(
        self, book: str, i: int, spans: list[Span], row: list[int]
    ) -> tuple[list[int], np.ndarray]:
        """Conditional for mention i in a candidate configuration of
        ``book`` (spans/row), other books as currently assigned."""
        saved = row[i]
        row[i] = 0
        cands = self.slot_candidates(book, i, row)
        logits = np.empty(len(cands))
        for idx, k in enumerate(cands):
            t = self.pair_term(book, spans[i], k)
            if self.ctx.align.mode == "soft" and k != 0:
                before = sum(1 for j in range(i) if row[j] != 0 and row[j] >= k)
                after = sum(1 for j in range(i + 1, len(row)) if row[j] != 0 and row[j] <= k)
                t -= self.ctx.align.nu * (before + after)
            logits[idx] = t
        row[i] = saved
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        return cands, probs

    def gibbs_sweep(self, rng: np.random.Generator) -> None:
        for b in sorted(self.spans):
            if b in self.clamp:
                continue
            # the book's own row is mutated in place between mentions
            row = self.slots[b]
            spans = self.spans[b]
            for i in range(len(row)):
                row[i] = 0
                cands, probs = self.slot_conditional(b, i, spans, row)
                row[i] = cands[int(rng.choice(len(cands), p=probs))]

    # -- scoring ------------------------------------------------------------

    def align_log_score(self) -> float:
        members: dict[int, list[tuple[str, Span]]] = {}
        for b in self.spans:
            for i, k in enumerate(self.slots[b]):
                if k != 0:
                    members.setdefault(k, []).append((b, self.spans[b][i]))
        total = 0.0
        for group in members.values():
            for x in range(len(group)):
                for y in range(x + 1, len(group)):
                    if group[x][0] != group[y][0]:
                        total += self.ctx.pair_score(group[x], group[y])
        if self.ctx.align.mode == "soft":
            total -= self.ctx.align.nu * sum(
                align_mod.ordering_violations(row) for row in self.slots.values()
            )
        return total

    def ident_log_score(self) -> float:
        return sum(
            self.ctx.lattices[b].path_score(self.tags[b]) for b in self.tags
        )

    def joint_log_score(self) -> float:
        return self.ident_log_score() + self.align_log_score()

    # -- move proposal -------------------------------------------------------

    def propose(self, book: str, rng: np.random.Generator) -> BlockMoveProposal | None:
        """Draw one block move for ``book``; returns None when no move
        could change anything (empty book edge case)."""
        tags = tuple(self.tags[book])
        lat = self.ctx.lattices[book]
        n = len(tags)
        spans = self.spans[book]
        slots = self.slots[book]
        kinds = _applicable_kinds(tags)
        if not kinds:
            return None
        kind = kinds[int(rng.integers(len(kinds)))]
        log_q_fwd = -math.log(len(kinds))
        log_q_bwd = 0.0

        if kind == "delete":
            j = int(rng.integers(len(spans)))
            target = spans[j]
            new_tags = _tags_with(tags, target, None)
            log_q_fwd += -math.log(len(spans))
            # reconciliation: drop the slot (deterministic)
            new_spans = [sp for i, sp in enumerate(spans) if i != j]
            new_slots = [sl for i, sl in enumerate(slots) if i != j]
            # reverse: introduce the span back, drawing its old slot
            kinds_bar = _applicable_kinds(new_tags)
            log_q_bwd += -math.log(len(kinds_bar))
            runs_bar = _o_runs(new_tags)
            run = next(r for r in runs_bar if r[0] <= target[0] and target[1] <= r[1])
            log_q_bwd += -math.log(len(runs_bar))
            lp = _placement_logprobs(
                lat, new_tags, None, _intro_candidates(run),
                _move_window(n, run[0], run[1]),
            )
            log_q_bwd += lp[target]
            rec_bwd = self._reinsert_logprob(book, target, j, new_spans, new_slots, slots[j])
            move = BlockMove(kind="delete", book=book, target_span=target, new_span=None)
            return self._finish(move, book, new_tags, new_spans, new_slots,
                                log_q_fwd, log_q_bwd + rec_bwd)

        if kind == "introduce":
            runs = _o_runs(tags)
            r = runs[int(rng.integers(len(runs)))]
            log_q_fwd += -math.log(len(runs))
            cands = _intro_candidates(r)
            lp = _placement_logprobs(lat, tags, None, cands, _move_window(n, r[0], r[1]))
            new_span = self._sample_from(lp, rng)
            log_q_fwd += lp[new_span]
            new_tags = _tags_with(tags, None, new_span)
            # insert mention in span order, slot drawn by one Gibbs draw
            pos = sum(1 for sp in spans if sp[0] < new_span[0])
            new_spans = spans[:pos] + [new_span] + spans[pos:]
            new_slots = slots[:pos] + [0] + slots[pos:]
            cands_k, probs_k = self.slot_conditional(book, pos, new_spans, new_slots)
            drawn = cands_k[int(rng.choice(len(cands_k), p=probs_k))]
            new_slots[pos] = drawn
            rec_fwd = math.log(probs_k[cands_k.index(drawn)])
            # reverse: delete that mention
            kinds_bar = _applicable_kinds(new_tags)
            log_q_bwd += -math.log(len(kinds_bar)) - math.log(len(new_spans))
            move = BlockMove(kind="introduce", book=book, target_span=r, new_span=new_span)
            return self._finish(move, book, new_tags, new_spans, new_slots,
                                log_q_fwd + rec_fwd, log_q_bwd)

        # update
        j = int(rng.integers(len(spans)))
        old = spans[j]
        cands = _update_candidates(tags, spans, j)
        window = _move_window(n, old[0] - 2, old[1] + 2)
        lp = _placement_logprobs(lat, tags, old, cands, window)
        new_span = self._sample_from(lp, rng)
        log_q_fwd += -math.log(len(spans)) + lp[new_span]
        new_tags = _tags_with(tags, old, new_span)
        # carry the slot with the moved mention; re-sort by span
        order = sorted(range(len(spans)), key=lambda i: (spans[i] if i != j else new_span))
        new_spans = [(spans[i] if i != j else new_span) for i in order]
        new_slots = [slots[i] for i in order]
        pos = order.index(j)
        kept_slot = slots[j]
        rec_fwd = 0.0
        rec_bwd_extra = 0.0
        if not self._slot_ok(new_slots, pos, kept_slot):
            cands_k, probs_k = self.slot_conditional(book, pos, new_spans, new_slots)
            drawn = cands_k[int(rng.choice(len(cands_k), p=probs_k))]
            new_slots[pos] = drawn
            rec_fwd = math.log(probs_k[cands_k.index(drawn)])
        else:
            new_slots[pos] = kept_slot
            drawn = kept_slot
        # reverse reconciliation: moving back, would the reverse keep or redraw?
        back_slots = list(slots)
        if self._slot_ok(slots, j, drawn):
            # reverse keeps `drawn`; original state recovered only if equal
            if drawn != kept_slot:
                return BlockMoveProposal(
                    move=BlockMove("update", book, old, new_span),
                    tags=new_tags,
                    state=self.state(),
                    log_ratio=None,
                )
        else:
            back_slots[j] = kept_slot
            cands_r, probs_r = self.slot_conditional(book, j, spans, back_slots)
            rec_bwd_extra = math.log(probs_r[cands_r.index(kept_slot)])
        # reverse move probabilities
        kinds_bar = _applicable_kinds(new_tags)
        cands_bar = _update_candidates(new_tags, new_spans, pos)
        window_bar = _move_window(n, new_span[0] - 2, new_span[1] + 2)
        lp_bar = _placement_logprobs(lat, new_tags, new_span, cands_bar, window_bar)
        log_q_bwd += -math.log(len(kinds_bar)) - math.log(len(new_spans)) + lp_bar[old]
        move = BlockMove(kind="update", book=book, target_span=old, new_span=new_span)
        return self._finish(move, book, new_tags, new_spans, new_slots,
                            log_q_fwd + rec_fwd, log_q_bwd + rec_bwd_extra)

    def _slot_ok(self, row: list[int], i: int, k: int) -> bool:
        if k == 0:
            return True
        if any(row[j] == k for j in range(len(row)) if j != i):
            return False
        if self.ctx.align.mode == "soft":
            return True
        before = [row[j] for j in range(i) if row[j] != 0]
        after = [row[j] for j in range(i + 1, len(row)) if row[j] != 0]
        return (not before or max(before) < k) and (not after or min(after) > k)

    def _reinsert_logprob(
        self, book: str, span: Span, pos: int,
        remaining_spans: list[Span], remaining_slots: list[int], slot: int,
    ) -> float:
        spans2 = remaining_spans[:pos] + [span] + remaining_spans[pos:]
        slots2 = remaining_slots[:pos] + [0] + remaining_slots[pos:]
        cands, probs = self.slot_conditional(book, pos, spans2, slots2)
        return math.log(probs[cands.index(slot)])

    @staticmethod
    def _sample_from(lp: dict[Span, float], rng: np.random.Generator) -> Span:
        cands = list(lp)
        probs = np.exp(np.array([lp[c] for c in cands]))
        probs /= probs.sum()
        return cands[int(rng.choice(len(cands), p=probs))]

    def _finish(self, move, book, new_tags, new_spans, new_slots, log_q_fwd, log_q_bwd):
        prev = (self.tags[book], self.spans[book], self.slots[book])
        self.tags[book] = list(new_tags)
        self.spans[book] = list(new_spans)
        self.slots[book] = list(new_slots)
        cand_state = self.state()
        self.tags[book], self.spans[book], self.slots[book] = (
            list(prev[0]),
            list(prev[1]),
            list(prev[2]),
        )
        delta_ai = (
            self.ctx.lattices[book].path_score(new_tags)
            - self.ctx.lattices[book].path_score(tuple(self.tags[book]))
        )
        return BlockMoveProposal(
            move=move,
            tags=new_tags,
            state=cand_state,
            log_ratio=delta_ai + log_q_bwd - log_q_fwd,
        )

    def apply(self, book: str, st: JointState) -> None:
        self.tags[book] = list(st.tags[book])
        self.spans[book] = [m.span for m in st.mentions[book]]
        self.slots[book] = list(st.slots[book])

    def mh_step(self, rng: np.random.Generator, exact_ratio: bool = True) -> bool:
        """One MH block move on a uniformly chosen unclamped book, followed
        by a Gibbs sweep over the alignment variables."""
        books = [b for b in sorted(self.tags) if b not in self.clamp]
        if not books:
            self.gibbs_sweep(rng)
            return False
        book = books[int(rng.integers(len(books)))]
        proposal = self.propose(book, rng)
        accepted = False
        if proposal is not None and proposal.log_ratio is not None:
            cur_aa = self.align_log_score()
            prev = (self.tags[book], self.spans[book], self.slots[book])
            self.apply(book, proposal.state)
            new_aa = self.align_log_score()
            if exact_ratio:
                log_a = (new_aa - cur_aa) + proposal.log_ratio
            else:
                log_a = new_aa - cur_aa
            if math.log(rng.random()) < min(0.0, log_a):
                accepted = True
            else:
                self.tags[book], self.spans[book], self.slots[book] = (
                    list(prev[0]),
                    list(prev[1]),
                    list(prev[2]),
                )
        self.gibbs_sweep(rng)
        return accepted


def propose_block_move(
    st: JointState,
    book: str,
    ctx: JointContext,
    rng: np.random.Generator,
) -> BlockMoveProposal | None:
    """Propose one block move from ``st`` for ``book``.

    The returned log_ratio is the full acceptance correction (see
    BlockMoveProposal); alignment-score change is left to the caller.
    """
    sampler = _JointSampler(ctx, st)
    return sampler.propose(book, rng)


def mh_step(
    st: JointState,
    ctx: JointContext,
    rng: np.random.Generator,
    exact_ratio: bool = True,
    clamp_books: set[str] | None = None,
) -> JointState:
    sampler = _JointSampler(ctx, st, clamp_books=clamp_books)
    sampler.mh_step(rng, exact_ratio=exact_ratio)
    return sampler.state()


# ---------------------------------------------------------------------------
# decoding and training


def initial_state(
    ctx: JointContext,
    clamp: dict[str, tuple[tuple[str, ...], tuple[int, ...]]] | None = None,
) -> JointState:
    """Viterbi tags (sanitized) plus a greedy slot assignment."""
    tags: dict[str, tuple[str, ...]] = {}
    for b, lat in ctx.lattices.items():
        tags[b] = sanitize_tags(viterbi(lat))
    slots: dict[str, tuple[int, ...]] = {}
    if clamp:
        for b, (t, s) in clamp.items():
            tags[b] = sanitize_tags(t)
            slots[b] = s
    st = state_from_tags(ctx.corpus, tags, ctx.U, slots=slots or None)
    sampler = _JointSampler(ctx, st, clamp_books=set(clamp or ()))
    # greedy slots, book by book, best positive pair term else compact
    first_free = next((b for b in sorted(sampler.spans) if b not in sampler.clamp), None)
    for b in sorted(sampler.spans):
        if b in sampler.clamp:
            continue
        row = sampler.slots[b]
        for i in range(len(row)):
            row[i] = 0
            cands, probs = sampler.slot_conditional(b, i, sampler.spans[b], row)
            nonzero = [(sampler.pair_term(b, sampler.spans[b][i], k), -k)
                       for k in cands if k != 0]
            if nonzero and max(nonzero)[0] > 0:
                best = max(range(len(nonzero)), key=lambda ix: nonzero[ix])
                row[i] = [k for k in cands if k != 0][best]
            elif b == first_free:
                free = [k for k in cands if k != 0]
                if free:
                    row[i] = free[0]
    return sampler.state()


@dataclass
class JointRunStats:
    steps: int = 0
    accepted: int = 0


def joint_decode(
    ctx: JointContext,
    cfg: SamplerConfig,
    init: JointState | None = None,
    steps: int | None = None,
    exact_ratio: bool = True,
    clamp: dict[str, tuple[tuple[str, ...], tuple[int, ...]]] | None = None,
) -> tuple[JointState, AlignmentClusters, JointRunStats]:
    """Run the chain and return the highest-joint-score state visited."""
    st = init if init is not None else initial_state(ctx, clamp=clamp)
    validate_state(st, ctx.corpus, mode=ctx.align.mode)
    sampler = _JointSampler(ctx, st, clamp_books=set(clamp or ()))
    rng = np.random.default_rng(cfg.seed)
    total = steps if steps is not None else cfg.burn_in + cfg.num_samples * cfg.thinning
    best = sampler.state()
    best_score = sampler.joint_log_score()
    stats = JointRunStats()
    for _ in range(total):
        if sampler.mh_step(rng, exact_ratio=exact_ratio):
            stats.accepted += 1
        stats.steps += 1
        score = sampler.joint_log_score()
        if score > best_score:
            best, best_score = sampler.state(), score
    clusters = clusters_from_state(best.alignment())
    return best, clusters, stats


def _ident_path_features(ctx: JointContext, b: str, tags: tuple[str, ...]) -> dict[str, float]:
    fl = ctx.feature_lattices[b]
    totals: dict[str, float] = {}
    idx = [TAG_INDEX[t] for t in tags]
    for name, v in fl.start_fv[idx[0]].items():
        totals[name] = totals.get(name, 0.0) + v
    for k in range(1, len(tags)):
        for name, v in fl.trans_fv[k - 1][idx[k - 1]][idx[k]].items():
            totals[name] = totals.get(name, 0.0) + v
    return totals


def _pair_feature_totals(ctx: JointContext, st: JointState) -> dict[str, float]:
    members: dict[int, list[tuple[str, Span]]] = {}
    for b, ms in st.mentions.items():
        for i, m in enumerate(ms):
            k = st.slots[b][i]
            if k != 0:
                members.setdefault(k, []).append((b, m.span))
    totals: dict[str, float] = {}
    for group in members.values():
        for x in range(len(group)):
            for y in range(x + 1, len(group)):
                if group[x][0] != group[y][0]:
                    for name, v in ctx.pair_feature(group[x], group[y]).items():
                        totals[name] = totals.get(name, 0.0) + v
    return totals


def _expectations(
    ctx: JointContext,
    cfg: SamplerConfig,
    clamp: dict[str, tuple[tuple[str, ...], tuple[int, ...]]] | None,
    exact_ratio: bool,
) -> tuple[dict[str, float], dict[str, float]]:
    """MH-averaged identification and pair feature expectations."""
    st = initial_state(ctx, clamp=clamp)
    sampler = _JointSampler(ctx, st, clamp_books=set(clamp or ()))
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.burn_in):
        sampler.mh_step(rng, exact_ratio=exact_ratio)
    ident_tot: dict[str, float] = {}
    pair_tot: dict[str, float] = {}
    for _ in range(cfg.num_samples):
        for _ in range(cfg.thinning):
            sampler.mh_step(rng, exact_ratio=exact_ratio)
        state = sampler.state()
        for b in state.tags:
            for name, v in _ident_path_features(ctx, b, state.tags[b]).items():
                ident_tot[name] = ident_tot.get(name, 0.0) + v
        for name, v in _pair_feature_totals(ctx, state).items():
            pair_tot[name] = pair_tot.get(name, 0.0) + v
    n = cfg.num_samples
    return (
        {k: v / n for k, v in ident_tot.items()},
        {k: v / n for k, v in pair_tot.items()},
    )


def joint_train(
    ctx: JointContext,
    gold: dict[str, tuple[tuple[str, ...], tuple[int, ...]]],
    cfg: SamplerConfig,
    learning_rate: float = 0.2,
    max_iter: int = 20,
    tol: float = 1e-4,
    exact_ratio: bool = True,
) -> tuple[IdentModel, AlignModel]:
    """Refine both models with clamped-minus-free MH expectations.

    ``gold`` maps training book ids to their (tags, slots). Books outside
    ``gold`` are treated as unlabeled and sampled in both phases.
    """
    if not gold:
        raise ValueError("joint training requires gold tags and slots")
    ident = replace(ctx.ident, theta=dict(ctx.ident.theta))
    alignm = replace(ctx.align, phi=dict(ctx.align.phi))
    for it in range(max_iter):
        ctx.refresh_models(ident=ident, alignm=alignm)
        ident_c, pair_c = _expectations(ctx, cfg, clamp=gold, exact_ratio=exact_ratio)
        ident_f, pair_f = _expectations(ctx, cfg, clamp=None, exact_ratio=exact_ratio)
        gnorm = 0.0
        for name in set(ident_c) | set(ident_f) | set(ident.theta):
            g = ident_c.get(name, 0.0) - ident_f.get(name, 0.0)
            g -= 2 * ident.lam * ident.theta.get(name, 0.0)
            if g:
                ident.theta[name] = ident.theta.get(name, 0.0) + learning_rate * g
                gnorm = max(gnorm, abs(g))
        for name in set(pair_c) | set(pair_f) | set(alignm.phi):
            g = pair_c.get(name, 0.0) - pair_f.get(name, 0.0)
            g -= 2 * alignm.mu * alignm.phi.get(name, 0.0)
            if g:
                alignm.phi[name] = alignm.phi.get(name, 0.0) + learning_rate * g
                gnorm = max(gnorm, abs(g))
        if any(not math.isfinite(w) for w in ident.theta.values()) or any(
            not math.isfinite(w) for w in alignm.phi.values()
        ):
            raise RuntimeError("joint training diverged")
        if gnorm < tol:
            logger.info("joint training converged after %d iterations", it + 1)
            break
    ctx.refresh_models(ident=ident, alignm=alignm)
    return ident, alignm


def save_tags(tags: dict[str, tuple[str, ...]], path) -> None:
    lines = []
    for b in sorted(tags):
        for k, t in enumerate(tags[b]):
            lines.append(f"{b}\t{k}\t{t}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
