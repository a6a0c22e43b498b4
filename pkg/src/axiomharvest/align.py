"""Cross-book axiom alignment under ordering constraints.

Every mention gets a slot in a global axiom ordering 1..U (slot 0 means
unaligned). A log-linear model scores co-assigned cross-book mention pairs.
Constraints: a slot is used at most once per book (C1), each mention has
exactly one slot (C2, structural), and within a book the nonzero slots of
successive mentions must increase (C3). In hard mode the Gibbs sampler
moves only inside this feasible space; in soft mode ordering violations
are allowed but cost ``nu`` per violating pair in log space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import AnalyzerHooks, FeatureVector, MentionView, align_features
from .metrics import alignment_pair_prf

logger = logging.getLogger(__name__)

MentionKey = tuple[str, int]  # (book_id, mention index within the book)
Mentions = dict[str, list[MentionView]]


@dataclass(frozen=True)
class AlignmentState:
    """Slot assignment per book; index i of a book's list is mention i."""

    slots: dict[str, tuple[int, ...]]
    U: int

    def slot(self, book: str, i: int) -> int:
        return self.slots[book][i]

    def with_slot(self, book: str, i: int, k: int) -> "AlignmentState":
        row = list(self.slots[book])
        row[i] = k
        new = dict(self.slots)
        new[book] = tuple(row)
        return AlignmentState(slots=new, U=self.U)

    def mention_keys(self) -> list[MentionKey]:
        return [(b, i) for b in sorted(self.slots) for i in range(len(self.slots[b]))]

    def as_key(self) -> tuple:
        return tuple((b, self.slots[b]) for b in sorted(self.slots))


@dataclass
class AlignModel:
    phi: dict[str, float] = field(default_factory=dict)
    mu: float = 0.0
    nu: float = 0.0
    mode: str = "hard"

    def __post_init__(self) -> None:
        if self.mu < 0 or self.nu < 0:
            raise ValueError("mu and nu must be nonnegative")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class SamplerConfig:
    burn_in: int = 100
    num_samples: int = 200
    thinning: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.burn_in < 0 or self.num_samples < 1 or self.thinning < 1:
            raise ValueError("bad sampler schedule")


class PairCache:
    """State-independent pairwise features and, per phi, pair scores."""

    def __init__(self, mentions: Mentions, hooks: AnalyzerHooks | None = None,
                 ablate: frozenset[str] = frozenset()):
        self.mentions = mentions
        self.features: dict[tuple[MentionKey, MentionKey], FeatureVector] = {}
        books = sorted(mentions)
        for bi, b1 in enumerate(books):
            for b2 in books[bi + 1 :]:
                for i, m1 in enumerate(mentions[b1]):
                    for j, m2 in enumerate(mentions[b2]):
                        self.features[((b1, i), (b2, j))] = align_features(m1, m2, hooks, ablate)

    def pair_feature(self, a: MentionKey, b: MentionKey) -> FeatureVector:
        if a > b:
            a, b = b, a
        return self.features[(a, b)]

    def scored(self, phi: dict[str, float]) -> dict[tuple[MentionKey, MentionKey], float]:
        return {pair: fv.dot(phi) for pair, fv in self.features.items()}


def pair_score(scores, a: MentionKey, b: MentionKey) -> float:
    if a > b:
        a, b = b, a
    return scores[(a, b)]


# ---------------------------------------------------------------------------
# feasibility and scoring


def _book_feasible(row: tuple[int, ...] | list[int], U: int, ordered: bool = True) -> bool:
    if any(not 0 <= k <= U for k in row):
        return False
    nonzero = [k for k in row if k != 0]
    if len(set(nonzero)) != len(nonzero):
        return False  # C1
    if ordered and any(a >= b for a, b in zip(nonzero, nonzero[1:])):
        return False  # C3
    return True


def feasible(Z: AlignmentState) -> bool:
    """C1 (no slot reused in a book), C2 (structural), C3 (ordering)."""
    return all(_book_feasible(row, Z.U, ordered=True) for row in Z.slots.values())


def satisfies_c1(Z: AlignmentState) -> bool:
    return all(_book_feasible(row, Z.U, ordered=False) for row in Z.slots.values())


def ordering_violations(row) -> int:
    nonzero = [(i, k) for i, k in enumerate(row) if k != 0]
    return sum(
        1
        for a in range(len(nonzero))
        for b in range(a + 1, len(nonzero))
        if nonzero[a][1] >= nonzero[b][1]
    )


def alignment_log_score(
    Z: AlignmentState,
    mentions: Mentions,
    model: AlignModel,
    scores: dict[tuple[MentionKey, MentionKey], float],
) -> float:
    """Sum of pair scores over co-assigned cross-book pairs, minus the
    soft ordering penalty when the model runs in soft mode."""
    if model.mode == "hard" and not feasible(Z):
        raise ValueError("infeasible alignment state in hard mode")
    members: dict[int, list[MentionKey]] = {}
    for b, row in Z.slots.items():
        for i, k in enumerate(row):
            if k != 0:
                members.setdefault(k, []).append((b, i))
    total = 0.0
    for group in members.values():
        for x in range(len(group)):
            for y in range(x + 1, len(group)):
                if group[x][0] != group[y][0]:
                    total += pair_score(scores, group[x], group[y])
    if model.mode == "soft":
        total -= model.nu * sum(ordering_violations(row) for row in Z.slots.values())
    return total


# ---------------------------------------------------------------------------
# Gibbs sampling


class _Sampler:
    """Mutable alignment state with incremental slot bookkeeping."""

    def __init__(self, Z: AlignmentState, model: AlignModel,
                 scores: dict, clamp: dict[str, tuple[int, ...]] | None = None):
        self.U = Z.U
        self.model = model
        self.scores = scores
        self.slots: dict[str, list[int]] = {b: list(r) for b, r in Z.slots.items()}
        self.clamp = clamp or {}
        for b, row in self.clamp.items():
            if b in self.slots:
                self.slots[b] = list(row)
        self.members: dict[int, set[MentionKey]] = {}
        for b, row in self.slots.items():
            for i, k in enumerate(row):
                if k != 0:
                    self.members.setdefault(k, set()).add((b, i))
        self.free = [
            (b, i)
            for b in sorted(self.slots)
            if b not in self.clamp
            for i in range(len(self.slots[b]))
        ]

    def state(self) -> AlignmentState:
        return AlignmentState(slots={b: tuple(r) for b, r in self.slots.items()}, U=self.U)

    def pair_term(self, b: str, i: int, k: int) -> float:
        if k == 0:
            return 0.0
        total = 0.0
        for other in self.members.get(k, ()):
            if other[0] != b:
                total += pair_score(self.scores, (b, i), other)
        return total

    def candidates(self, b: str, i: int) -> list[int]:
        row = self.slots[b]
        if self.model.mode == "hard":
            lo = max((k for j, k in enumerate(row) if j < i and k != 0), default=0)
            hi = min((k for j, k in enumerate(row) if j > i and k != 0), default=self.U + 1)
            return [0] + [k for k in range(lo + 1, hi) if k <= self.U]
        used = {k for j, k in enumerate(row) if j != i and k != 0}
        return [0] + [k for k in range(1, self.U + 1) if k not in used]

    def violations_at(self, b: str, i: int, k: int) -> int:
        if k == 0:
            return 0
        row = self.slots[b]
        before = sum(1 for j in range(i) if row[j] != 0 and row[j] >= k)
        after = sum(1 for j in range(i + 1, len(row)) if row[j] != 0 and row[j] <= k)
        return before + after

    def set_slot(self, b: str, i: int, k: int) -> None:
        old = self.slots[b][i]
        if old == k:
            return
        if old != 0:
            self.members[old].discard((b, i))
            if not self.members[old]:
                del self.members[old]
        self.slots[b][i] = k
        if k != 0:
            self.members.setdefault(k, set()).add((b, i))

    def conditional(self, b: str, i: int) -> tuple[list[int], np.ndarray]:
        cands = self.candidates(b, i)
        logits = np.empty(len(cands))
        for idx, k in enumerate(cands):
            t = self.pair_term(b, i, k)
            if self.model.mode == "soft":
                t -= self.model.nu * self.violations_at(b, i, k)
            logits[idx] = t
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        return cands, probs

    def resample(self, b: str, i: int, rng: np.random.Generator) -> int:
        # Condition on everything else: the mention holds no slot while
        # its own conditional is computed.
        self.set_slot(b, i, 0)
        cands, probs = self.conditional(b, i)
        k = cands[int(rng.choice(len(cands), p=probs))]
        self.set_slot(b, i, k)
        return k

    def sweep(self, rng: np.random.Generator) -> None:
        for b, i in self.free:
            self.resample(b, i, rng)

    def feature_totals(self, cache: PairCache) -> dict[str, float]:
        totals: dict[str, float] = {}
        for group in self.members.values():
            ordered = sorted(group)
            for x in range(len(ordered)):
                for y in range(x + 1, len(ordered)):
                    if ordered[x][0] != ordered[y][0]:
                        for name, v in cache.pair_feature(ordered[x], ordered[y]).items():
                            totals[name] = totals.get(name, 0.0) + v
        return totals


def gibbs_step(
    Z: AlignmentState,
    book: str,
    i: int,
    model: AlignModel,
    scores: dict,
    rng: np.random.Generator,
) -> AlignmentState:
    """Resample one mention's slot from its full conditional."""
    if model.mode == "hard" and not feasible(Z):
        raise ValueError("hard-mode Gibbs requires a feasible starting state")
    sampler = _Sampler(Z, model, scores)
    sampler.resample(book, i, rng)
    return sampler.state()


def empty_state(mentions: Mentions, U: int) -> AlignmentState:
    return AlignmentState(slots={b: (0,) * len(ms) for b, ms in mentions.items()}, U=U)


def default_slot_bound(mentions: Mentions) -> int:
    """Default U: twice the largest per-book mention count."""
    return 2 * max((len(ms) for ms in mentions.values()), default=1)


def greedy_init(
    mentions: Mentions,
    model: AlignModel,
    scores: dict,
    U: int,
    clamp: dict[str, tuple[int, ...]] | None = None,
) -> AlignmentState:
    """Process books in order; give each mention the best-scoring feasible
    slot under the partial state, falling back to compact slots for the
    first unclamped book and to 0 otherwise."""
    state = empty_state(mentions, U)
    sampler = _Sampler(state, model, scores, clamp=clamp)
    first_free_book = None
    for b in sorted(mentions):
        if not clamp or b not in clamp:
            first_free_book = b
            break
    for b in sorted(mentions):
        if clamp and b in clamp:
            continue
        for i in range(len(mentions[b])):
            cands = [k for k in sampler.candidates(b, i) if k != 0]
            if not cands:
                continue
            scored = [(sampler.pair_term(b, i, k), -k) for k in cands]
            best_idx = max(range(len(cands)), key=lambda ix: scored[ix])
            if scored[best_idx][0] > 0:
                sampler.set_slot(b, i, cands[best_idx])
            elif b == first_free_book:
                sampler.set_slot(b, i, cands[0])
    return sampler.state()


def expected_pair_features(
    mentions: Mentions,
    model: AlignModel,
    cache: PairCache,
    cfg: SamplerConfig,
    clamp: dict[str, tuple[int, ...]] | None = None,
    U: int | None = None,
    init: AlignmentState | None = None,
) -> dict[str, float]:
    """Monte-Carlo expectation of co-assignment features under the model.

    Books in ``clamp`` keep their given slots; all other mentions are swept
    by the Gibbs sampler. With everything clamped the expectation is the
    exact feature count of the clamped state.
    """
    U = U if U is not None else default_slot_bound(mentions)
    scores = cache.scored(model.phi)
    state = init if init is not None else empty_state(mentions, U)
    sampler = _Sampler(state, model, scores, clamp=clamp)
    if not sampler.free:
        return sampler.feature_totals(cache)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.burn_in):
        sampler.sweep(rng)
    totals: dict[str, float] = {}
    for _ in range(cfg.num_samples):
        for _ in range(cfg.thinning):
            sampler.sweep(rng)
        for name, v in sampler.feature_totals(cache).items():
            totals[name] = totals.get(name, 0.0) + v
    return {name: v / cfg.num_samples for name, v in totals.items()}


def decode_alignment(
    mentions: Mentions,
    model: AlignModel,
    cache: PairCache,
    cfg: SamplerConfig,
    clamp: dict[str, tuple[int, ...]] | None = None,
    U: int | None = None,
) -> AlignmentState:
    """Best-scoring state visited by the sampler, starting from greedy init."""
    U = U if U is not None else default_slot_bound(mentions)
    scores = cache.scored(model.phi)
    init = greedy_init(mentions, model, scores, U, clamp=clamp)
    sampler = _Sampler(init, model, scores, clamp=clamp)
    best = sampler.state()
    best_score = alignment_log_score(best, mentions, model, scores)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.burn_in + cfg.num_samples * cfg.thinning):
        sampler.sweep(rng)
        state = sampler.state()
        score = alignment_log_score(state, mentions, model, scores)
        if score > best_score:
            best, best_score = state, score
    return best


# ---------------------------------------------------------------------------
# training


def train_alignment(
    mentions: Mentions,
    gold: dict[str, tuple[int, ...]],
    model_init: AlignModel,
    cfg: SamplerConfig,
    cache: PairCache | None = None,
    dev_gold: dict[str, tuple[int, ...]] | None = None,
    mu_grid: list[float] | None = None,
    nu_grid: list[float] | None = None,
    U: int | None = None,
    learning_rate: float = 0.5,
    max_iter: int = 100,
    tol: float = 1e-4,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> AlignModel:
    """Contrastive training: clamped minus free feature expectations.

    Gradient ascent with common random numbers (the sampler reuses the
    configured seed on every evaluation), stopping at the gradient-norm
    tolerance or the iteration cap. ``mu`` (and ``nu`` in soft mode) are
    grid-tuned on dev pairwise F1, then the final model is retrained with
    the dev books clamped too.
    """
    if len(mentions) < 2:
        raise ValueError("alignment training needs at least two books")
    if cache is None:
        cache = PairCache(mentions, hooks, ablate)
    U = U if U is not None else default_slot_bound(mentions)
    mu_grid = mu_grid or [model_init.mu]
    nu_grid = nu_grid if (nu_grid and model_init.mode == "soft") else [model_init.nu]

    def fit(mu: float, nu: float, clamp: dict[str, tuple[int, ...]]) -> AlignModel:
        model = replace(model_init, phi=dict(model_init.phi), mu=mu, nu=nu)
        for it in range(max_iter):
            clamped = expected_pair_features(mentions, model, cache, cfg, clamp=clamp, U=U)
            free = expected_pair_features(mentions, model, cache, cfg, clamp=None, U=U)
            grad: dict[str, float] = {}
            for name in set(clamped) | set(free) | set(model.phi):
                g = clamped.get(name, 0.0) - free.get(name, 0.0) - 2 * mu * model.phi.get(name, 0.0)
                if g:
                    grad[name] = g
            gnorm = max((abs(g) for g in grad.values()), default=0.0)
            for name, g in grad.items():
                model.phi[name] = model.phi.get(name, 0.0) + learning_rate * g
            if any(not math.isfinite(w) for w in model.phi.values()):
                raise RuntimeError(f"alignment training diverged at mu={mu}, nu={nu}")
            if gnorm < tol:
                logger.info("alignment training converged after %d iterations", it + 1)
                break
        return model

    best_model = None
    best_key = None
    for mu in mu_grid:
        for nu in nu_grid:
            model = fit(mu, nu, clamp=gold)
            if dev_gold:
                f1 = _dev_pair_f1(mentions, model, cache, cfg, gold, dev_gold, U)
                logger.info("mu=%s nu=%s dev pairwise F1=%.4f", mu, nu, f1)
            else:
                f1 = 0.0
            if best_key is None or f1 > best_key:
                best_key, best_model = f1, model
    assert best_model is not None
    if dev_gold:
        merged = dict(gold)
        merged.update(dev_gold)
        best_model = fit(best_model.mu, best_model.nu, clamp=merged)
    return best_model


def _dev_pair_f1(mentions, model, cache, cfg, gold, dev_gold, U) -> float:
    state = decode_alignment(mentions, model, cache, cfg, clamp=gold, U=U)
    dev_books = set(dev_gold)
    pred = clusters_from_state(state, restrict_books=dev_books)
    gold_state = AlignmentState(
        slots={b: tuple(r) for b, r in dev_gold.items()}, U=U
    )
    goldc = clusters_from_state(gold_state, restrict_books=dev_books)
    try:
        return alignment_pair_prf(pred.as_partition(), goldc.as_partition()).f1
    except ValueError:
        return 0.0


# ---------------------------------------------------------------------------
# clusters


@dataclass(frozen=True)
class AlignmentClusters:
    """Slot-ordered clusters plus unaligned singletons."""

    clusters: tuple[tuple[MentionKey, ...], ...]
    unaligned: tuple[MentionKey, ...]

    def as_partition(self) -> list[list[MentionKey]]:
        return [list(c) for c in self.clusters] + [[m] for m in self.unaligned]


def clusters_from_state(
    Z: AlignmentState, restrict_books: set[str] | None = None
) -> AlignmentClusters:
    groups: dict[int, list[MentionKey]] = {}
    unaligned: list[MentionKey] = []
    for b in sorted(Z.slots):
        if restrict_books is not None and b not in restrict_books:
            continue
        for i, k in enumerate(Z.slots[b]):
            if k == 0:
                unaligned.append((b, i))
            else:
                groups.setdefault(k, []).append((b, i))
    clusters = tuple(tuple(groups[k]) for k in sorted(groups))
    return AlignmentClusters(clusters=clusters, unaligned=tuple(unaligned))


# ---------------------------------------------------------------------------
# persistence

_MODEL_HEADER = "axiomharvest-align-model v1"


def save_align_model(model: AlignModel, U: int, path) -> None:
    lines = [
        _MODEL_HEADER,
        f"mu\t{model.mu!r}",
        f"nu\t{model.nu!r}",
        f"U\t{U}",
        f"mode\t{model.mode}",
    ]
    for name in sorted(model.phi):
        lines.append(f"w\t{name}\t{model.phi[name]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_align_model(path) -> tuple[AlignModel, int]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MODEL_HEADER:
        raise ValueError(f"{path}: not an alignment model file")
    mu = nu = 0.0
    U = 1
    mode = "hard"
    phi: dict[str, float] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, _, rest = line.partition("\t")
        if kind == "mu":
            mu = float(rest)
        elif kind == "nu":
            nu = float(rest)
        elif kind == "U":
            U = int(rest)
        elif kind == "mode":
            mode = rest
        elif kind == "w":
            name, _, value = rest.rpartition("\t")
            phi[name] = float(value)
        else:
            raise ValueError(f"{path}: unknown record {kind!r}")
    return AlignModel(phi=phi, mu=mu, nu=nu, mode=mode), U


def save_alignment(
    mentions: Mentions, Z: AlignmentState, path
) -> None:
    lines = []
    for b in sorted(mentions):
        for i, mv in enumerate(mentions[b]):
            m = mv.mention
            lines.append(f"{b}\t{m.start}\t{m.end}\t{Z.slots[b][i]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
