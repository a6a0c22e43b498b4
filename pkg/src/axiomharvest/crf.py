"""Linear-chain CRF over discourse elements with tags {B, I, O}.

Exact inference (forward-backward, Viterbi) in log space, L2-regularized
maximum-likelihood training, and model persistence. The chain scores tag
transitions: position k carries features of the pair (y_{k-1}, y_k); the
first position is conditioned on a distinguished start tag.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .corpus import Book, extract_mentions
from .features import (
    DEFAULT_KEYWORDS,
    START_TAG,
    AnalyzerHooks,
    GeometryKeywordTable,
    ident_features,
)
from .metrics import ident_prf

logger = logging.getLogger(__name__)

TAGS = ("B", "I", "O")
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}
NT = len(TAGS)


@dataclass
class IdentModel:
    """Weights and feature resources for axiom identification."""

    theta: dict[str, float] = field(default_factory=dict)
    lam: float = 0.0
    keywords: GeometryKeywordTable | None = None
    markers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        for name, w in self.theta.items():
            if not math.isfinite(w):
                raise ValueError(f"non-finite weight for {name!r}")


@dataclass(frozen=True)
class LatticeScores:
    """Log potentials: start[j] for position 0, trans[k-1][i][j] for k>=1."""

    start: np.ndarray  # (NT,)
    trans: np.ndarray  # (n-1, NT, NT)

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.start)) and np.all(np.isfinite(self.trans))):
            raise ValueError("lattice entries must be finite")

    @property
    def length(self) -> int:
        return 1 + self.trans.shape[0]

    def path_score(self, tags: list[str] | tuple[str, ...]) -> float:
        idx = [TAG_INDEX[t] for t in tags]
        score = float(self.start[idx[0]])
        for k in range(1, len(idx)):
            score += float(self.trans[k - 1, idx[k - 1], idx[k]])
        return score


class FeatureLattice:
    """Per-position, per-tag-pair feature vectors for one book (theta-free)."""

    def __init__(self, book: Book, kw: GeometryKeywordTable, hooks: AnalyzerHooks | None = None,
                 ablate: frozenset[str] = frozenset()):
        self.book = book
        n = len(book.elements)
        if n == 0:
            raise ValueError(f"book {book.book_id} is empty")
        self.start_fv = [ident_features(book, 0, START_TAG, t, kw, hooks, ablate) for t in TAGS]
        self.trans_fv = [
            [[ident_features(book, k, ti, tj, kw, hooks, ablate) for tj in TAGS] for ti in TAGS]
            for k in range(1, n)
        ]

    def scores(self, theta: dict[str, float]) -> LatticeScores:
        n = len(self.book.elements)
        start = np.array([fv.dot(theta) for fv in self.start_fv])
        trans = np.zeros((n - 1, NT, NT))
        for k, row in enumerate(self.trans_fv):
            for i in range(NT):
                for j in range(NT):
                    trans[k, i, j] = row[i][j].dot(theta)
        return LatticeScores(start=start, trans=trans)


def build_lattice(
    book: Book,
    model: IdentModel,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> LatticeScores:
    if model.keywords is None:
        raise ValueError("model has no keyword table")
    return FeatureLattice(book, model.keywords, hooks, ablate).scores(model.theta)


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis) if axis is not None else float(out)


def forward_log(lat: LatticeScores) -> np.ndarray:
    n = lat.length
    alpha = np.zeros((n, NT))
    alpha[0] = lat.start
    for k in range(1, n):
        alpha[k] = _logsumexp(alpha[k - 1][:, None] + lat.trans[k - 1], axis=0)
    return alpha


def backward_log(lat: LatticeScores) -> np.ndarray:
    n = lat.length
    beta = np.zeros((n, NT))
    for k in range(n - 2, -1, -1):
        beta[k] = _logsumexp(lat.trans[k] + beta[k + 1][None, :], axis=1)
    return beta


def log_partition(lat: LatticeScores) -> float:
    return float(_logsumexp(forward_log(lat)[-1]))


def marginals(lat: LatticeScores) -> tuple[np.ndarray, np.ndarray, float]:
    """Position marginals (n, NT), pairwise marginals (n-1, NT, NT), log Z."""
    alpha = forward_log(lat)
    beta = backward_log(lat)
    log_z = float(_logsumexp(alpha[-1]))
    pos = np.exp(alpha + beta - log_z)
    n = lat.length
    pair = np.zeros((n - 1, NT, NT))
    for k in range(1, n):
        pair[k - 1] = np.exp(
            alpha[k - 1][:, None] + lat.trans[k - 1] + beta[k][None, :] - log_z
        )
    return pos, pair, log_z


def viterbi(lat: LatticeScores) -> list[str]:
    """Highest-scoring tag sequence.

    Among equally scoring sequences, returns the lexicographically first one
    under the tag order (B, I, O): picked greedily left to right against
    suffix maxima, so ties resolve to the earliest tag at the earliest
    position.
    """
    n = lat.length
    suffix = np.zeros((n, NT))
    for k in range(n - 2, -1, -1):
        suffix[k] = np.max(lat.trans[k] + suffix[k + 1][None, :], axis=1)
    tags = []
    prev = int(np.argmax(lat.start + suffix[0]))
    tags.append(TAGS[prev])
    for k in range(1, n):
        prev = int(np.argmax(lat.trans[k - 1][prev] + suffix[k]))
        tags.append(TAGS[prev])
    return tags


# ---------------------------------------------------------------------------
# training


class _Vectorizer:
    """Maps feature names to dense indices over a training set."""

    def __init__(self, lattices: list[FeatureLattice]):
        names: set[str] = set()
        for fl in lattices:
            for fv in fl.start_fv:
                names.update(fv.entries)
            for row in fl.trans_fv:
                for cell in row:
                    for fv in cell:
                        names.update(fv.entries)
        self.names = sorted(names)
        self.index = {n: i for i, n in enumerate(self.names)}

    def encode(self, fv) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array([self.index[n] for n in fv.entries if n in self.index], dtype=np.intp)
        vals = np.array([fv.entries[n] for n in fv.entries if n in self.index])
        return ids, vals

    def to_dict(self, x: np.ndarray) -> dict[str, float]:
        return {n: float(w) for n, w in zip(self.names, x) if w != 0.0}


class _EncodedBook:
    def __init__(self, fl: FeatureLattice, gold: list[str], vec: _Vectorizer):
        n = len(fl.book.elements)
        if len(gold) != n:
            raise ValueError(f"book {fl.book.book_id}: {len(gold)} tags for {n} elements")
        self.n = n
        self.start_enc = [vec.encode(fv) for fv in fl.start_fv]
        self.trans_enc = [
            [[vec.encode(fl.trans_fv[k][i][j]) for j in range(NT)] for i in range(NT)]
            for k in range(n - 1)
        ]
        self.gold_idx = [TAG_INDEX[t] for t in gold]
        self.empirical = np.zeros(len(vec.names))
        ids, vals = self.start_enc[self.gold_idx[0]]
        np.add.at(self.empirical, ids, vals)
        for k in range(1, n):
            ids, vals = self.trans_enc[k - 1][self.gold_idx[k - 1]][self.gold_idx[k]]
            np.add.at(self.empirical, ids, vals)

    def lattice(self, x: np.ndarray) -> LatticeScores:
        start = np.array([float(vals @ x[ids]) if len(ids) else 0.0 for ids, vals in self.start_enc])
        trans = np.zeros((self.n - 1, NT, NT))
        for k in range(self.n - 1):
            for i in range(NT):
                for j in range(NT):
                    ids, vals = self.trans_enc[k][i][j]
                    if len(ids):
                        trans[k, i, j] = float(vals @ x[ids])
        return LatticeScores(start=start, trans=trans)

    def nll_and_expectation(self, x: np.ndarray, grad: np.ndarray) -> float:
        lat = self.lattice(x)
        pos, pair, log_z = marginals(lat)
        gold_score = lat.path_score([TAGS[i] for i in self.gold_idx])
        for j in range(NT):
            ids, vals = self.start_enc[j]
            if len(ids):
                np.add.at(grad, ids, pos[0, j] * vals)
        for k in range(self.n - 1):
            for i in range(NT):
                for j in range(NT):
                    ids, vals = self.trans_enc[k][i][j]
                    if len(ids):
                        np.add.at(grad, ids, pair[k, i, j] * vals)
        grad -= self.empirical
        return log_z - gold_score


def nll_gradient(
    labeled: list[tuple[Book, list[str]]],
    model: IdentModel,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> tuple[float, dict[str, float]]:
    """Regularized negative log likelihood and its gradient.

    value = sum_b [log Z_b - score(gold_b)] + lambda * ||theta||^2;
    gradient entries are expected minus empirical feature counts plus the
    regularizer term. Features absent from theta but present in the data
    still get gradient entries.
    """
    if model.keywords is None:
        raise ValueError("model has no keyword table")
    lattices = [FeatureLattice(b, model.keywords, hooks, ablate) for b, _ in labeled]
    vec = _Vectorizer(lattices)
    for name in model.theta:
        if name not in vec.index:
            vec.index[name] = len(vec.names)
            vec.names.append(name)
    x = np.zeros(len(vec.names))
    for name, w in model.theta.items():
        x[vec.index[name]] = w
    grad = np.zeros(len(vec.names))
    value = 0.0
    for fl, (book, gold) in zip(lattices, labeled):
        enc = _EncodedBook(fl, gold, vec)
        value += enc.nll_and_expectation(x, grad)
    value += model.lam * float(x @ x)
    grad += 2.0 * model.lam * x
    return value, {n: float(g) for n, g in zip(vec.names, grad) if g != 0.0}


def _fit(
    encoded: list[_EncodedBook],
    dim: int,
    lam: float,
    max_iter: int,
    gtol: float,
) -> np.ndarray:
    def objective(x: np.ndarray):
        grad = np.zeros(dim)
        value = 0.0
        for enc in encoded:
            value += enc.nll_and_expectation(x, grad)
        value += lam * float(x @ x)
        grad += 2.0 * lam * x
        return value, grad

    res = minimize(
        objective,
        np.zeros(dim),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-12},
    )
    if not np.all(np.isfinite(res.x)) or not math.isfinite(res.fun):
        raise RuntimeError(f"optimizer diverged at lambda={lam}")
    return res.x


def train_identification(
    train: list[tuple[Book, list[str]]],
    dev: list[tuple[Book, list[str]]],
    grid: list[float],
    kw: GeometryKeywordTable,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
    max_iter: int = 200,
    gtol: float = 1e-5,
) -> IdentModel:
    """Grid-tune lambda on dev strict F1, then retrain on train+dev."""
    if not train:
        raise ValueError("empty training set")
    if not grid:
        raise ValueError("empty lambda grid")

    train_lattices = [FeatureLattice(b, kw, hooks, ablate) for b, _ in train]
    vec = _Vectorizer(train_lattices)
    encoded = [_EncodedBook(fl, gold, vec) for fl, (_, gold) in zip(train_lattices, train)]

    if not dev:
        logger.warning("empty dev set: keeping first grid entry lambda=%s", grid[0])
        best_lam = grid[0]
    else:
        best_lam, best_f1 = None, -1.0
        for lam in grid:
            x = _fit(encoded, len(vec.names), lam, max_iter, gtol)
            model = IdentModel(theta=vec.to_dict(x), lam=lam, keywords=kw)
            f1 = _dev_strict_f1(model, dev, hooks, ablate)
            logger.info("lambda=%s dev strict F1=%.4f", lam, f1)
            if f1 > best_f1:
                best_lam, best_f1 = lam, f1

    both = train + dev
    all_lattices = [FeatureLattice(b, kw, hooks, ablate) for b, _ in both]
    vec = _Vectorizer(all_lattices)
    encoded = [_EncodedBook(fl, gold, vec) for fl, (_, gold) in zip(all_lattices, both)]
    x = _fit(encoded, len(vec.names), best_lam, max_iter, gtol)
    return IdentModel(theta=vec.to_dict(x), lam=best_lam, keywords=kw)


def _dev_strict_f1(model, dev, hooks, ablate) -> float:
    pred, gold = [], []
    for book, tags in dev:
        lat = build_lattice(book, model, hooks, ablate)
        pred.extend(extract_mentions(book, viterbi(lat)))
        gold.extend(extract_mentions(book, tags))
    return ident_prf(pred, gold, "strict").f1


def decode_book(
    book: Book,
    model: IdentModel,
    hooks: AnalyzerHooks | None = None,
    ablate: frozenset[str] = frozenset(),
) -> list[str]:
    return viterbi(build_lattice(book, model, hooks, ablate))


# ---------------------------------------------------------------------------
# persistence

_MODEL_HEADER = "axiomharvest-ident-model v1"


def save_ident_model(model: IdentModel, path) -> None:
    lines = [_MODEL_HEADER, f"lambda\t{model.lam!r}"]
    if model.keywords is not None:
        for w in sorted(model.keywords.keywords):
            lines.append(f"keyword\t{w}")
    for w in model.markers:
        lines.append(f"marker\t{w}")
    for name in sorted(model.theta):
        lines.append(f"w\t{name}\t{model.theta[name]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_ident_model(path, lexicon) -> IdentModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _MODEL_HEADER:
        raise ValueError(f"{path}: not an identification model file")
    lam = 0.0
    keywords: set[str] = set()
    markers: list[str] = []
    theta: dict[str, float] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, _, rest = line.partition("\t")
        if kind == "lambda":
            lam = float(rest)
        elif kind == "keyword":
            keywords.add(rest)
        elif kind == "marker":
            markers.append(rest)
        elif kind == "w":
            name, _, value = rest.rpartition("\t")
            theta[name] = float(value)
        else:
            raise ValueError(f"{path}: unknown record {kind!r}")
    kw = GeometryKeywordTable(
        keywords=frozenset(keywords) | DEFAULT_KEYWORDS, entity_lexicon=lexicon
    )
    return IdentModel(theta=theta, lam=lam, keywords=kw, markers=tuple(markers))
