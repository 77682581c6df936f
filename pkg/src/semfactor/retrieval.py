"""Re-identification matching, CMC evaluation, and description-based
search scoring with precision/recall evaluation.

Matching is exact banded nearest-neighbour over the 14 window vectors:
each probe window searches gallery windows within one grid row of its
own position. Query scores follow two semantics: factors that must
co-occur on the same pixels score max over pixels of the product of
their maps; independent factors multiply their individual map maxima.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass

import numpy as np

from .core import UnknownFactorError
from .heatmaps import GridDescriptor, HeatMapStack


@dataclass(frozen=True)
class QueryGroup:
    factors: tuple[int, ...]
    colocated: bool = True

    def __post_init__(self):
        if not self.factors:
            raise ValueError("a query group needs at least one factor")


@dataclass(frozen=True)
class QueryTerm:
    groups: tuple[QueryGroup, ...]

    def __post_init__(self):
        if not self.groups:
            raise ValueError("a query needs at least one group")


def patch_distance(a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance between L1-normalised vectors (zero vectors stay zero)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape} vs {b.shape}")
    sa = a.sum()
    sb = b.sum()
    an = a / sa if sa > 0 else a
    bn = b / sb if sb > 0 else b
    return float(np.abs(an - bn).sum())


def _directional(pm: np.ndarray, gm: np.ndarray, prows: np.ndarray, grows: np.ndarray, band: int) -> float:
    total = 0.0
    for i in range(pm.shape[0]):
        allowed = np.abs(grows - prows[i]) <= band
        cand = gm[allowed]
        dmin = min(float(np.abs(cand[t] - pm[i]).sum()) for t in range(cand.shape[0]))
        total += dmin
    return total


def image_distance(probe: GridDescriptor, gallery: GridDescriptor, row_band: int = 1) -> float:
    """Symmetrised banded best-match distance between two descriptors."""
    pm = probe.matrix
    gm = gallery.matrix
    if pm.shape[1] != gm.shape[1]:
        raise ValueError("descriptors disagree on the factor count")
    prows = np.array([w.row for w in probe.windows])
    grows = np.array([w.row for w in gallery.windows])
    d_pg = _directional(pm, gm, prows, grows, row_band)
    d_gp = _directional(gm, pm, grows, prows, row_band)
    return 0.5 * (d_pg + d_gp)


def distance_matrix(
    probes: list[GridDescriptor], gallery: list[GridDescriptor], row_band: int = 1
) -> np.ndarray:
    out = np.zeros((len(probes), len(gallery)))
    for i, p in enumerate(probes):
        for g, q in enumerate(gallery):
            out[i, g] = image_distance(p, q, row_band)
    return out


def cmc_curve(distances: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Cumulative match accuracy at every rank.

    ``truth[i]`` is the gallery column of probe i's single true match;
    ties in distance break by ascending gallery index.
    """
    distances = np.asarray(distances, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    n_probe, n_gallery = distances.shape
    if truth.shape[0] != n_probe:
        raise ValueError("one truth entry per probe is required")
    if np.any(truth < 0) or np.any(truth >= n_gallery):
        raise KeyError("truth references a missing gallery id")
    hits = np.zeros(n_gallery, dtype=np.int64)
    for i in range(n_probe):
        row = distances[i]
        d_true = row[truth[i]]
        rank = int(np.sum(row < d_true)) + int(np.sum((row == d_true) & (np.arange(n_gallery) < truth[i]))) + 1
        hits[rank - 1] += 1
    return np.cumsum(hits) / n_probe


def score_query(stack: HeatMapStack | np.ndarray, term: QueryTerm) -> float:
    """Product over groups of either max-of-product (co-located) or
    product-of-maxima (independent) map statistics."""
    maps = stack.maps if isinstance(stack, HeatMapStack) else np.asarray(stack, dtype=np.float64)
    k = maps.shape[0]
    score = 1.0
    for group in term.groups:
        for f in group.factors:
            if not (0 <= f < k):
                raise IndexError(f"factor index {f} out of range for {k} maps")
        if group.colocated:
            prod = maps[group.factors[0]].copy()
            for f in group.factors[1:]:
                prod *= maps[f]
            score *= float(prod.max())
        else:
            for f in group.factors:
                score *= float(maps[f].max())
    return score


def rank_images(stacks: dict[str, HeatMapStack], term: QueryTerm) -> list[tuple[str, float]]:
    """All images ranked by query score, ties broken by ascending id."""
    scored = [(image_id, score_query(stack, term)) for image_id, stack in stacks.items()]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored


@dataclass
class PRResult:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    average_precision: float


def pr_curve(scores: np.ndarray, relevance: np.ndarray) -> PRResult:
    """Precision/recall sweep over descending score, index tie-break.

    Average precision is the mean over relevant items of the precision
    at the rank where each is retrieved.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=bool)
    if scores.shape != relevance.shape:
        raise ValueError("scores and relevance must align")
    n_rel = int(relevance.sum())
    if n_rel == 0:
        raise ValueError("at least one relevant image is required")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = 0
    prec = []
    rec = []
    thr = []
    ap = 0.0
    for rank, i in enumerate(order, start=1):
        if relevance[i]:
            tp += 1
            ap += tp / rank
        prec.append(tp / rank)
        rec.append(tp / n_rel)
        thr.append(scores[i])
    return PRResult(
        thresholds=np.array(thr),
        precision=np.array(prec),
        recall=np.array(rec),
        average_precision=ap / n_rel,
    )


def resolve_factor(name: str, factor_names: list[str]) -> int:
    try:
        return factor_names.index(name)
    except ValueError:
        suggestions = difflib.get_close_matches(name, factor_names, n=3, cutoff=0.4)
        raise UnknownFactorError(name, suggestions) from None


def _split_group(text: str, factor_names: list[str]) -> tuple[int, ...]:
    """Resolve a hyphen-joined group against the vocabulary.

    Whole-string matches win (names themselves may contain hyphens);
    otherwise the token sequence is partitioned into the longest
    contiguous joins that are valid names.
    """
    if text in factor_names:
        return (factor_names.index(text),)
    tokens = text.split("-")
    n = len(tokens)
    best: dict[int, tuple[int, ...]] = {0: ()}
    for start in range(n):
        if start not in best:
            continue
        for stop in range(n, start, -1):
            cand = "-".join(tokens[start:stop])
            if cand in factor_names:
                if stop not in best:
                    best[stop] = best[start] + (factor_names.index(cand),)
    if n not in best:
        suggestions = difflib.get_close_matches(text, factor_names, n=3, cutoff=0.4)
        for t in tokens:
            for s in difflib.get_close_matches(t, factor_names, n=2, cutoff=0.5):
                if s not in suggestions:
                    suggestions.append(s)
        raise UnknownFactorError(text, suggestions[:3])
    return best[n]


def parse_query(text: str, factor_names: list[str], colocated: bool = True) -> QueryTerm:
    """Parse '+'-joined terms, each a factor name or a hyphen-joined
    co-located combination; groups combine independently."""
    groups = []
    for part in text.split("+"):
        part = part.strip()
        if not part:
            continue
        factors = _split_group(part, factor_names)
        groups.append(QueryGroup(factors=factors, colocated=colocated if len(factors) > 1 else True))
    if not groups:
        raise ValueError("empty query")
    return QueryTerm(groups=tuple(groups))
