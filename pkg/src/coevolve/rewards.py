"""Questioner and reasoner rewards.

Covers majority-vote confidence, the uncertainty reward, BLEU-based
redundancy clustering and penalty, the strict tag-format check, the composite
questioner reward and the binary reasoner reward.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .errors import DomainError, EmptyAnswers, FormatError
from .microworld import canonicalize_answer, split_tags

DEFAULT_LAMBDA = 0.5
DEFAULT_BLEU_THRESHOLD = 0.6
MAX_NGRAM = 4
# Upper bound of bleu() for sequences sharing no token: every order is smoothed
# to 1/(total+1) <= 1/2 and the brevity penalty is <= 1.
SMOOTHING_FLOOR = 0.5


@dataclass(frozen=True)
class ConfidenceRecord:
    answers: tuple[str, ...]
    pseudo_label: str
    count: int
    confidence: float
    tie_broken: bool

    @property
    def m(self) -> int:
        return len(self.answers)


@dataclass(frozen=True)
class RewardBreakdown:
    valid: bool
    r_unc: float
    r_div: float
    cluster_id: int
    cluster_size: int
    final: float

    def to_dict(self) -> dict:
        return asdict(self)


def confidence(answers: Sequence[str], m: int | None = None) -> ConfidenceRecord:
    """Majority vote with lexicographic tie-break.

    ``confidence`` is the pseudo-label's empirical frequency ``count / m``.
    """
    answers = tuple(answers)
    if m is None:
        m = len(answers)
    if m == 0 or not answers:
        raise EmptyAnswers("majority vote over zero answers")
    if len(answers) != m:
        raise ValueError(f"expected {m} answers, got {len(answers)}")
    counts = Counter(answers)
    top = max(counts.values())
    winners = sorted(a for a, n in counts.items() if n == top)
    return ConfidenceRecord(answers, winners[0], top, top / m, len(winners) > 1)


def uncertainty_reward(c: float) -> float:
    """``1 - |2c - 1|``: 1 at c = 0.5, 0 at c in {0, 1}."""
    if not 0.0 <= c <= 1.0:
        raise DomainError(f"confidence {c} outside [0, 1]")
    return 1.0 - abs(2.0 * c - 1.0)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence, reference: Sequence, max_n: int = MAX_NGRAM) -> float:
    """Sentence BLEU of ``candidate`` against one ``reference``.

    Orders 1..N with N = min(max_n, len(candidate), len(reference)), uniform
    weights, brevity penalty exp(1 - r/c) when c <= r. An order with zero
    clipped matches uses the add-one precision 1 / (total + 1).
    """
    c, r = len(candidate), len(reference)
    if c == 0 or r == 0:
        return 1.0 if c == r else 0.0
    N = min(max_n, c, r)
    log_sum = 0.0
    for n in range(1, N + 1):
        cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
        total = sum(cand.values())
        matches = sum(min(k, ref[g]) for g, k in cand.items())
        p = matches / total if matches else 1.0 / (total + 1)
        log_sum += math.log(p)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / N)


def _tokens(seq) -> tuple:
    tokens = getattr(seq, "tokens", seq)
    return tuple(tokens)


def similarity(a, b, end_id: int | None = 0) -> float:
    """Symmetric BLEU ``max(BLEU(a|b), BLEU(b|a))`` over token ids.

    A trailing end token is not part of the question and is dropped.
    """
    ta, tb = _tokens(a), _tokens(b)
    if end_id is not None:
        ta = ta[:-1] if ta and ta[-1] == end_id else ta
        tb = tb[:-1] if tb and tb[-1] == end_id else tb
    return max(bleu(ta, tb), bleu(tb, ta))


def cluster_group(group: Sequence, threshold: float = DEFAULT_BLEU_THRESHOLD, end_id: int | None = 0) -> list[int]:
    """Single-linkage clusters of the graph with edges where similarity >= threshold.

    Cluster ids are numbered 0, 1, ... in order of each cluster's first member.
    """
    if not 0.0 < threshold <= 1.0:
        raise DomainError(f"threshold {threshold} outside (0, 1]")
    n = len(group)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if find(i) != find(j) and similarity(group[i], group[j], end_id) >= threshold:
                parent[max(find(i), find(j))] = min(find(i), find(j))
    ids: dict[int, int] = {}
    return [ids.setdefault(find(i), len(ids)) for i in range(n)]


def cluster_sizes(assignment: Sequence[int]) -> list[int]:
    counts = Counter(assignment)
    return [counts[k] for k in assignment]


def diversity_penalty(cluster_size: int, G: int, lam: float = DEFAULT_LAMBDA) -> float:
    """``lam * cluster_size / G``."""
    if not 1 <= cluster_size <= G or lam < 0:
        raise DomainError(f"need 1 <= cluster_size <= G and lambda >= 0, got {cluster_size}, {G}, {lam}")
    return lam * cluster_size / G


def format_valid(text: str) -> bool:
    """True iff ``text`` is exactly one ``<question>...</question>`` block."""
    try:
        split_tags(text)
    except FormatError:
        return False
    return True


def questioner_reward(valid: bool, r_unc: float, r_div: float) -> float:
    """``valid * max(0, r_unc - r_div)``."""
    if not valid:
        return 0.0
    return max(0.0, r_unc - r_div)


def reasoner_reward(answer: str, pseudo_label: str) -> int:
    """1 iff the canonical forms agree exactly."""
    return int(canonicalize_answer(answer) == canonicalize_answer(pseudo_label))


def score_group(
    sequences: Sequence,
    valid: Sequence[bool],
    confidences: Sequence[float | None],
    lam: float = DEFAULT_LAMBDA,
    threshold: float = DEFAULT_BLEU_THRESHOLD,
    end_id: int | None = 0,
) -> list[RewardBreakdown]:
    """Composite questioner reward for each member of one sampled group.

    ``confidences[i]`` is None for invalid questions (no reasoner rollouts);
    such members keep r_unc = 0 and a zero final reward but still belong to
    a cluster.
    """
    G = len(sequences)
    assignment = cluster_group(sequences, threshold, end_id)
    sizes = cluster_sizes(assignment)
    out = []
    for i in range(G):
        r_unc = uncertainty_reward(confidences[i]) if valid[i] else 0.0
        r_div = diversity_penalty(sizes[i], G, lam)
        out.append(
            RewardBreakdown(
                valid=bool(valid[i]),
                r_unc=r_unc,
                r_div=r_div,
                cluster_id=assignment[i],
                cluster_size=sizes[i],
                final=questioner_reward(bool(valid[i]), r_unc, r_div),
            )
        )
    return out
