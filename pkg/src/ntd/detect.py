"""Per-query detection and multi-trial session composition.

A query carries the embedding of one input plus the class the model under
test predicted for it. The query is scored against a freshly sampled
comparison set of validated records of that class; scores at or above the
calibrated threshold pass as benign, scores below it are flagged as trigger.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .calibrate import MultiTrialPlan, ThresholdTable
from .errors import MetricMismatchError, ValidationError
from .featstore import ValidationStore, sample_comparison_set
from .simdist import Metric, mean_similarity

BENIGN = "benign"
TRIGGER = "trigger"

ACCEPTED = "accepted"
REJECTED = "rejected"
OPEN = "open"


@dataclass(frozen=True)
class Query:
    """One input to screen: its embedding and the class predicted for it.

    true_class is simulation-only audit metadata (the class the embedding was
    actually drawn from); detection never reads it.
    """

    input_id: str
    predicted_class: int
    embedding: np.ndarray
    true_class: int | None = None

    def __post_init__(self) -> None:
        embedding = np.asarray(self.embedding, dtype=np.float64)
        if embedding.ndim != 1 or embedding.size == 0:
            raise ValidationError(
                f"query {self.input_id!r}: embedding must be a non-empty vector"
            )
        if not np.all(np.isfinite(embedding)):
            raise ValidationError(
                f"query {self.input_id!r}: embedding contains non-finite values"
            )
        embedding = embedding.copy()
        embedding.flags.writeable = False
        object.__setattr__(self, "embedding", embedding)


@dataclass(frozen=True)
class Verdict:
    input_id: str
    decision: str
    score: float
    threshold: float
    class_id: int
    comparison_positions: tuple[int, ...]
    degraded: bool = False


@dataclass
class TrialSession:
    session_id: str
    m: int
    outcome: str = OPEN
    trials_used: int = 0
    verdicts: list[Verdict] = field(default_factory=list)


def detect_one(
    query: Query,
    store: ValidationStore,
    thresholds: ThresholdTable,
    n: int,
    metric: Metric,
    rng: np.random.Generator,
) -> Verdict:
    """Score one query against a fresh comparison set of its predicted class.

    Equality with the threshold counts as benign. When the class holds fewer
    than n records the set degrades to the class size and the verdict is
    flagged. The embedding is used as given; no feature extraction happens
    here, and exactly len(comparison_positions) pairwise similarities are
    evaluated.
    """
    if n < 1:
        raise ValidationError(f"comparison set size must be >= 1, got {n}")
    if metric is not thresholds.metric:
        raise MetricMismatchError(
            f"threshold table was calibrated for {thresholds.metric.value}, "
            f"detection requested {metric.value}"
        )
    embedding = np.asarray(query.embedding, dtype=np.float64)
    if embedding.ndim != 1 or embedding.shape[0] != store.dim:
        raise ValidationError(
            f"query {query.input_id!r}: embedding has shape {embedding.shape}, "
            f"store dimensionality is {store.dim}"
        )
    class_size = store.class_count(query.predicted_class)
    use_n = min(n, class_size)
    members = sample_comparison_set(store, query.predicted_class, use_n, rng)
    score = mean_similarity(embedding, members.vectors, metric)
    threshold = thresholds.lookup(query.predicted_class)
    return Verdict(
        input_id=query.input_id,
        decision=BENIGN if score >= threshold else TRIGGER,
        score=score,
        threshold=threshold,
        class_id=query.predicted_class,
        comparison_positions=members.positions,
        degraded=use_n < n,
    )


def session_outcome(decisions: Iterable[str], m: int) -> tuple[str, int]:
    """Fold per-trial decisions into a session outcome.

    The session is accepted at the first benign decision (remaining decisions
    are not consumed), rejected only after m trigger decisions, and left open
    when the stream ends early with only triggers.
    """
    if m < 1:
        raise ValidationError(f"trial budget must be >= 1, got {m}")
    used = 0
    for decision in decisions:
        if used >= m:
            raise ValidationError(f"session exceeded its budget of {m} trials")
        used += 1
        if decision == BENIGN:
            return ACCEPTED, used
        if decision != TRIGGER:
            raise ValidationError(f"unknown decision {decision!r}")
    if used == m:
        return REJECTED, used
    return OPEN, used


def detect_session(
    session_id: str,
    queries: Sequence[Query],
    store: ValidationStore,
    thresholds: ThresholdTable,
    n: int,
    metric: Metric,
    rng: np.random.Generator,
    policy: MultiTrialPlan,
) -> TrialSession:
    """Run up to policy.m trials for one subject.

    Each query gets its own freshly sampled comparison set; trials after an
    acceptance are never evaluated. Supplying more queries than the policy
    allows is an error.
    """
    if len(queries) > policy.m:
        raise ValidationError(
            f"session {session_id!r} supplied {len(queries)} queries, "
            f"policy allows at most {policy.m}"
        )
    session = TrialSession(session_id=session_id, m=policy.m)

    def run() -> Iterator[str]:
        for query in queries:
            verdict = detect_one(query, store, thresholds, n, metric, rng)
            session.verdicts.append(verdict)
            yield verdict.decision

    session.outcome, session.trials_used = session_outcome(run(), policy.m)
    return session
