"""Synthetic evaluation harness: data generation, rate measurement, sweeps
and the comparison-set latency bench.

The generator places unit class means at a guaranteed minimum pairwise angle
and scatters unit samples around them with an angular-spread parameter, so
separation and confusability are directly controllable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import docfmt
from .calibrate import (
    CalibrationConfig,
    GlobalScope,
    PerClassScope,
    ThresholdTable,
    calibrate,
    plan_multi_trial,
)
from .detect import REJECTED, Query, TrialSession, detect_session
from .errors import InfeasibleGeometryError, ValidationError
from .featstore import ValidationStore, sample_comparison_set
from .simdist import Metric, mean_similarity

# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale synthetic dataset description.

    noise_sigma is an angular spread: a sample is unit(mean + sigma * u) for
    a random unit direction u, so sigma ~ tan of the typical deviation angle.
    class_sigma overrides the spread for individual classes.
    """

    classes: int = 10
    dim: int = 64
    records_per_class: int = 200
    heldout_per_class: int = 100
    noise_sigma: float = 0.1
    min_angle_deg: float = 90.0
    class_sigma: tuple[tuple[int, float], ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if self.records_per_class < 1 or self.heldout_per_class < 0:
            raise ValidationError("record counts out of range")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0.0 < self.min_angle_deg <= 180.0:
            raise ValidationError("min_angle_deg must lie in (0, 180]")

    def sigma_for(self, class_id: int) -> float:
        return dict(self.class_sigma).get(class_id, self.noise_sigma)


def sample_cluster(
    mean: np.ndarray, sigma: float, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw count unit vectors scattered around a unit mean direction."""
    mean = np.asarray(mean, dtype=np.float64)
    if count == 0:
        return np.empty((0, mean.shape[0]))
    if sigma == 0.0:
        return np.tile(mean, (count, 1))
    noise = rng.standard_normal((count, mean.shape[0]))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    out = mean + sigma * noise
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def _class_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    min_cos = math.cos(math.radians(spec.min_angle_deg))
    # k unit vectors can be pairwise separated by angle a only while
    # cos(a) >= -1/(k-1) (regular simplex bound), in any dimension.
    if min_cos < -1.0 / (spec.classes - 1) - 1e-12:
        raise InfeasibleGeometryError(
            f"{spec.classes} directions cannot be pairwise separated by "
            f"{spec.min_angle_deg} degrees"
        )
    if spec.classes <= spec.dim and spec.min_angle_deg <= 90.0:
        # Orthogonal basis satisfies the floor exactly, including the
        # zero-noise case where inter-class cosine must be exactly 0.
        return np.eye(spec.classes, spec.dim)
    means: list[np.ndarray] = []
    for _ in range(spec.classes):
        for _ in range(1000):
            cand = rng.standard_normal(spec.dim)
            cand /= np.linalg.norm(cand)
            if all(float(np.dot(cand, m)) <= min_cos + 1e-12 for m in means):
                means.append(cand)
                break
        else:
            raise InfeasibleGeometryError(
                f"could not place {spec.classes} directions at >= "
                f"{spec.min_angle_deg} degrees in dim {spec.dim}"
            )
    return np.stack(means)


def generate_synthetic(spec: SyntheticSpec) -> tuple[ValidationStore, ValidationStore]:
    """Generate (validated store, held-out pool) for a synthetic spec.

    Both sides are pure functions of the seed; the held-out pool is disjoint
    from the store and drawn from the same per-class distributions.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    means = _class_means(spec, rng)
    names = {c: f"class{c}" for c in range(spec.classes)}
    store_ids, store_vecs, held_ids, held_vecs = [], [], [], []
    for c in range(spec.classes):
        sigma = spec.sigma_for(c)
        store_vecs.append(sample_cluster(means[c], sigma, spec.records_per_class, rng))
        store_ids.extend([c] * spec.records_per_class)
        held_vecs.append(sample_cluster(means[c], sigma, spec.heldout_per_class, rng))
        held_ids.extend([c] * spec.heldout_per_class)
    store = ValidationStore(
        dim=spec.dim,
        class_ids=np.array(store_ids, dtype=np.uint32),
        vectors=np.vstack(store_vecs).astype(np.float32),
        names=names,
    )
    heldout = ValidationStore(
        dim=spec.dim,
        class_ids=np.array(held_ids, dtype=np.uint32),
        vectors=(
            np.vstack(held_vecs).astype(np.float32)
            if held_vecs
            else np.empty((0, spec.dim), dtype=np.float32)
        ),
        names=names,
    )
    return store, heldout


# ---------------------------------------------------------------------------
# query construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSimSpec:
    """Label-hijack simulation: embeddings drawn from a source class are
    presented with the model's output forced to the target class."""

    target_class: int
    count: int
    source_class: int | None = None

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValidationError("trigger count must be >= 1")
        if self.source_class is not None and self.source_class == self.target_class:
            raise ValidationError(
                "trigger source class equals target class; that simulates "
                "clean traffic, not a hijack"
            )


def clean_session_queries(
    heldout: ValidationStore, sessions: int, m: int, rng: np.random.Generator
) -> list[Query]:
    """Build sessions*m clean queries; each session holds m embeddings of one
    uniformly chosen class, predicted correctly."""
    classes = heldout.classes()
    queries: list[Query] = []
    for k in range(sessions):
        cls = classes[int(rng.integers(len(classes)))]
        picks = sample_comparison_set(heldout, cls, m, rng)
        for t in range(m):
            queries.append(
                Query(
                    input_id=f"clean-{k}-{t}",
                    predicted_class=cls,
                    embedding=picks.vectors[t],
                    true_class=cls,
                )
            )
    return queries


def trigger_session_queries(
    heldout: ValidationStore, sim: TriggerSimSpec, m: int, rng: np.random.Generator
) -> list[Query]:
    """Build sim.count trigger sessions of m queries each."""
    donors = [c for c in heldout.classes() if c != sim.target_class]
    if sim.source_class is not None:
        donors = [sim.source_class]
    if not donors:
        raise ValidationError("no source class available for trigger simulation")
    queries: list[Query] = []
    for k in range(sim.count):
        src = donors[int(rng.integers(len(donors)))]
        picks = sample_comparison_set(heldout, src, m, rng)
        for t in range(m):
            queries.append(
                Query(
                    input_id=f"trig-{sim.target_class}-{k}-{t}",
                    predicted_class=sim.target_class,
                    embedding=picks.vectors[t],
                    true_class=src,
                )
            )
    return queries


# ---------------------------------------------------------------------------
# rate measurement
# ---------------------------------------------------------------------------

@dataclass
class SessionRecord:
    kind: str
    class_id: int
    outcome: str
    trials_used: int
    session: TrialSession


@dataclass
class EvalReport:
    """Measured rates plus the per-session log they were counted from.

    frr/far are first-trial (per-trial) rates; frr_m/far_m are session rates
    under the m-trial policy and coincide with them when m == 1.
    """

    m: int
    n: int
    metric: Metric
    seed: int
    clean_sessions: int
    trigger_sessions: int
    frr: float
    far: float
    frr_m: float
    far_m: float
    per_class_frr: dict[int, tuple[float, int]]
    per_class_far: dict[int, tuple[float, int]]
    sessions: list[SessionRecord] = field(repr=False, default_factory=list)
    degenerate_trigger: bool = False


def _sessions_of(queries: Sequence[Query], m: int, label: str) -> list[list[Query]]:
    if not queries:
        raise ValidationError(f"empty {label} query set")
    if len(queries) % m != 0:
        raise ValidationError(
            f"{label} query count {len(queries)} is not a multiple of m={m}"
        )
    return [list(queries[i : i + m]) for i in range(0, len(queries), m)]


def measure_rates(
    store: ValidationStore,
    thresholds: ThresholdTable,
    clean: Sequence[Query],
    trigger: Sequence[Query],
    n: int,
    metric: Metric,
    seed: int,
    m: int = 1,
) -> EvalReport:
    """Run clean and trigger sessions and count FRR/FAR.

    Each session draws from its own sub-seed derived from (seed, session
    index), so verdicts are reproducible and independent of evaluation order
    or of the thresholds applied to other sessions.
    """
    clean_sessions = _sessions_of(clean, m, "clean")
    trigger_sessions = _sessions_of(trigger, m, "trigger")
    policy = plan_multi_trial(0.0, 0.0, m)
    children = np.random.SeedSequence(seed).spawn(
        len(clean_sessions) + len(trigger_sessions)
    )

    records: list[SessionRecord] = []
    degenerate = any(
        q.true_class is not None and q.true_class == q.predicted_class
        for q in trigger
    )
    for offset, (kind, groups) in enumerate(
        (("clean", clean_sessions), ("trigger", trigger_sessions))
    ):
        base = 0 if offset == 0 else len(clean_sessions)
        for k, group in enumerate(groups):
            rng = np.random.default_rng(children[base + k])
            session = detect_session(
                f"{kind}-{k}", group, store, thresholds, n, metric, rng, policy
            )
            records.append(
                SessionRecord(
                    kind=kind,
                    class_id=group[0].predicted_class,
                    outcome=session.outcome,
                    trials_used=session.trials_used,
                    session=session,
                )
            )

    def rate(kind: str, hit: Callable[[SessionRecord], bool]) -> float:
        pool = [r for r in records if r.kind == kind]
        return sum(1 for r in pool if hit(r)) / len(pool)

    def first_trial_rejected(record: SessionRecord) -> bool:
        return record.session.verdicts[0].decision != "benign"

    per_class_frr: dict[int, tuple[float, int]] = {}
    per_class_far: dict[int, tuple[float, int]] = {}
    for kind, table in (("clean", per_class_frr), ("trigger", per_class_far)):
        pool = [r for r in records if r.kind == kind]
        for cid in sorted({r.class_id for r in pool}):
            mine = [r for r in pool if r.class_id == cid]
            if kind == "clean":
                hits = sum(1 for r in mine if r.outcome == REJECTED)
            else:
                hits = sum(1 for r in mine if r.outcome != REJECTED)
            table[cid] = (hits / len(mine), len(mine))

    return EvalReport(
        m=m,
        n=n,
        metric=metric,
        seed=seed,
        clean_sessions=len(clean_sessions),
        trigger_sessions=len(trigger_sessions),
        frr=rate("clean", first_trial_rejected),
        far=rate("trigger", lambda r: not first_trial_rejected(r)),
        frr_m=rate("clean", lambda r: r.outcome == REJECTED),
        far_m=rate("trigger", lambda r: r.outcome != REJECTED),
        per_class_frr=per_class_frr,
        per_class_far=per_class_far,
        sessions=records,
        degenerate_trigger=degenerate,
    )


# ---------------------------------------------------------------------------
# latency bench
# ---------------------------------------------------------------------------

class StubExtractor:
    """Embedding source with a per-call artificial delay and a call counter.

    Stands in for a real feature extractor; embeddings come from the store
    so the screening math is unchanged while invocation cost is controlled.
    """

    def __init__(self, store: ValidationStore, delay_s: float = 0.0) -> None:
        self.store = store
        self.delay_s = delay_s
        self.calls = 0

    def embed(self, position: int) -> np.ndarray:
        if self.delay_s > 0:
            time.sleep(self.delay_s)
        self.calls += 1
        return self.store.vectors[position]


@dataclass(frozen=True)
class LatencyRow:
    n: int
    lut: bool
    queries: int
    mean_s: float
    p95_s: float
    extractor_calls: int


def bench_latency(
    store: ValidationStore,
    n_values: Sequence[int],
    metric: Metric,
    delay_s: float,
    queries: int,
    seed: int,
) -> list[LatencyRow]:
    """Time the screening path per query with and without precomputed
    comparison-set embeddings.

    With the lookup table active only the query itself is embedded (1
    extractor call per query); without it every comparison member is embedded
    as well (n + 1 calls per query).
    """
    if queries < 1:
        raise ValidationError("need at least one bench query")
    rows: list[LatencyRow] = []
    for n in n_values:
        for lut in (True, False):
            extractor = StubExtractor(store, delay_s)
            rng = np.random.default_rng(np.random.SeedSequence(seed))
            times = np.empty(queries)
            for q in range(queries):
                position = int(rng.integers(store.count))
                cls = int(store.class_ids[position])
                start = time.perf_counter()
                x = extractor.embed(position)
                members = sample_comparison_set(store, cls, n, rng)
                if not lut:
                    for p in members.positions:
                        extractor.embed(p)
                mean_similarity(x, members.vectors, metric)
                times[q] = time.perf_counter() - start
            rows.append(
                LatencyRow(
                    n=n,
                    lut=lut,
                    queries=queries,
                    mean_s=float(times.mean()),
                    p95_s=float(np.percentile(times, 95)),
                    extractor_calls=extractor.calls,
                )
            )
    return rows


def latency_csv(rows: Sequence[LatencyRow]) -> str:
    out = ["n,lut,queries,mean_s,p95_s,extractor_calls"]
    for r in rows:
        out.append(
            f"{r.n},{'on' if r.lut else 'off'},{r.queries},"
            f"{docfmt.render_real(r.mean_s)},{docfmt.render_real(r.p95_s)},"
            f"{r.extractor_calls}"
        )
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("n", "metric", "preset_frr", "scope")

CSV_HEADER = (
    "axis,value,clean_count,trigger_count,frr,far,frr_m,far_m,"
    "threshold,metric,n,seed"
)


@dataclass(frozen=True)
class SweepBase:
    """Shared settings for a sweep; the axis overrides one of them per point."""

    store: ValidationStore
    heldout: ValidationStore
    n: int = 3
    metric: Metric = Metric.COSINE
    preset_frr: float = 0.05
    scope: str = "global"
    rounds: int = 1000
    m: int = 1
    clean_sessions: int = 1000
    trigger_sessions: int = 1000
    target_class: int | None = None
    min_class_size: int = 11
    cal_seed: int = 0
    eval_seed: int = 1


@dataclass
class SweepPoint:
    axis: str
    value: object
    table: ThresholdTable
    threshold: float
    report: EvalReport


def _calibrate_for(base: SweepBase) -> tuple[ThresholdTable, float]:
    common = dict(
        n=base.n,
        metric=base.metric,
        rounds=base.rounds,
        preset_frr=base.preset_frr,
        seed=base.cal_seed,
        min_class_size=base.min_class_size,
    )
    if base.scope == "global":
        table = calibrate(base.store, CalibrationConfig(scope=GlobalScope(), **common))
        return table, table.global_threshold
    if base.scope == "per-class":
        table: ThresholdTable | None = None
        for cid in base.store.classes():
            part = calibrate(
                base.store, CalibrationConfig(scope=PerClassScope(cid), **common)
            )
            table = part if table is None else table.merged_with(part)
        marker = (
            base.target_class
            if base.target_class is not None
            else base.store.classes()[0]
        )
        return table, table.per_class[marker]
    raise ValidationError(f"unknown sweep scope {base.scope!r}")


def _queries_for(base: SweepBase) -> tuple[list[Query], list[Query]]:
    rng = np.random.default_rng(np.random.SeedSequence(base.eval_seed))
    clean = clean_session_queries(base.heldout, base.clean_sessions, base.m, rng)
    if base.target_class is not None:
        sims = [TriggerSimSpec(base.target_class, base.trigger_sessions)]
    else:
        classes = base.heldout.classes()
        share, extra = divmod(base.trigger_sessions, len(classes))
        sims = [
            TriggerSimSpec(cid, share + (1 if i < extra else 0))
            for i, cid in enumerate(classes)
            if share + (1 if i < extra else 0) > 0
        ]
    trigger: list[Query] = []
    for sim in sims:
        trigger.extend(trigger_session_queries(base.heldout, sim, base.m, rng))
    return clean, trigger


def sweep(axis: str, values: Sequence[object], base: SweepBase) -> list[SweepPoint]:
    """Calibrate and evaluate once per axis value.

    Evaluation randomness is derived from (eval_seed, session index) only, so
    points that share query-building settings see identical queries and
    comparison sets; along the preset_frr axis this makes the measured FAR
    monotone by construction rather than by luck.
    """
    if axis not in SWEEP_AXES:
        raise ValidationError(f"unknown sweep axis {axis!r}; expected {SWEEP_AXES}")
    points: list[SweepPoint] = []
    for value in values:
        if axis == "metric" and isinstance(value, str):
            value = Metric.parse(value)
        current = replace(base, **{_BASE_FIELD[axis]: value})
        table, threshold = _calibrate_for(current)
        clean, trigger = _queries_for(current)
        report = measure_rates(
            current.store,
            table,
            clean,
            trigger,
            current.n,
            current.metric,
            seed=current.eval_seed,
            m=current.m,
        )
        points.append(
            SweepPoint(
                axis=axis, value=value, table=table, threshold=threshold, report=report
            )
        )
    return points


_BASE_FIELD = {
    "n": "n",
    "metric": "metric",
    "preset_frr": "preset_frr",
    "scope": "scope",
}


def sweep_csv(points: Sequence[SweepPoint], cal_seed: int) -> str:
    """Render sweep results with the frozen column order."""
    lines = [CSV_HEADER]
    for p in points:
        value = p.value.value if isinstance(p.value, Metric) else p.value
        r = p.report
        lines.append(
            ",".join(
                [
                    p.axis,
                    str(value),
                    str(r.clean_sessions),
                    str(r.trigger_sessions),
                    docfmt.render_real(r.frr),
                    docfmt.render_real(r.far),
                    docfmt.render_real(r.frr_m),
                    docfmt.render_real(r.far_m),
                    docfmt.render_real(p.threshold),
                    r.metric.value,
                    str(r.n),
                    str(cal_seed),
                ]
            )
        )
    return "\n".join(lines) + "\n"
