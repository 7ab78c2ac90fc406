"""Threshold calibration from intra- and inter-class similarity samples.

Each calibration round picks an anchor record, scores it against n records of
its own class (excluding itself) and against n records of one other class,
and the resulting two empirical distributions drive the threshold choice:
either by ranking (empirical quantile) or by fitting a gamma-family model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from . import docfmt
from .errors import (
    FormatError,
    InsufficientRecordsError,
    IoError,
    UnknownClassError,
    ValidationError,
)
from .featstore import ValidationStore, sample_comparison_set
from .simdist import Metric, mean_similarity

METHOD_RANKING = "ranking"
METHOD_FIT = "fit-gamma-family"

# Offset used to keep log-domain transforms strictly positive.
LOG_SHIFT = 1e-6


# ---------------------------------------------------------------------------
# configuration and scopes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlobalScope:
    """Anchors drawn record-uniformly over the whole store."""


@dataclass(frozen=True)
class PerClassScope:
    """Anchors drawn from one class; yields a per-class table entry."""

    class_id: int


@dataclass(frozen=True)
class SubsetScope:
    """Anchors drawn record-uniformly over the listed classes only."""

    class_ids: tuple[int, ...]


Scope = GlobalScope | PerClassScope | SubsetScope


@dataclass(frozen=True)
class CalibrationConfig:
    n: int
    metric: Metric
    rounds: int = 1000
    preset_frr: float | None = None
    preset_far: float | None = None
    method: str = METHOD_RANKING
    scope: Scope = GlobalScope()
    seed: int = 0
    min_class_size: int = 11
    donor_exclude: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValidationError(f"comparison set size must be >= 1, got {self.n}")
        if self.rounds < 100:
            raise ValidationError(f"rounds must be >= 100, got {self.rounds}")
        if (self.preset_frr is None) == (self.preset_far is None):
            raise ValidationError("exactly one of preset_frr / preset_far must be set")
        preset = self.preset_frr if self.preset_frr is not None else self.preset_far
        if not 0.0 < preset < 1.0:
            raise ValidationError(f"preset rate must lie in (0, 1), got {preset}")
        if self.method not in (METHOD_RANKING, METHOD_FIT):
            raise ValidationError(f"unknown method {self.method!r}")
        if self.min_class_size < 1:
            raise ValidationError("min_class_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must fit in an unsigned 64-bit integer")


# ---------------------------------------------------------------------------
# sample collection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilaritySamples:
    """Paired intra/inter score samples, one of each per round."""

    intra: np.ndarray
    inter: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "intra", np.asarray(self.intra, dtype=np.float64))
        object.__setattr__(self, "inter", np.asarray(self.inter, dtype=np.float64))
        if self.intra.ndim != 1 or self.inter.ndim != 1:
            raise ValidationError("samples must be 1-D sequences")
        if self.intra.shape != self.inter.shape:
            raise ValidationError("intra and inter sample counts differ")
        if self.intra.size and not (
            np.isfinite(self.intra).all() and np.isfinite(self.inter).all()
        ):
            raise ValidationError("samples contain non-finite scores")

    @property
    def rounds(self) -> int:
        return int(self.intra.shape[0])


def _anchor_pool(store: ValidationStore, cfg: CalibrationConfig) -> np.ndarray:
    scope = cfg.scope
    if isinstance(scope, GlobalScope):
        classes = store.classes()
        pool = np.arange(store.count)
    elif isinstance(scope, PerClassScope):
        classes = [scope.class_id]
        pool = store.positions(scope.class_id)
        size = len(pool)
        if size < cfg.min_class_size:
            raise InsufficientRecordsError(
                f"class {scope.class_id} has {size} records, per-class "
                f"calibration requires at least {cfg.min_class_size}"
            )
    elif isinstance(scope, SubsetScope):
        if not scope.class_ids:
            raise ValidationError("subset scope lists no classes")
        classes = sorted(set(scope.class_ids))
        pool = np.concatenate([store.positions(c) for c in classes])
    else:
        raise ValidationError(f"unknown scope {scope!r}")

    for cid in classes:
        if store.class_count(cid) < cfg.n + 1:
            raise InsufficientRecordsError(
                f"class {cid} has {store.class_count(cid)} records, "
                f"need at least {cfg.n + 1} (comparison set plus anchor)"
            )
    if pool.size == 0:
        raise ValidationError("anchor pool is empty")
    return pool


def collect_samples(store: ValidationStore, cfg: CalibrationConfig) -> SimilaritySamples:
    """Run cfg.rounds calibration rounds and collect one intra and one inter
    score per round.

    Each round draws from its own sub-seed derived from (cfg.seed, round
    index), so results do not depend on execution order. Within a round the
    draw order is fixed: anchor, intra set, donor class, inter set.
    """
    pool = _anchor_pool(store, cfg)
    excluded = set(cfg.donor_exclude)
    donor_eligible = {
        cid for cid in store.classes()
        if cid not in excluded and store.class_count(cid) >= cfg.n
    }

    intra = np.empty(cfg.rounds, dtype=np.float64)
    inter = np.empty(cfg.rounds, dtype=np.float64)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.rounds)
    for r in range(cfg.rounds):
        rng = np.random.default_rng(children[r])
        anchor = int(pool[rng.integers(pool.size)])
        anchor_class = int(store.class_ids[anchor])
        x = store.vectors[anchor]

        same = sample_comparison_set(store, anchor_class, cfg.n, rng, exclude=anchor)
        intra[r] = mean_similarity(x, same.vectors, cfg.metric)

        donors = sorted(donor_eligible - {anchor_class})
        if not donors:
            raise InsufficientRecordsError(
                f"no eligible donor class for anchors of class {anchor_class}"
            )
        donor = donors[int(rng.integers(len(donors)))]
        other = sample_comparison_set(store, donor, cfg.n, rng)
        inter[r] = mean_similarity(x, other.vectors, cfg.metric)
    return SimilaritySamples(intra=intra, inter=inter)


# ---------------------------------------------------------------------------
# threshold selection
# ---------------------------------------------------------------------------

def threshold_by_ranking(samples: SimilaritySamples, preset_frr: float) -> float:
    """Empirical quantile of the intra scores: with N rounds, the value at
    ascending index ceil(preset_frr * N) - 1, so at most a preset_frr
    fraction of intra scores falls strictly below it."""
    if not 0.0 < preset_frr < 1.0:
        raise ValidationError(f"preset_frr must lie in (0, 1), got {preset_frr}")
    if samples.rounds == 0:
        raise ValidationError("cannot rank an empty sample set")
    ordered = np.sort(samples.intra)
    idx = math.ceil(preset_frr * samples.rounds) - 1
    return float(ordered[idx])


def threshold_by_far(samples: SimilaritySamples, preset_far: float) -> float:
    """Mirror of the ranking rule on the inter scores sorted descending:
    returns the lowest value keeping the fraction of inter scores at or above
    it within preset_far. When even the maximum would exceed the preset
    (preset_far * N < 1), the next float above the maximum is returned."""
    if not 0.0 < preset_far < 1.0:
        raise ValidationError(f"preset_far must lie in (0, 1), got {preset_far}")
    if samples.rounds == 0:
        raise ValidationError("cannot rank an empty sample set")
    ordered = np.sort(samples.inter)[::-1]
    kept = math.floor(preset_far * samples.rounds)
    if kept < 1:
        return float(np.nextafter(ordered[0], np.inf))
    return float(ordered[kept - 1])


@dataclass(frozen=True)
class GammaFit:
    """A gamma model fitted to (optionally log-transformed) shifted samples.

    family "gamma":     value - shift ~ Gamma(shape, scale)
    family "log-gamma": -log(1 + LOG_SHIFT - value) - shift ~ Gamma(shape, scale)
    """

    family: str
    shape: float
    scale: float
    shift: float

    def _to_support(self, value: np.ndarray | float) -> np.ndarray | float:
        if self.family == "log-gamma":
            return -np.log(1.0 + LOG_SHIFT - np.asarray(value)) - self.shift
        return np.asarray(value) - self.shift

    def cdf(self, value: float) -> float:
        y = self._to_support(value)
        return float(special.gammainc(self.shape, np.maximum(y, 0.0) / self.scale))

    def ppf(self, p: float) -> float:
        if not 0.0 < p < 1.0:
            raise ValidationError(f"quantile level must lie in (0, 1), got {p}")
        y = self.scale * special.gammaincinv(self.shape, p)
        if self.family == "log-gamma":
            return float(1.0 + LOG_SHIFT - math.exp(-(y + self.shift)))
        return float(y + self.shift)


def _gamma_mle(y: np.ndarray) -> tuple[float, float]:
    # Method-of-moments start, then Newton steps on the profile likelihood
    # equation log(a) - psi(a) = log(mean) - mean(log).
    mean = float(y.mean())
    var = float(y.var())
    if var < 1e-24:
        raise ValidationError("degenerate variance, cannot fit a gamma model")
    shape = mean * mean / var
    s = math.log(mean) - float(np.log(y).mean())
    if s <= 0.0:
        raise ValidationError("degenerate sample spread, cannot fit a gamma model")
    for _ in range(100):
        num = math.log(shape) - float(special.digamma(shape)) - s
        den = 1.0 / shape - float(special.polygamma(1, shape))
        step = num / den
        shape_next = shape - step
        if shape_next <= 0.0:
            shape_next = shape / 2.0
        if abs(shape_next - shape) < 1e-9:
            shape = shape_next
            break
        shape = shape_next
    return shape, mean / shape


def fit_gamma_family(samples: np.ndarray, family: str) -> GammaFit:
    """Fit "gamma" or "log-gamma" to a sample sequence of at least 100 values.

    The support is shifted automatically so the smallest (transformed) sample
    maps to +1e-6; the shift is recorded on the returned fit.
    """
    values = np.asarray(samples, dtype=np.float64)
    if values.ndim != 1:
        raise ValidationError("samples must be a 1-D sequence")
    if values.size < 100:
        raise ValidationError(f"need at least 100 samples to fit, got {values.size}")
    if not np.isfinite(values).all():
        raise ValidationError("samples contain non-finite values")
    if family == "log-gamma":
        if float(values.max()) > 1.0 + LOG_SHIFT / 2:
            raise ValidationError("log-gamma transform requires values <= 1")
        work = -np.log(1.0 + LOG_SHIFT - values)
    elif family == "gamma":
        work = values
    else:
        raise ValidationError(f"unknown gamma family {family!r}")
    shift = float(work.min()) - LOG_SHIFT
    y = work - shift
    if float(y.min()) <= 0.0:
        raise ValidationError("non-positive support after shift")
    shape, scale = _gamma_mle(y)
    return GammaFit(family=family, shape=shape, scale=scale, shift=shift)


# ---------------------------------------------------------------------------
# threshold table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Provenance:
    preset: str
    preset_value: float
    method: str
    seed: int
    rounds: int


@dataclass
class ThresholdTable:
    """Calibrated thresholds plus the settings needed to reproduce them.

    lookup() falls back from a per-class entry to the global one; at least
    one of the two must be present.
    """

    metric: Metric
    n: int
    rounds: int
    seed: int
    method: str
    global_threshold: float | None = None
    per_class: dict[int, float] = field(default_factory=dict)
    provenance: dict[str, Provenance] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.global_threshold is None and not self.per_class:
            raise ValidationError("threshold table has no entries")

    def lookup(self, class_id: int) -> float:
        if class_id in self.per_class:
            return self.per_class[class_id]
        if self.global_threshold is not None:
            return self.global_threshold
        raise UnknownClassError(
            f"no per-class threshold for class {class_id} and no global fallback"
        )

    def merged_with(self, other: "ThresholdTable") -> "ThresholdTable":
        """Combine per-class entries calibrated with the same settings."""
        if (other.metric, other.n) != (self.metric, self.n):
            raise ValidationError("cannot merge tables with different metric or n")
        merged = ThresholdTable(
            metric=self.metric,
            n=self.n,
            rounds=self.rounds,
            seed=self.seed,
            method=self.method,
            global_threshold=(
                self.global_threshold
                if self.global_threshold is not None
                else other.global_threshold
            ),
            per_class={**self.per_class, **other.per_class},
        )
        merged.provenance = {**self.provenance, **other.provenance}
        return merged


_METRIC_TO_DOC = {
    Metric.COSINE: ("cosine", "standard"),
    Metric.PEARSON: ("pearson", "standard"),
    Metric.TANIMOTO: ("tanimoto", "standard"),
    Metric.TANIMOTO_PAPER: ("tanimoto", "paper"),
}
_DOC_TO_METRIC = {pair: metric for metric, pair in _METRIC_TO_DOC.items()}
_PROV_FIELDS = ("preset", "preset_value", "method", "seed", "rounds")


def table_dumps(table: ThresholdTable) -> str:
    """Canonical serialization: fixed key order, per-class entries ascending,
    reals at 17 significant digits. Byte-stable across load/dump cycles."""
    metric_name, variant = _METRIC_TO_DOC[table.metric]
    pairs = [
        ("metric", metric_name),
        ("variant", variant),
        ("n", str(table.n)),
        ("rounds", str(table.rounds)),
        ("seed", str(table.seed)),
        ("method", table.method),
    ]
    if table.global_threshold is not None:
        pairs.append(("global", docfmt.render_real(table.global_threshold)))
    for cid in sorted(table.per_class):
        pairs.append((f"per_class.{cid}", docfmt.render_real(table.per_class[cid])))

    def prov_pairs(key: str, prov: Provenance) -> list[tuple[str, str]]:
        rendered = {
            "preset": prov.preset,
            "preset_value": docfmt.render_real(prov.preset_value),
            "method": prov.method,
            "seed": str(prov.seed),
            "rounds": str(prov.rounds),
        }
        return [(f"provenance.{key}.{name}", rendered[name]) for name in _PROV_FIELDS]

    if "global" in table.provenance:
        pairs.extend(prov_pairs("global", table.provenance["global"]))
    for key in sorted(
        (k for k in table.provenance if k.startswith("class.")),
        key=lambda k: int(k.split(".", 1)[1]),
    ):
        pairs.extend(prov_pairs(key, table.provenance[key]))
    return docfmt.render_kv(pairs)


def table_loads(text: str) -> ThresholdTable:
    fields: dict[str, str] = {}
    per_class: dict[int, float] = {}
    prov_raw: dict[str, dict[str, str]] = {}
    for key, value in docfmt.parse_kv(text):
        if key.startswith("per_class."):
            try:
                per_class[int(key.split(".", 1)[1])] = float(value)
            except ValueError as exc:
                raise FormatError(f"bad per-class entry {key}={value}") from exc
        elif key.startswith("provenance."):
            entry, _, name = key[len("provenance."):].rpartition(".")
            if not entry or name not in _PROV_FIELDS:
                raise FormatError(f"bad provenance key {key!r}")
            prov_raw.setdefault(entry, {})[name] = value
        elif key in fields:
            raise FormatError(f"duplicate key {key!r}")
        else:
            fields[key] = value
    try:
        metric = _DOC_TO_METRIC[(fields["metric"], fields["variant"])]
        table = ThresholdTable(
            metric=metric,
            n=int(fields["n"]),
            rounds=int(fields["rounds"]),
            seed=int(fields["seed"]),
            method=fields["method"],
            global_threshold=(
                float(fields["global"]) if "global" in fields else None
            ),
            per_class=per_class,
        )
    except KeyError as exc:
        raise FormatError(f"missing or unknown field: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"bad field value: {exc}") from exc
    for entry, items in prov_raw.items():
        missing = [name for name in _PROV_FIELDS if name not in items]
        if missing:
            raise FormatError(f"provenance.{entry} missing {missing}")
        table.provenance[entry] = Provenance(
            preset=items["preset"],
            preset_value=float(items["preset_value"]),
            method=items["method"],
            seed=int(items["seed"]),
            rounds=int(items["rounds"]),
        )
    return table


def table_write(table: ThresholdTable, path: str | Path) -> None:
    try:
        Path(path).write_text(table_dumps(table), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def table_read(path: str | Path) -> ThresholdTable:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return table_loads(text)


# ---------------------------------------------------------------------------
# calibration entry point
# ---------------------------------------------------------------------------

def calibrate(store: ValidationStore, cfg: CalibrationConfig) -> ThresholdTable:
    """Collect similarity samples under cfg and derive one threshold entry:
    global (for global and subset scopes) or per-class."""
    samples = collect_samples(store, cfg)
    if cfg.preset_frr is not None:
        if cfg.method == METHOD_RANKING:
            threshold = threshold_by_ranking(samples, cfg.preset_frr)
        else:
            fit = fit_gamma_family(samples.intra, "log-gamma")
            threshold = fit.ppf(cfg.preset_frr)
        prov = Provenance("frr", cfg.preset_frr, cfg.method, cfg.seed, cfg.rounds)
    else:
        if cfg.method == METHOD_RANKING:
            threshold = threshold_by_far(samples, cfg.preset_far)
        else:
            fit = fit_gamma_family(samples.inter, "gamma")
            threshold = fit.ppf(1.0 - cfg.preset_far)
        prov = Provenance("far", cfg.preset_far, cfg.method, cfg.seed, cfg.rounds)

    if isinstance(cfg.scope, PerClassScope):
        return ThresholdTable(
            metric=cfg.metric,
            n=cfg.n,
            rounds=cfg.rounds,
            seed=cfg.seed,
            method=cfg.method,
            per_class={cfg.scope.class_id: threshold},
            provenance={f"class.{cfg.scope.class_id}": prov},
        )
    return ThresholdTable(
        metric=cfg.metric,
        n=cfg.n,
        rounds=cfg.rounds,
        seed=cfg.seed,
        method=cfg.method,
        global_threshold=threshold,
        provenance={"global": prov},
    )


# ---------------------------------------------------------------------------
# multi-trial planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiTrialPlan:
    """Closed-form session rates for an m-trial policy with independent
    trials: a session is rejected only if all m trials reject, and a trigger
    session is accepted if any trial accepts."""

    m: int
    per_trial_frr: float
    per_trial_far: float
    session_frr: float = field(init=False)
    session_far: float = field(init=False)

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValidationError(f"trial count must be >= 1, got {self.m}")
        for name in ("per_trial_frr", "per_trial_far"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {rate}")
        object.__setattr__(self, "session_frr", self.per_trial_frr**self.m)
        # m == 1 must be an exact identity; the complement round-trips with a
        # one-ulp wobble otherwise
        session_far = (
            self.per_trial_far
            if self.m == 1
            else 1.0 - (1.0 - self.per_trial_far) ** self.m
        )
        object.__setattr__(self, "session_far", session_far)


def plan_multi_trial(per_trial_frr: float, per_trial_far: float, m: int) -> MultiTrialPlan:
    return MultiTrialPlan(m=m, per_trial_frr=per_trial_frr, per_trial_far=per_trial_far)
