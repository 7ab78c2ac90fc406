"""Similarity-based screening of model inputs against validated records.

A model under test predicts a class for each input; the input's embedding is
compared against a sampled set of validated records of that class, and mean
similarity below a calibrated threshold flags the input. The package covers
store handling (featstore), similarity kernels (simdist), threshold
calibration (calibrate), per-query and session detection (detect), the
synthetic evaluation harness (evalharness), and a CLI plus socket service
(cli, gateway).
"""

from .calibrate import (
    CalibrationConfig,
    GammaFit,
    GlobalScope,
    MultiTrialPlan,
    PerClassScope,
    Provenance,
    SimilaritySamples,
    SubsetScope,
    ThresholdTable,
    calibrate,
    collect_samples,
    fit_gamma_family,
    plan_multi_trial,
    table_dumps,
    table_loads,
    table_read,
    table_write,
    threshold_by_far,
    threshold_by_ranking,
)
from .detect import Query, TrialSession, Verdict, detect_one, detect_session
from .errors import (
    DegenerateMetricError,
    FormatError,
    InfeasibleGeometryError,
    InsufficientRecordsError,
    IoError,
    MetricMismatchError,
    NtdError,
    UnknownClassError,
    ValidationError,
)
from .evalharness import (
    EvalReport,
    LatencyRow,
    StubExtractor,
    SweepBase,
    SyntheticSpec,
    TriggerSimSpec,
    bench_latency,
    clean_session_queries,
    generate_synthetic,
    measure_rates,
    sample_cluster,
    sweep,
    sweep_csv,
    trigger_session_queries,
)
from .featstore import (
    ComparisonSet,
    ValidationStore,
    manifest_read,
    manifest_write,
    sample_comparison_set,
    store_read,
    store_write,
)
from .gateway import GatewayClient, GatewayServer, request_rng
from .simdist import Metric, cosine, mean_similarity, pairwise, pearson, tanimoto

__version__ = "0.1.0"
