"""Metrics, statistical tests and evaluation protocols."""

from .metrics import RankingMetrics, UndefinedMetricError, auc, ndcg, ranking_metrics
from .protocols import (
    CLASSICAL, DEFAULT_METHODS, METHODS, P2_GRID, PROTOCOLS, CellFailure, ProtocolConfig,
    P3_STAGES, ProtocolConfigError, ProtocolResultGrid, run_p3_pipeline, run_protocol_grid,
    synthetic_pair,
)
from .stats import (
    StatConfigError, StatTestResult, avg_incremental_improvement, chi2_sf, friedman_test,
    wilcoxon_null_distribution, wilcoxon_signed_rank,
)
