"""Trajectory-prior retrieval: encoder training, vector index and prompt assembly."""

from ._trajprior import (
    ConfigError,
    DimensionError,
    Error,
    FormatError,
    MemoryQueue,
    RetrievalIndex,
    Scene,
    StageDependencyError,
    brute_force_knn,
    collision_at_horizons,
    cosine_distance,
    default_config,
    fft2d,
    generate_corpus,
    info_nce,
    kmeans,
    l2_at_horizons,
    random_unit_vectors,
    regression_loss,
    run_pipeline,
    run_stage,
    stages,
)


def _stringify(config):
    return {k: (str(v).lower() if isinstance(v, bool) else str(v)) for k, v in (config or {}).items()}


_run_stage, _run_pipeline = run_stage, run_pipeline


def run_stage(stage, config=None):  # noqa: F811
    """Run one pipeline stage; config values may be any str()-able type."""
    _run_stage(stage, _stringify(config))


def run_pipeline(config=None):  # noqa: F811
    _run_pipeline(_stringify(config))


__all__ = [name for name in dir() if not name.startswith("_")]
