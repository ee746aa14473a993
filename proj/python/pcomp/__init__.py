"""Persona/task residual decomposition and causal intervention."""

from ._core import (
    SCHEMA_VERSION,
    TOY_MODEL_ID,
    ArtifactError,
    Backend,
    BackendError,
    CellCapture,
    ConfigError,
    Dtype,
    Error,
    ForwardOutput,
    GenerateOutput,
    ModelHandle,
    ModelInfo,
    NonFiniteError,
    Site,
    ValidationError,
    Write,
    builtin_marker_sets,
    capture,
    capture_cell,
    causal_kl,
    decompose,
    describe_model,
    emit_table,
    generate_greedy,
    grid_cells,
    host_injection,
    known_models,
    load_model,
    long_grid,
    match_markers,
    normalize_text,
    parse_dtype,
    percentile,
    quantiles,
    read_artifact,
    register_backend,
    run_experiment,
    short_grid,
    teacher_forced_distributions,
    write_curves,
)

__version__ = "0.1.0"
