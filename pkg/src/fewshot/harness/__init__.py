"""Experiment orchestration: configs, seeding, runs, groups and reporting."""
from .config import ConfigError, RunConfig, parse_config, parse_config_text
from .run import (
    GroupFailure,
    MetricsRecord,
    PlotDataError,
    RunFailure,
    StatisticsError,
    emit_plot_data,
    format_ci,
    load_record,
    parse_ci,
    report_ci,
    run_experiment,
    run_group,
)
from .seeding import STREAMS, SeedTree, seed_everything

__all__ = [
    "ConfigError", "RunConfig", "parse_config", "parse_config_text", "GroupFailure", "MetricsRecord",
    "PlotDataError", "RunFailure", "StatisticsError", "emit_plot_data", "format_ci", "load_record",
    "parse_ci", "report_ci", "run_experiment", "run_group", "STREAMS", "SeedTree", "seed_everything",
]
