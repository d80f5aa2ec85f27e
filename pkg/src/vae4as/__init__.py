"""Streaming detection of anomalous sequences under concept drift.

A variational autoencoder scores each instance by reconstruction loss
against an adaptive threshold; a KS test on latent codes and a distance
test on predicted anomalies decide when the model must be replaced.
"""
from .datagen import (LabeledInstance, Normalizer, StreamSpec, builtin_stream, generate_stream,
                      load_csv_stream, make_pretraining_sets, write_csv_stream)
from .detector import compute_threshold, predict, threshold_from_losses
from .drift import (DriftState, calibrate_distance_threshold, ks_two_sample, window_distance,
                    warning_expiry_update)
from .errors import ConfigError, ContractViolation, DataError, NumericalError
from .evaluation import FadedCounts, aggregate_runs, prequential_update, score_alarms
from .pipeline import Pipeline, PipelineConfig
from .vae import VaeModel, load_checkpoint, save_checkpoint, train_on_window
from .windows import SlidingWindow

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractViolation", "DataError", "DriftState", "FadedCounts",
    "LabeledInstance", "Normalizer", "NumericalError", "Pipeline", "PipelineConfig",
    "SlidingWindow", "StreamSpec", "VaeModel", "aggregate_runs", "builtin_stream",
    "calibrate_distance_threshold", "compute_threshold", "generate_stream", "ks_two_sample",
    "load_checkpoint", "load_csv_stream", "make_pretraining_sets", "predict",
    "prequential_update", "save_checkpoint", "score_alarms", "threshold_from_losses",
    "train_on_window", "warning_expiry_update", "window_distance", "write_csv_stream",
]
