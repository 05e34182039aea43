"""kNN-distance sequential anomaly detection and localization."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .core import (ConfigError, DataError, Dataset, DetectorConfig, ObservationVector, Partition,
                   derive_seed, load_csv, partition_dataset, save_csv)
from .detectors import (DetectorState, Odit2Model, TrainedModel, build_odit2, run_detector, run_odit_uni,
                        train_odit)
from .localization import LocalizationConfig, LocalizationReport, localize, student_t_threshold

__all__ = [
    "ConfigError", "DataError", "Dataset", "DetectorConfig", "ObservationVector", "Partition",
    "derive_seed", "load_csv", "partition_dataset", "save_csv",
    "DetectorState", "Odit2Model", "TrainedModel", "build_odit2", "run_detector", "run_odit_uni",
    "train_odit", "LocalizationConfig", "LocalizationReport", "localize", "student_t_threshold",
]
