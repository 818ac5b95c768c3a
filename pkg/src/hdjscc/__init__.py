"""Hybrid digital-analog JSCC for an analog access hop followed by a digital backhaul."""
from .channels import ChannelState, transmit
from .config import ExperimentConfig, load_config
from .errors import (CheckpointVersionError, ConfigurationError, CorruptedStreamError, HDJSCCError, ShapeError,
                     TrainingDivergenceError)
from .pipeline import HDJSCC, decompress, hdjscc_deploy

__version__ = "0.1.0"
