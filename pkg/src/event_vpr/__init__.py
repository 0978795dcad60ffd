"""Event-camera place recognition: event bins -> EST voxel grid -> CNN -> NetVLAD descriptor."""

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DataError,
    EvaluationError,
    EventFormatError,
    EventVPRError,
    ParameterError,
    TrainingAborted,
)
from .events import (
    CameraModel,
    Event,
    EventBin,
    FixedCount,
    FixedDuration,
    read_events,
    simulate_events,
    split_stream,
    write_events,
)
from .evaluation import RecallReport, evaluate_model, recall_at_n
from .mining import GeoTaggedDatabase
from .model import EventVPRNet
from .representations import build_est, kernel_value
from .toyworld import ToyWorldConfig, generate
from .training import geographic_split, load_checkpoint, train
from .vlad import NetVLAD, aggregate, soft_assign

__version__ = "0.1.0"
