from .lib import (
    BoundingBox,
    CoreTracker,
    EbtTracker,
    Image,
    MetricCurves,
    NccTracker,
    ProposalTracker,
    RunConfig,
    SynthSpec,
    compute_curves,
    load_config,
    load_sequence,
    propose,
    run_ope,
    synth_sequence,
    track_sequence,
)
from .utils import ConfigError, DataError, EbtrackError, TrackingError

__version__ = "0.1.0"
