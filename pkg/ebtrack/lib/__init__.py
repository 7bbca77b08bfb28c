from .base import CoreTracker, select_best, smoothness
from .config import (
    EdgeConfig,
    ProposalConfig,
    RerankConfig,
    RunConfig,
    TrackerConfig,
    apply_overrides,
    load_config,
    parse_assignments,
)
from .edgemap import EdgeStructures, build_edge_structures
from .evalharness import (
    MetricCurves,
    OpeResult,
    SynthSequence,
    SynthSpec,
    Teleport,
    aggregate,
    build_suite,
    compute_curves,
    load_synth_spec,
    proposal_bound,
    reacquisition,
    resample_lowfps,
    run_batch,
    run_ope,
    synth_sequence,
    write_sequence,
)
from .imgio import BoundingBox, Image, iou, load_ground_truth, load_image, load_sequence
from .ncctracker import NccTracker
from .objectness import ScoredBox, propose, score_box, score_boxes
from .pipeline import FrameRecord, ProposalTracker, track_sequence
from .rerank import RerankModel, init_rerank, rerank_select, update_rerank
from .sstracker import EbtTracker, StructuredSvm, extract_feature, intersection_kernel
