"""diffground: zero-shot visual grounding via diffusion noise-prediction scoring.

Each detected proposal is rendered in two isolated views (masked for global
context, cropped for local detail), encoded into the latent space of a
text-conditioned diffusion model, noised, and scored by how well the model
predicts that noise given the referring expression. The proposal with the
lowest aggregated error is the grounding prediction.
"""

from .backend import (
    Backend,
    BackendDescriptor,
    BackendUnavailable,
    PretrainedBackend,
    PretrainedConfig,
    SyntheticBackend,
    TextEmbedding,
)
from .dataset import (
    GroundingInstance,
    ImageCache,
    Manifest,
    Proposal,
    convert_refcoco,
    load_image,
    load_manifest,
    subset,
    write_manifest,
)
from .errors import GroundingError
from .evaluation import (
    EvalResult,
    InstanceResult,
    PipelineConfig,
    RandomBaselineResult,
    evaluate,
    random_baseline,
    random_baseline_expectation,
    write_report,
)
from .expression import ExpressionMode, ReferringExpression, process
from .geometry import BoundingBox, ClipCollapse, ImageSize, clip_to_image, iou
from .isolation import (
    DegenerateRegion,
    IsolatedView,
    SourceImage,
    ViewKind,
    crop_isolate,
    mask_isolate,
    snap_box,
)
from .schedule import (
    LatentTensor,
    NoisedLatent,
    NoiseSample,
    NoiseSchedule,
    SeedRecord,
    add_noise,
    make_schedule,
    sample_noise,
)
from .scorer import (
    Aggregation,
    ProposalViews,
    ScoreRecord,
    ScoringConfig,
    score_proposals,
    select,
    view_error,
)
from .version import __version__

__all__ = [
    "Aggregation",
    "Backend",
    "BackendDescriptor",
    "BackendUnavailable",
    "BoundingBox",
    "ClipCollapse",
    "DegenerateRegion",
    "EvalResult",
    "ExpressionMode",
    "GroundingError",
    "GroundingInstance",
    "ImageCache",
    "ImageSize",
    "InstanceResult",
    "IsolatedView",
    "LatentTensor",
    "Manifest",
    "NoiseSample",
    "NoiseSchedule",
    "NoisedLatent",
    "PipelineConfig",
    "PretrainedBackend",
    "PretrainedConfig",
    "Proposal",
    "ProposalViews",
    "RandomBaselineResult",
    "ReferringExpression",
    "ScoreRecord",
    "ScoringConfig",
    "SeedRecord",
    "SourceImage",
    "SyntheticBackend",
    "TextEmbedding",
    "ViewKind",
    "__version__",
    "add_noise",
    "clip_to_image",
    "convert_refcoco",
    "crop_isolate",
    "evaluate",
    "iou",
    "load_image",
    "load_manifest",
    "make_schedule",
    "mask_isolate",
    "process",
    "random_baseline",
    "random_baseline_expectation",
    "sample_noise",
    "score_proposals",
    "select",
    "snap_box",
    "subset",
    "view_error",
    "write_manifest",
    "write_report",
]
