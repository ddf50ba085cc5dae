"""Desk-scale condition-degradation guidance toolkit.

Token importance from attention graphs, stratified prompt degradation,
guided probability-flow ODE sampling over an analytically exact toy
conditional diffusion model, and geometric diagnostics of guidance signals.
"""

from .degradation import (
    DegradationMask,
    DegradationRatios,
    apply_mask,
    build_mask,
    content_boundary_mask,
    map_ratio,
)
from .diffusion import (
    GmmConditionalModel,
    SamplerRun,
    SigmaSchedule,
    attention_provider,
    denoise,
    log_density,
    sample,
    sample_final_batch,
    score,
)
from .encoder import (
    Condition,
    EncoderParams,
    TokenSequence,
    TokenType,
    ToyTextEncoder,
    tokenize,
)
from .errors import CdgError
from .geometry import (
    GeometryReport,
    PredictionStack,
    decoupling,
    estimate_subspace,
    interference,
    run_geometry_sweep,
)
from .guidance import (
    GuidanceConfig,
    GuidanceMode,
    Prediction,
    combine_cdg,
    combine_cfg,
    combine_cfg_star,
    guidance_delta,
)
from .importance import (
    AttentionMap,
    FusionConfig,
    ImportanceScores,
    cross_attention_baseline,
    fuse_heads,
    head_variance,
    wpr_all_heads,
    wpr_single_head,
)
from .linalg import (
    SvdResult,
    orthonormal_basis,
    principal_angle_sines_squared,
    project_onto,
    thin_svd,
)

__version__ = "0.1.0"
