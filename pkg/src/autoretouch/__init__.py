"""Background replacement and foreground placement toolkit.

The package trains a multitask verifier that scores how well a cut-out
foreground matches a background (content) and how plausible its location
and scale are (spatial), then uses that model to rank candidate backgrounds
and to refine the foreground's pose by multi-start numerical gradient ascent.
"""

from .adjuster import (
    AscentConfig,
    Trajectory,
    adjust_multistart,
    analytic_scorer,
    ascend,
    make_model_scorer,
    numerical_gradient,
    score_at,
)
from .dataforge import (
    Manifest,
    Sample,
    SceneTriple,
    SynthParams,
    build_dataset,
    make_content_negative,
    make_positive,
    make_spatial_negative,
    synth_corpus,
    synth_scene,
)
from .imaging import (
    ForegroundPatch,
    Image,
    ParsingMap,
    Placement,
    composite,
    max_displacement,
    prepare_encoder_input,
    render_foreground_canvas,
)
from .pipeline import Gallery, RetouchConfig, RetouchReport, gallery_build, rank_backgrounds, retouch
from .scoring import SpatialScoreSpec, gelu, spatial_score
from .trainer import MetricsReport, TrainConfig, ablate_attention, evaluate, train
from .verifier import (
    VerifierConfig,
    VerifierNet,
    VerifierOutput,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
