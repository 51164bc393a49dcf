"""Training-free visual token pruning: visual-only attention scoring,
dominant-token selection and stage-wise contextual merging over a toy
encoder/decoder stack."""

from .attention import (
    AttentionTensor,
    Modality,
    ModelConfig,
    TokenSequence,
    attention_layer,
    build_model,
    decoder_forward,
    encoder_forward,
)
from .kernels import BACKEND
from .linalg import make_rng, matmul, rand_matrix, softmax_rows
from .pipeline import (
    CompareReport,
    RunReport,
    compare_strategies,
    flops_attention,
    run_on_dumps,
    run_pipeline,
)
from .pruning import (
    MergePlan,
    PruneSchedule,
    StageBoundary,
    build_schedule,
    default_boundaries,
    fuse,
    match_candidates,
    partition_non_dominant,
    prune_stage,
    select_dominant,
)
from .scoring import (
    ImportanceVector,
    Strategy,
    score_cls_query,
    score_mean_visual_query,
    score_text_guided,
)

__version__ = "0.1.0"
