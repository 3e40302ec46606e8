"""rankdistill: desk-scale distillation of late- and cross-interaction
rankers into dense dual-encoder retrievers, on a self-contained autodiff
stack with synthetic retrieval tasks and exact brute-force evaluation."""

from .encoder import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    CrossOutput,
    EncodedSequence,
    EncoderConfig,
    EncoderModel,
    TokenSequence,
    extract_cross_attention,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ParameterError,
    SequenceLengthError,
    TaskSpecError,
    VocabularyError,
)
from .evaluation import EvalData, evaluate_model
from .interaction import (
    ScoreDistribution,
    ScoreSet,
    cross_score,
    late_attention_maps,
    late_score,
    metric_score,
    score_candidates,
    to_distribution,
)
from .losses import (
    DistillBatch,
    LossBundle,
    LossFlags,
    QueryEntry,
    attention_distill,
    cascade_loss,
    contrastive_nll,
    distill_kl,
    dual_reg,
    interaction_distill_loss,
)
from .metrics import mean_mrr_at_k, mrr_at_k, recall_at_k
from .optim import Adam
from .retrieval import (
    PassageIndex,
    RankedList,
    build_index,
    load_index,
    retrieve,
    retrieve_topk,
    save_index,
)
from .rng import RngState
from .tensor import Tensor, backward, gradient_check, no_grad
from .trainer import (
    TrainConfig,
    TrainLog,
    TrainingExample,
    build_candidate_list,
    build_training_set,
    dual_reg_forward,
    mine_negatives,
    train_cascade,
    train_interaction_distillation,
)

__version__ = "0.1.0"
