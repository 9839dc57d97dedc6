"""Desk-scale modality-aware sparse transformer lab.

Width sparsity routes tokens to modality-grouped experts with expert-choice
capacity; depth sparsity lets a learned router skip whole layers; auxiliary
routers restore causality at inference; upcycling grows a trained
one-expert-per-modality seed into a multi-expert model. Everything runs on
a small numpy tensor engine with reverse-mode autodiff.
"""

from .analysis import (
    FlopsReport,
    LossCurve,
    count_flops,
    noise_sensitivity_sweep,
    simulate_step_latency,
    speedup_eta,
)
from .aux_router import AuxRouterSet, AuxTrainConfig, causal_select, train_aux_routers
from .balance import BatchComposer, MixPolicy
from .checkpoint import Checkpoint
from .data import (
    IMAGE,
    TEXT,
    CorpusConfig,
    CorpusGenerator,
    TokenBatch,
    VocabSpec,
    generate_batch,
    modality_partition,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    MomaError,
    ShapeError,
)
from .model import (
    INFER,
    TRAIN,
    LossBreakdown,
    ModelConfig,
    TransformerModel,
    named_config,
)
from .optim import AdamW, AdamWConfig, Schedule
from .routing import (
    CapacitySpec,
    RouterParams,
    RoutingAssignment,
    affinity_scores,
    expert_choice_select,
    gumbel_sigmoid_scores,
    perturb_selection,
)
from .tensor import ComputationTape, Tensor, no_grad, set_validation
from .train import RunConfig, Trainer, evaluate
from .upcycle import UpcyclePlan, flops_adjusted_curve, upcycle_checkpoint

__version__ = "0.1.0"
