"""Lifelong unsupervised domain adaptation engine for retrieval tasks.

Adapts a small retrieval model to a staged stream of unlabeled data while
protecting earlier knowledge: replayed samples from an identity-balanced
reservoir memory are folded into each update through a first-order two-stage
meta step, and an EMA historical model supplies affinity and KL consistency
targets. Ships with a synthetic benchmark, CMC/mAP evaluation and a CLI.
"""

from .clustering import ClusterConfig, LabelAssignment, NOISE, cluster, refresh_labels
from .config import RunConfig, load_config
from .data import Batch, Sample, evaluation_access
from .errors import (
    ClusteringFailure,
    ConfigurationError,
    NumericError,
    ProtocolError,
)
from .evaluation import (
    MetricRecord,
    cmc_rank1,
    evaluate_split,
    mean_average_precision,
    rank_gallery,
    run_protocol,
)
from .losses import (
    LossPlan,
    LossReport,
    adaptation_loss,
    antiforgetting_loss,
    classification_loss,
    kl_consistency_loss,
    relational_consistency_loss,
    triplet_loss,
)
from .memory import FifoBuffer, InstanceBuffer, MemoryBuffer, make_buffer
from .model import (
    ModelConfig,
    ModelParams,
    ema_update,
    forward,
    gem_pool,
    grow_classifier,
    load_checkpoint,
    save_checkpoint,
)
from .optim import (
    CdrConfig,
    OptimizerState,
    adam_apply,
    finite_difference_check,
    joint_step,
    meta_step,
    taylor_alignment_diagnostic,
)
from .runner import LudaRunner, pretrain_source, resolve_method
from .stream import DomainSpec, StreamConfig, SyntheticStream, sample_pk_batch

__version__ = "0.1.0"
