"""mdgkit: domain re-labeling methods for zero-shot multi-domain
generalization, with a reverse-mode differentiation core, synthetic
multi-domain data, and a leave-one-domain-out benchmark harness."""

from .autodiff import (
    GradientVector,
    NumericFault,
    ScalarExpression,
    grad_dot,
    gradient,
    hvp,
    kernel_backend_name,
)
from .clustering import kmeans_cluster
from .datagen import (
    Batch,
    Dataset,
    DomainSplit,
    PooledBatchSampler,
    TrainView,
    augment_meta_validation,
    generate_latent_group_blobs,
    generate_rotated_moons,
    split_domain,
)
from .dreame import (
    AssignmentSets,
    DreameConfig,
    Ensemble,
    MRSMatrix,
    assign_batches,
    compute_mrs,
    ensemble_predict,
    inner_update,
    meta_gradient,
    train_dreame,
)
from .dro import (
    DROConfig,
    ERMConfig,
    GroupWeights,
    erm_step,
    groupdro_pp_objective,
    relabel_groups,
    train_erm,
    train_groupdro,
    train_groupdro_pp,
    update_group_weights,
)
from .harness import (
    ExperimentConfig,
    ResultTable,
    aggregate_results,
    run_leave_one_out,
    run_single,
)
from .metrics import accuracy, adjusted_rand_index, worst_group_accuracy
from .models import MLPParams, MLPSpec, cross_entropy, forward_features, forward_logits, init_mlp
from .selection import CheckpointRecord, select_overall_avg, select_overall_ens

__version__ = "0.1.0"
