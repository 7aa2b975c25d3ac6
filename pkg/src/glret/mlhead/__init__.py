"""Cosine-softmax metric-learning head, its trainer, checkpoints and synthetic data."""

from .checkpoint import CheckpointError, load_head, read_glrh, save_head, write_glrh
from .head import (
    ClassWeights,
    CosineHead,
    Gradients,
    backward,
    batch_loss_and_grads,
    class_weights,
    extract_embeddings,
    fixed_adacos_scale,
    forward,
    forward_batch,
    init_head,
    log_softmax,
    reinit_classifier,
    sample_losses,
    weighted_ce_loss,
)
from .synthetic import LabeledEmbeddings, SyntheticDataset, default_clean_classes, gen_synthetic
from .trainer import (
    EpochStats,
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    class_weights_for,
    evaluate_loss,
    sgd_step,
    train,
    zero_velocity,
)
