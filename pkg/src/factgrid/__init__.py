"""factgrid: flat, forked, and bilinearly factorized adjective-noun pair
classifiers with hand-derived backprop, masked-softmax training over seen
pairs, and a seen/unseen evaluation protocol for zero-shot pair labels."""

__version__ = "0.1.0"

from .data import (
    Example,
    PairVocab,
    SynthConfig,
    build_vocab,
    generate_synthetic,
    prune_vocab,
    read_feature_file,
    select_unseen,
    split_by_uploader,
    write_feature_file,
)
from .evaluation import (
    EvalReport,
    RetrievalResult,
    accuracy_gap_report,
    retrieve,
    topk_accuracy,
    topk_hit,
)
from .heads import FactHead, FlatHead, ForkHead, Model, Trunk, build_model
from .nn import (
    LinearLayer,
    MaskedDistribution,
    PReLULayer,
    cross_entropy,
    grad_check,
    masked_softmax,
    matmul,
)
from .optim import SgdConfig, poly_lr, sgd_step, train_epochs
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Example",
    "EvalReport",
    "FactHead",
    "FlatHead",
    "ForkHead",
    "LinearLayer",
    "MaskedDistribution",
    "Model",
    "PReLULayer",
    "PairVocab",
    "RetrievalResult",
    "SgdConfig",
    "SynthConfig",
    "Trunk",
    "accuracy_gap_report",
    "build_model",
    "build_vocab",
    "cross_entropy",
    "generate_synthetic",
    "grad_check",
    "load_checkpoint",
    "masked_softmax",
    "matmul",
    "poly_lr",
    "prune_vocab",
    "read_feature_file",
    "retrieve",
    "save_checkpoint",
    "select_unseen",
    "sgd_step",
    "split_by_uploader",
    "topk_accuracy",
    "topk_hit",
    "train_epochs",
    "write_feature_file",
]
