"""σBatchNorm layers, the RNI sparsity regulariser and one-shot structured pruning."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import Dataset, load_cifar, synthetic_dataset
from .models import ModelGraph, build_model, build_resnet56, build_vgg16
from .norm import SIGMA, VANILLA, NormChannelState
from .pruning import (GLOBAL, UNIFORM, CostReport, ImportanceTable, PrunePlan, apply_surgery,
                      cost_report, score_model, select, select_global, select_uniform)
from .regularizers import SparsityConfig, rni_gradient, rni_penalty
from .training import TrainConfig, evaluate, finetune, train

__version__ = "0.1.0"
