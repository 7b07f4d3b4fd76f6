"""seglora: low-rank adapter fine-tuning for a desk-scale promptable
segmentation network, with composite losses and a reproducible
ablation / prompt-mode evaluation harness."""

from .backbone import (DecoderConfig, EncoderConfig, PromptSet, SegmentationModel,
                       build_model)
from .data import SegSample, SynthConfig, augment, generate_sample, load_dataset
from .evaluation import (ABLATIONS, EVAL_MODES, EvalReport, GridDataset,
                         auc_score, dice_score, paired_t_test, run_grid,
                         sample_prompts)
from .lora import LoraConfig, inject, merge_adapters, save_adapters, trainable_fraction
from .losses import (CompositeWeights, TverskyParams, bce_loss, composite_loss,
                     focal_tversky_loss, soft_dice_loss)
from .numerics import Tensor, gradient_check, no_grad
from .optim import TrainConfig, lr_at, train_adapters

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "EVAL_MODES", "CompositeWeights", "DecoderConfig",
    "EncoderConfig", "EvalReport", "GridDataset", "LoraConfig", "PromptSet",
    "SegmentationModel", "SegSample", "SynthConfig", "Tensor", "TrainConfig",
    "TverskyParams", "auc_score", "augment", "bce_loss", "build_model",
    "composite_loss", "dice_score", "focal_tversky_loss", "generate_sample",
    "gradient_check", "inject", "load_dataset", "lr_at", "merge_adapters",
    "no_grad", "paired_t_test", "run_grid", "sample_prompts", "save_adapters",
    "soft_dice_loss", "train_adapters", "trainable_fraction",
]
