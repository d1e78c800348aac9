"""Per-class attention logit biases for prompt-based segmentation decoders."""
from .attention import (BiasVector, biased_cross_attention, cffa_bias, dfa_cold_start,
                        dfa_warm_start, hcfa_bias, self_gating_diagnostic)
from .decoder import DecoderConfig, DecoderParams, decoder_forward, init_params
from .objectives import LossWeights, composite_loss, dice_metric, iou_metric
from .synthgen import ClassSpec, disconnect_preset, generate_dataset, generate_scene
from .trainer import TrainConfig, evaluate, hcfa_two_stage, train_run

__version__ = "0.1.0"
