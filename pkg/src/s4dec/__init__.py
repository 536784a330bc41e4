"""Structured state space (S4) decoders for sequence-to-sequence models, in numpy."""

from . import autodiff, s4_layer, ssm_core  # s4_layer registers the fused kernel op
from .autodiff import AdamW, Tape, Tensor, WarmupExpDecay, backward
from .beam import beam_search, greedy_search
from .checkpoint import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from .decoder import DecoderConfig, DecoderState, EncoderOutput, Seq2SeqModel, decoder_init_state, decoder_step
from .estimator import Seq2SeqEstimator
from .exceptions import S4DecError
from .harness import RunConfig, evaluate, load_config, run_longform_experiment, train
from .s4_layer import DPLRParams, S4Layer, init_dplr, ssm_kernel
from .ssm_core import ContinuousSSM, DiscreteSSM, discretize_bilinear, materialize_kernel, run_recurrent
from .tasks import TaskDataset, concat_longform, edit_distance, error_rate, gen_continuous_task, gen_copy_task, gen_reverse_task

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Tape", "Tensor", "WarmupExpDecay", "backward",
    "beam_search", "greedy_search",
    "Checkpoint", "average_checkpoints", "load_checkpoint", "save_checkpoint",
    "DecoderConfig", "DecoderState", "EncoderOutput", "Seq2SeqModel", "decoder_init_state", "decoder_step",
    "Seq2SeqEstimator", "S4DecError",
    "RunConfig", "evaluate", "load_config", "run_longform_experiment", "train",
    "DPLRParams", "S4Layer", "init_dplr", "ssm_kernel",
    "ContinuousSSM", "DiscreteSSM", "discretize_bilinear", "materialize_kernel", "run_recurrent",
    "TaskDataset", "concat_longform", "edit_distance", "error_rate",
    "gen_continuous_task", "gen_copy_task", "gen_reverse_task",
]
