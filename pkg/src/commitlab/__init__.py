"""Learned token-commitment lab for masked-diffusion decoding with toy backbones."""

__version__ = "0.1.0"

from .adaptation import rl_train, self_train
from .backbone import MaskedLMBackbone, ProgrammaticBackbone
from .bench import eval_suite
from .controller import TraceLockController
from .policies import BlockFilter, BlockPolicy, DecodeConfig, TraceLockPolicy, decode, decode_many
from .tasks import make_task, synth_corpus
from .trace import CompletedTrace, filter_trace, label_future_stability, read_traces, write_traces

__all__ = [
    "BlockFilter",
    "BlockPolicy",
    "CompletedTrace",
    "DecodeConfig",
    "MaskedLMBackbone",
    "ProgrammaticBackbone",
    "TraceLockController",
    "TraceLockPolicy",
    "decode",
    "decode_many",
    "eval_suite",
    "filter_trace",
    "label_future_stability",
    "make_task",
    "read_traces",
    "rl_train",
    "self_train",
    "synth_corpus",
    "write_traces",
]
