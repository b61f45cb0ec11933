"""Graph prompt tuning lab.

Frozen graph-transformer and MPGNN backbones, graph prompt / prefix
tokens, a small float64 autodiff engine, and a config-driven experiment
CLI for pretraining, tuning and ablations on synthetic graph tasks.
"""

from gpt_lab.graphs import GraphSample, batch, gen_downstream, gen_pretext
from gpt_lab.models import Backbone, BackboneConfig, PredictionHead, backbone_forward
from gpt_lab.prompt import PromptSet, build_registry, count_params, init_prompts
from gpt_lab.tensor import Tape, Tensor, backward
from gpt_lab.training import TuningConfig, pretrain, train

__all__ = [
    "Backbone",
    "BackboneConfig",
    "GraphSample",
    "PredictionHead",
    "PromptSet",
    "Tape",
    "Tensor",
    "TuningConfig",
    "backbone_forward",
    "backward",
    "batch",
    "build_registry",
    "count_params",
    "gen_downstream",
    "gen_pretext",
    "init_prompts",
    "pretrain",
    "train",
]
__version__ = "0.1.0"
