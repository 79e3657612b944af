"""Traffic topology scene graphs: data model, synthetic scenes, relation transformer, metrics."""

from __future__ import annotations

from .autodiff import ContractError, Parameter, Tape, Tensor, grad_check
from .datagen import DetectionSample, ScenarioSpec, make_sample, read_dataset, write_dataset
from .metrics import EvalReport, MatchResult, discrete_frechet, evaluate_model, evaluate_predictions, ols
from .model import ForwardOutput, ModelConfig, TopoFormer, infer
from .scene import Centerline, Lane, SceneGraph, TrafficElement, spm, validate
from .train import LossWeights, TrainConfig, train

__all__ = [
    "Centerline",
    "ContractError",
    "DetectionSample",
    "EvalReport",
    "ForwardOutput",
    "Lane",
    "LossWeights",
    "MatchResult",
    "ModelConfig",
    "Parameter",
    "ScenarioSpec",
    "SceneGraph",
    "Tape",
    "Tensor",
    "TopoFormer",
    "TrafficElement",
    "TrainConfig",
    "discrete_frechet",
    "evaluate_model",
    "evaluate_predictions",
    "grad_check",
    "infer",
    "make_sample",
    "ols",
    "read_dataset",
    "spm",
    "train",
    "validate",
    "write_dataset",
]

__version__ = "0.1.0"
