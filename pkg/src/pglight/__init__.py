"""Structured pruning toolkit for sandwich-norm GQA transformers."""

from .calibrate import ActivationStats, CalibrationSet, collect, merge
from .checkpoint import load_checkpoint, save_checkpoint
from .importance import ImportanceScores, score_all
from .model import ModelConfig, WeightStore, forward, random_init
from .normfuse import absorb, verify_absorption
from .surgery import PrunePlan, apply_plan

__version__ = "0.1.0"
