"""Convolutional generative model for session-based next-item recommendation."""

from .data import Vocab, build_vocab, make_batch, split, sub_session_augment, synth_markov, window_extract
from .evaluation import RankingReport, bayes_scorer, evaluate, model_scorer, mostpop_scorer
from .model import (
    ModelConfig,
    NextItNet,
    count_parameters,
    generate,
    load_checkpoint,
    predict_next,
    save_checkpoint,
    sequence_loss,
)
from .training import TrainConfig, TrainLog, train

__version__ = "0.1.0"
