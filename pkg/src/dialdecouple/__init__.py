"""Speaker- and key-utterance decoupling for multi-party dialogue reading comprehension."""

from .data import (AnswerSpan, Dialogue, PackedInput, Question, Utterance, Vocabulary,
                   choose_masked_utterance, key_utterance_target, load_squad_style, pack,
                   speaker_targets, tokenize)
from .layers import ModelConfig
from .model import DecouplingModel
from .synthetic import SyntheticConfig, generate_synthetic
from .training import EvalReport, TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"
