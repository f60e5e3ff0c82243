"""Split two-tower federated recommendation with secret-shared aggregation."""

from .data import SyntheticSpec, gen_synthetic, load_movielens, train_test_split
from .evaluation import auc, evaluate, ndcg_at_k, precision_at_k
from .federation import Federation, FederationConfig
from .featurize import TrigramVocab, encode, letter_trigrams
from .optimizer import FedAdamConfig, fedadam_step
from .secure_agg import aggregate, secure_mean

__all__ = [
    "FedAdamConfig",
    "Federation",
    "FederationConfig",
    "SyntheticSpec",
    "TrigramVocab",
    "aggregate",
    "auc",
    "encode",
    "evaluate",
    "fedadam_step",
    "gen_synthetic",
    "letter_trigrams",
    "load_movielens",
    "ndcg_at_k",
    "precision_at_k",
    "secure_mean",
    "train_test_split",
]

__version__ = "0.1.0"
