"""Federated training of early-exit models on heterogeneous clients."""

from .aggregation import (ClientUpdate, EffectiveWeightReport, ServerOptimizerConfig, ServerState,
                          aggregate_heterogeneous, compute_effective_weights, coverage_counts, fedavg,
                          server_step, server_step_fedadam, server_step_sgd)
from .checkpoint import load_checkpoint, save_checkpoint
from .client import LocalTrainConfig, evaluate, run_client
from .data import Corpus, generate_synthetic_corpus
from .estimator import EarlyExitClassifier, FederatedEarlyExitClassifier
from .exceptions import (CheckpointError, ClientDivergenceError, ConfigurationError, DivergenceError,
                         EEFLError, InfeasibleTargetError, IntegrityError, ModelError, ReportParseError)
from .harness import (ExperimentConfig, ExperimentResult, RoundMetrics, load_config, pretrain_central,
                      report, run_experiment)
from .heterogeneity import ClientPopulation, HeterogeneityProfile, builtin_profile, sample_round
from .losses import ExitLossReport, compound_ee_loss, cross_entropy, ctc_loss
from .model import Batch, ModelConfig, ParamSet, SubNetSpec, backward, forward, init_model

__version__ = "0.1.0"
