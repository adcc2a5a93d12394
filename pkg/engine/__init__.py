"""
ACL Lab Engine
Active continual learning: MLP training, CL/AL strategies, the ACL loop and metrics
"""

from .models import (
    ALStrategy,
    Architecture,
    CLHyper,
    CLStrategy,
    ExperimentConfig,
    LabellingMode,
    LabelledSet,
    ModelState,
    ReplayBuffer,
    RunConfig,
    RunLog,
    Scenario,
    SyntheticSpec,
    Task,
    TaskStream,
)
from .errors import ACLError, BudgetError, ConfigError, ContractViolation, MetricError
from .acl_engine import evaluate, run_acl, run_ceiling_indiv, run_ceiling_mtl, run_supervised_cl
from .config_loader import ConfigLoader, parse_config
from .harness import load_records, run_experiment
from .mnist_client import MnistClient

__version__ = "0.1.0"

__all__ = [
    'ALStrategy',
    'Architecture',
    'CLHyper',
    'CLStrategy',
    'ExperimentConfig',
    'LabellingMode',
    'LabelledSet',
    'ModelState',
    'ReplayBuffer',
    'RunConfig',
    'RunLog',
    'Scenario',
    'SyntheticSpec',
    'Task',
    'TaskStream',
    'ACLError',
    'BudgetError',
    'ConfigError',
    'ContractViolation',
    'MetricError',
    'evaluate',
    'run_acl',
    'run_ceiling_indiv',
    'run_ceiling_mtl',
    'run_supervised_cl',
    'ConfigLoader',
    'parse_config',
    'load_records',
    'run_experiment',
    'MnistClient',
]
