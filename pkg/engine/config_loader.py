"""
Loads and validates experiment configurations from YAML (or JSON) files
"""
import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple

import yaml

from .errors import ConfigError, ContractViolation
from .models import (
    ALStrategy,
    Architecture,
    CLHyper,
    CLStrategy,
    ExperimentConfig,
    LabellingMode,
    OptimizerAlgo,
    OptimizerHyper,
    Scenario,
    SyntheticSpec,
)
from .task_streams import task_orders

logger = logging.getLogger(__name__)

DATASETS = ("mnist_permuted", "mnist_split", "synthetic")
OUT_OF_SCOPE = ("cifar", "asc", "20news", "newsgroup", "text", "roberta")
CEILINGS = ("indiv", "mtl")

TOP_LEVEL_KEYS = {f.name for f in fields(ExperimentConfig)}
HYPER_KEYS = {f.name for f in fields(CLHyper)} - {"strategy", "optimizer"} | {
    "optimizer", "beta1", "beta2", "eps"}
ARCH_KEYS = {"hidden_dims", "activation"}
SYNTHETIC_KEYS = {"dim", "samples_per_class", "cluster_separation", "test_per_class"}


def _reject_unknown(block: Dict[str, Any], allowed: Iterable[str], prefix: str = ""):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key {prefix}{key!r}", key=f"{prefix}{key}")


def _enum_list(raw: Any, enum, key: str) -> Tuple:
    values = raw if isinstance(raw, list) else [raw]
    try:
        return tuple(enum(v) for v in values)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}", key=key) from None


def _fraction(data: Dict[str, Any], key: str, default: float, allow_zero: bool = False) -> float:
    value = float(data.get(key, default))
    low_ok = value >= 0.0 if allow_zero else value > 0.0
    if not (low_ok and value <= 1.0):
        raise ConfigError(f"{key} must lie in {'[0' if allow_zero else '(0'}, 1], got {value}", key=key)
    return value


class ConfigLoader:
    """Reads experiment files and the download-source list"""

    def __init__(self, configs_dir: str = "configs"):
        self.configs_dir = Path(configs_dir)

    def load_sources(self) -> Dict:
        """
        Load download mirrors from sources.yaml

        Returns:
            Dictionary of sources (empty when the file is missing)
        """
        sources_file = self.configs_dir / "sources.yaml"
        if not sources_file.exists():
            logger.warning("%s not found, using built-in mirrors", sources_file)
            return {}
        with open(sources_file, "r") as f:
            data = yaml.safe_load(f)
        return data if data else {}

    def parse_config(self, path) -> ExperimentConfig:
        """
        Parse and validate one experiment file

        Args:
            path: YAML or JSON file

        Returns:
            ExperimentConfig with defaults filled in

        Raises:
            ConfigError: naming the offending key
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            with open(path, "r") as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML/JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        config = self.build(data)
        logger.info("Loaded %s: %s, %d CL x %d AL x %d mode(s), %d seed(s), %d order(s)",
                    path, config.dataset, len(config.cl), len(config.al), len(config.modes),
                    len(config.seeds), len(config.task_orders))
        return config

    def build(self, data: Dict[str, Any]) -> ExperimentConfig:
        _reject_unknown(data, TOP_LEVEL_KEYS)
        dataset = self._dataset(data)
        if "scenario" not in data:
            raise ConfigError("scenario is required", key="scenario")
        scenario = _enum_list(data["scenario"], Scenario, "scenario")[0]
        self._check_scenario(dataset, scenario)

        if "cl" not in data and "al" not in data:
            raise ConfigError("name at least one CL or AL strategy", key="cl")
        cl = _enum_list(data.get("cl", "ft"), CLStrategy, "cl")
        al = _enum_list(data.get("al", "random"), ALStrategy, "al")
        if CLStrategy.ICARL in cl and scenario is not Scenario.CLASS_IL:
            raise ConfigError("icarl is a class-IL method", key="cl")
        modes = _enum_list(data.get("modes", "sequential"), LabellingMode, "modes")

        seeds = data.get("seeds", [0])
        seeds = seeds if isinstance(seeds, list) else [seeds]
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers", key="seeds")

        num_tasks = int(data.get("num_tasks", 10))
        classes_per_task = int(data.get("classes_per_task", 2))
        if num_tasks < 1 or classes_per_task < 1:
            raise ConfigError("num_tasks and classes_per_task must be positive", key="num_tasks")
        class_order = tuple(int(c) for c in data.get("class_order", range(10)))
        if dataset == "mnist_split":
            if sorted(class_order) != list(range(10)):
                raise ConfigError("class_order must permute 0..9", key="class_order")
            if 10 % classes_per_task:
                raise ConfigError("10 classes cannot be split evenly", key="classes_per_task")
            num_tasks = 10 // classes_per_task

        synthetic = self._synthetic(data.get("synthetic", {}), data, num_tasks, classes_per_task)
        hyper = self._hyper(data.get("hyper", {}))
        arch = self._arch(data.get("arch", {}), dataset, scenario, synthetic)

        milestones = tuple(float(f) for f in data.get("milestones", (0.02, 0.04, 0.06, 0.08, 0.10)))
        if any(not 0.0 < f <= 1.0 for f in milestones):
            raise ConfigError("milestones must lie in (0, 1]", key="milestones")
        ceilings = tuple(data.get("ceilings", ()))
        if any(c not in CEILINGS for c in ceilings):
            raise ConfigError(f"ceilings must be drawn from {CEILINGS}", key="ceilings")
        train_limit = data.get("train_limit")
        if train_limit is not None and int(train_limit) < 1:
            raise ConfigError("train_limit must be positive", key="train_limit")

        return ExperimentConfig(
            dataset=dataset,
            scenario=scenario,
            cl=cl,
            al=al,
            modes=modes,
            seeds=tuple(seeds),
            task_orders=self._orders(data.get("task_orders", 1), num_tasks),
            data_dir=str(data.get("data_dir", "data/mnist")),
            num_tasks=num_tasks,
            classes_per_task=classes_per_task,
            class_order=class_order,
            val_fraction=_fraction(data, "val_fraction", 0.05, allow_zero=True),
            budget_fraction=_fraction(data, "budget_fraction", 0.10),
            query_fraction=_fraction(data, "query_fraction", 0.005),
            hyper=hyper,
            arch=arch,
            synthetic=synthetic,
            include_baseline=bool(data.get("include_baseline", False)),
            ceilings=ceilings,
            milestones=milestones,
            train_limit=None if train_limit is None else int(train_limit),
            output_dir=str(data.get("output_dir", "results")),
        )

    # ---- sections

    @staticmethod
    def _dataset(data: Dict[str, Any]) -> str:
        dataset = str(data.get("dataset", "")).lower()
        if not dataset:
            raise ConfigError("dataset is required", key="dataset")
        if any(tag in dataset for tag in OUT_OF_SCOPE):
            raise ConfigError(f"dataset {dataset!r} is not supported (image MLP tasks only)",
                              key="dataset")
        if dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}", key="dataset")
        return dataset

    @staticmethod
    def _check_scenario(dataset: str, scenario: Scenario):
        if dataset == "mnist_permuted" and scenario is not Scenario.DOMAIN_IL:
            raise ConfigError("permuted MNIST is a domain-IL benchmark", key="scenario")
        if dataset == "mnist_split" and scenario is Scenario.DOMAIN_IL:
            raise ConfigError("split MNIST is class-IL or task-IL", key="scenario")

    @staticmethod
    def _hyper(block: Dict[str, Any]) -> CLHyper:
        _reject_unknown(block, HYPER_KEYS, "hyper.")
        values = dict(block)
        try:
            optimizer = OptimizerHyper(
                algo=OptimizerAlgo(values.pop("optimizer", "sgd")),
                lr=float(values.get("lr", 0.01)),
                beta1=float(values.pop("beta1", 0.9)),
                beta2=float(values.pop("beta2", 0.999)),
                eps=float(values.pop("eps", 1e-8)),
            )
            return CLHyper(optimizer=optimizer, **values)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"hyper: {e}", key="hyper") from None

    @staticmethod
    def _arch(block: Dict[str, Any], dataset: str, scenario: Scenario,
              synthetic: SyntheticSpec) -> Architecture:
        _reject_unknown(block, ARCH_KEYS, "arch.")
        if dataset == "synthetic":
            shared = scenario is Scenario.DOMAIN_IL
            input_dim = synthetic.dim
            num_classes = synthetic.classes_per_task * (1 if shared else synthetic.tasks)
        else:
            input_dim, num_classes = 784, 10
        try:
            return Architecture(input_dim=input_dim, num_classes=num_classes,
                                hidden_dims=tuple(block.get("hidden_dims", (100, 100))),
                                activation=block.get("activation", "relu"))
        except (ContractViolation, TypeError) as e:
            raise ConfigError(f"arch: {e}", key="arch") from None

    @staticmethod
    def _synthetic(block: Dict[str, Any], data: Dict[str, Any], num_tasks: int,
                   classes_per_task: int) -> SyntheticSpec:
        _reject_unknown(block, SYNTHETIC_KEYS, "synthetic.")
        spec = SyntheticSpec(
            tasks=num_tasks,
            classes_per_task=classes_per_task,
            dim=int(block.get("dim", 8)),
            samples_per_class=int(block.get("samples_per_class", 60)),
            cluster_separation=float(block.get("cluster_separation", 10.0)),
            test_per_class=int(block.get("test_per_class", 30)),
            val_fraction=_fraction(data, "val_fraction", 0.05, allow_zero=True),
            budget_fraction=_fraction(data, "budget_fraction", 0.10),
            query_fraction=_fraction(data, "query_fraction", 0.005),
        )
        if min(spec.dim, spec.samples_per_class, spec.test_per_class) < 1:
            raise ConfigError("synthetic counts must be positive", key="synthetic")
        return spec

    @staticmethod
    def _orders(raw: Any, num_tasks: int) -> Tuple[Tuple[int, ...], ...]:
        if isinstance(raw, int):
            if raw < 1:
                raise ConfigError("task_orders count must be positive", key="task_orders")
            return tuple(tuple(o) for o in task_orders(num_tasks, raw))
        orders = []
        for order in raw:
            order = tuple(int(i) for i in order)
            if sorted(order) != list(range(num_tasks)):
                raise ConfigError(f"{list(order)} is not a permutation of 0..{num_tasks - 1}",
                                  key="task_orders")
            orders.append(order)
        if not orders:
            raise ConfigError("task_orders must not be empty", key="task_orders")
        return tuple(orders)


def parse_config(path) -> ExperimentConfig:
    return ConfigLoader().parse_config(path)
