"""Experiment config files: one YAML tree per run.

Probability vectors (``loss.omega``, ``loss.rho``) accept ratio notation such
as ``"4:1:1:4"`` and are stored normalized in the resolved snapshot, which
parses back to an equal config.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from cyb.losses import LossConfig, Variant
from cyb.model import ModelConfig
from cyb.stop_process import prior_from_ratio
from cyb.synth import SynthTaskSpec
from cyb.trainer import PackingConfig, TrainConfig

DESK_SCALE_NOTE = ("desk-scale run: a small transformer trained from scratch on a synthetic "
                   "key-value recall corpus, standing in for fine-tuning a pretrained LM")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ExperimentConfig:
    train: TrainConfig
    run_id: str = "run"
    out_dir: str = "runs"
    n_permutations: int = 10_000
    extra: dict = field(default_factory=dict)

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id


_TRAIN_KEYS = ("lr_max", "warmup_steps", "total_steps", "batch_size", "grad_clip",
               "weight_decay", "betas", "eval_every", "eval_docs")


def _section(tree: dict, name: str) -> dict:
    sec = tree.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a mapping")
    return sec


def _prob(value, path: str):
    if value is None:
        return None
    try:
        return prior_from_ratio(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def _build(cls, values: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_config(tree: dict) -> ExperimentConfig:
    if not isinstance(tree, dict):
        raise ConfigError("<root>", "config must be a mapping")
    known = {"run_id", "out_dir", "condition", "seed", "deterministic", "loss", "model",
             "packing", "dk", "task", "train", "analyze"}
    for key in tree:
        if key not in known:
            raise ConfigError(key, "unknown field")

    condition = tree.get("condition", "cyb")
    seed = int(tree.get("seed", 0))
    loss = _section(tree, "loss")
    packing = _build(PackingConfig, _section(tree, "packing"), "packing")
    w_max = packing.n_pauses + 1

    variant = loss.get("variant", {"baseline": "TBYS", "tbys": "TBYS"}.get(condition, "AP"))
    try:
        variant = Variant(variant)
    except ValueError:
        raise ConfigError("loss.variant", f"unknown variant {variant!r}") from None
    omega = _prob(loss.get("omega"), "loss.omega")
    rho = _prob(loss.get("rho"), "loss.rho")
    for key in loss:
        if key not in ("variant", "omega", "rho", "alpha", "discount", "gamma0"):
            raise ConfigError(f"loss.{key}", "unknown field")
    if omega is not None and len(omega) != w_max:
        raise ConfigError("loss.omega", f"expected {w_max} steps (packing.n_pauses + 1), got {len(omega)}")
    try:
        loss_cfg = LossConfig.build(variant, w_max, omega=omega, discount=loss.get("discount", "constant"),
                                    gamma0=float(loss.get("gamma0", 1.0)), rho=rho,
                                    alpha=float(loss.get("alpha", 0.0)))
    except ValueError as exc:
        field_name, _, msg = str(exc).partition(": ")
        if field_name in ("omega", "rho", "gamma", "gamma0", "alpha"):
            raise ConfigError(f"loss.{field_name}", msg) from None
        raise ConfigError("loss", str(exc)) from None

    model_values = dict(_section(tree, "model"))
    model_values.setdefault("seed", seed)
    model = _build(ModelConfig, model_values, "model")
    task_values = dict(_section(tree, "task"))
    task_values.setdefault("seed", seed)
    task = _build(SynthTaskSpec, task_values, "task")
    dk = _section(tree, "dk")
    for key in dk:
        if key != "psi_prime_dk":
            raise ConfigError(f"dk.{key}", "unknown field")

    train_values = _section(tree, "train")
    for key in train_values:
        if key not in _TRAIN_KEYS:
            raise ConfigError(f"train.{key}", "unknown field")
    try:
        cfg = TrainConfig(loss=loss_cfg, model=model, packing=packing, task=task, condition=condition,
                          psi_prime_dk=float(dk.get("psi_prime_dk", 0.9)), seed=seed,
                          deterministic=bool(tree.get("deterministic", True)), **train_values)
        cfg.dk  # validates psi_prime_dk and the vocabulary layout
        cfg.vocab
    except ValueError as exc:
        field_name, _, msg = str(exc).partition(": ")
        raise ConfigError(field_name if "." in field_name or field_name == "condition" else "config",
                          msg or str(exc)) from None
    if task.n_content > cfg.vocab.n_content:
        raise ConfigError("model.vocab_size", f"needs at least {task.n_content + model.max_pause_slots + 1} "
                                              "ids for this task")
    analyze = _section(tree, "analyze")
    return ExperimentConfig(train=cfg, run_id=str(tree.get("run_id", "run")),
                            out_dir=str(tree.get("out_dir", "runs")),
                            n_permutations=int(analyze.get("n_permutations", 10_000)))


def load_config(path) -> ExperimentConfig:
    try:
        tree = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    return parse_config(tree or {})


def _plain(x):
    if isinstance(x, np.ndarray):
        return [float(v) for v in x]
    if isinstance(x, tuple):
        return list(x)
    return x


def train_config_to_dict(cfg: TrainConfig) -> dict:
    lc = cfg.loss
    loss = {"variant": lc.variant.value, "omega": _plain(lc.omega), "discount": lc.discount_kind.value,
            "gamma0": float(lc.gamma0), "alpha": float(lc.alpha)}
    if lc.rho is not None:
        loss["rho"] = _plain(lc.rho)
    return {
        "condition": cfg.condition,
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "loss": loss,
        "model": dataclasses.asdict(cfg.model),
        "packing": dataclasses.asdict(cfg.packing),
        "dk": {"psi_prime_dk": cfg.psi_prime_dk},
        "task": dataclasses.asdict(cfg.task),
        "train": {k: _plain(getattr(cfg, k)) for k in _TRAIN_KEYS},
    }


def config_to_dict(exp: ExperimentConfig) -> dict:
    tree = {"run_id": exp.run_id, "out_dir": exp.out_dir}
    tree.update(train_config_to_dict(exp.train))
    tree["analyze"] = {"n_permutations": exp.n_permutations}
    return tree


def dump_config(exp: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(exp), sort_keys=False)


def apply_overrides(tree: dict, overrides: dict) -> dict:
    """Return a copy of ``tree`` with dotted-path overrides such as ``{"loss.omega": "1:1:1:1"}``."""
    out = copy.deepcopy(tree)
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(dotted, "override path crosses a non-mapping")
        node[parts[-1]] = value
    return out
