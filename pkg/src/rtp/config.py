"""Model and experiment configuration, presets, and deterministic fixtures."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .tensor import SplitMix64

PARAM_INIT_RANGE = 0.1
_DATA_STREAM = 0xD1B54A32D192ED03


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape, using the column names of the model-configuration table.

    ``embedding_size`` is the feed-forward inner width (four times the hidden
    size in every shipped preset).
    """

    attention_heads: int
    hidden_size: int
    layers: int
    sequence_length: int
    vocab_size: int
    embedding_size: int
    moe: bool = False
    n_experts: int = 1
    causal: bool = True

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.attention_heads

    def with_experts(self, n: int) -> "ModelConfig":
        return dataclasses.replace(self, n_experts=n) if self.moe else self


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every logical parameter, in initialization order."""
    H, F, V = cfg.hidden_size, cfg.embedding_size, cfg.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("emb.table", (V, H))]
    for l in range(cfg.layers):
        p = f"blocks.{l}.attn."
        for name in ("q", "k", "v", "o"):
            shapes += [(p + "w" + name, (H, H)), (p + "b" + name, (H,))]
        if cfg.moe:
            p = f"blocks.{l}.moe."
            shapes.append((p + "gate.w", (H, cfg.n_experts)))
            for j in range(cfg.n_experts):
                e = f"{p}experts.{j}."
                shapes += [(e + "w1", (H, F)), (e + "b1", (F,)), (e + "w2", (F, H)), (e + "b2", (H,))]
        else:
            p = f"blocks.{l}.ffn."
            shapes += [(p + "lin1.w", (H, F)), (p + "lin1.b", (F,)), (p + "lin2.w", (F, H)), (p + "lin2.b", (H,))]
    shapes += [("head.w", (H, V)), ("head.b", (V,))]
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform(-0.1, 0.1) draws from one SplitMix64 stream, in ``param_shapes`` order."""
    rng = SplitMix64(seed)
    return {name: rng.uniform(shape, -PARAM_INIT_RANGE, PARAM_INIT_RANGE) for name, shape in param_shapes(cfg)}


def make_batch(cfg: ModelConfig, batch: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids ``(batch, seq)`` and a regression target ``(batch, seq, vocab)`` in [-1, 1]."""
    rng = SplitMix64(seed ^ _DATA_STREAM)
    ids = rng.integers((batch, cfg.sequence_length), cfg.vocab_size)
    target = rng.uniform((batch, cfg.sequence_length, cfg.vocab_size), -1.0, 1.0)
    return ids, target


def check_divisibility(cfg: ModelConfig, n: int, batch: int | None = None) -> None:
    """Raise :class:`ConfigurationError` if ``cfg`` cannot run on ``n`` workers."""
    problems = []
    if n < 1:
        problems.append(f"worker count must be >= 1 (got {n})")
    else:
        if cfg.hidden_size % cfg.attention_heads:
            problems.append(
                f"hidden_size={cfg.hidden_size} is not a multiple of attention_heads={cfg.attention_heads}"
            )
        if cfg.attention_heads % n:
            problems.append(f"attention_heads={cfg.attention_heads} is not divisible by n_workers={n}")
        for name in ("hidden_size", "vocab_size", "embedding_size"):
            if getattr(cfg, name) % n:
                problems.append(f"{name}={getattr(cfg, name)} is not divisible by n_workers={n}")
        if cfg.moe and cfg.n_experts != n:
            problems.append(f"MoE needs one expert per worker: n_experts={cfg.n_experts}, n_workers={n}")
        if batch is not None and batch % n:
            problems.append(f"batch_size={batch} is not divisible by n_workers={n}")
    if problems:
        raise ConfigurationError(
            "configuration cannot be partitioned: " + "; ".join(problems)
            + ". Pick n_workers dividing attention_heads, hidden_size, vocab_size, "
              "embedding_size and batch_size."
        )


# Full-size model shapes. Analytic use only (memtable).
FULL_SIZE_PRESETS: dict[str, ModelConfig] = {
    "gpt2-117m": ModelConfig(16, 768, 12, 512, 50257, 3072),
    "bert-large-340m": ModelConfig(16, 1024, 24, 512, 30522, 4096),
    "gpt2-500m": ModelConfig(16, 1280, 20, 1024, 50257, 5120),
    "gpt2-large-774m": ModelConfig(16, 1280, 32, 1024, 50257, 5120),
    "gpt2-xl-1.5b": ModelConfig(16, 1600, 48, 1024, 50257, 6400),
    "gpt2-neo-2.7b": ModelConfig(16, 2560, 32, 1024, 50257, 10240),
}

# Scaled-down shapes that run numerically on a laptop.
TOY_PRESETS: dict[str, ModelConfig] = {
    "toy-gpt": ModelConfig(4, 32, 2, 16, 64, 128),
    "toy-gpt-moe": ModelConfig(4, 32, 2, 16, 64, 128, moe=True),
    "toy-gpt-8h": ModelConfig(8, 32, 2, 16, 64, 128),
}

STRATEGIES = ("serial", "rtp-inplace", "rtp-outofplace")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: TOY_PRESETS["toy-gpt"])
    n_workers: int = 4
    strategy: str = "rtp-inplace"
    batch_size: int = 8
    seed: int = 0
    alpha: float = 1e-6
    beta: float = 1e-10
    gamma: float = 1e-11
    launch_overhead: float = 0.0
    transport: str = "lockstep"

    @property
    def variant(self) -> str:
        return self.strategy.split("-", 1)[1] if self.strategy.startswith("rtp-") else "serial"

    def runnable_model(self) -> ModelConfig:
        return self.model.with_experts(self.n_workers)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.transport not in ("lockstep", "concurrent"):
            raise ConfigurationError(f"transport must be 'lockstep' or 'concurrent', got {self.transport!r}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if min(self.alpha, self.beta, self.gamma, self.launch_overhead) < 0:
            raise ConfigurationError("cost-model parameters must be non-negative")
        check_divisibility(self.runnable_model(), self.n_workers, self.batch_size)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        for f in dataclasses.fields(ModelConfig):
            if f.name != "n_experts":
                d[f.name] = getattr(self.model, f.name)
        return d


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"n_experts"}
_EXPERIMENT_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"model"}


def config_from_dict(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from flat ``values`` (unknown keys are rejected)."""
    base = base or ExperimentConfig()
    values = dict(values)
    unknown = set(values) - _MODEL_FIELDS - _EXPERIMENT_FIELDS - {"preset"}
    if unknown:
        raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
    model = base.model
    if "preset" in values:
        model = preset(values.pop("preset"))
    model_kw = {k: values.pop(k) for k in list(values) if k in _MODEL_FIELDS}
    for k, v in model_kw.items():
        if k in ("moe", "causal"):
            if not isinstance(v, bool):
                raise ConfigurationError(f"{k} must be true or false, got {v!r}")
        elif not isinstance(v, int) or isinstance(v, bool) or v <= 0:
            raise ConfigurationError(f"{k} must be a positive integer, got {v!r}")
    model = dataclasses.replace(model, **model_kw)
    exp = dataclasses.replace(base, model=model)
    for k, v in values.items():
        expected = type(getattr(exp, k))
        if expected is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, expected) or isinstance(v, bool) != (expected is bool):
            raise ConfigurationError(f"{k} must be of type {expected.__name__}, got {v!r}")
        setattr(exp, k, v)
    return exp


def read_config(path: str | os.PathLike) -> dict:
    """The raw JSON object of a config file."""
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return values


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    return config_from_dict(read_config(path))


def preset(name: str) -> ModelConfig:
    if name in TOY_PRESETS:
        return TOY_PRESETS[name]
    if name in FULL_SIZE_PRESETS:
        return FULL_SIZE_PRESETS[name]
    raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(TOY_PRESETS) + sorted(FULL_SIZE_PRESETS)}")
