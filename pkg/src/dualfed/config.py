"""Run configuration: a flat key-value file format, CLI overrides, and full
validation before any computation starts.

The file format is deliberately dependency-free and diff-friendly::

    # comment
    method.name = dualfed
    train.rounds = 100
    loss.tau = 0.1

Unknown keys are rejected, every value is type- and range-checked, and the
first failure raises ConfigError naming the offending key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .data import SyntheticSpec
from .errors import ConfigError, DataError, DualFedError
from .losses import LossConfig
from .model import ArchConfig
from .protocol import SIMULTANEOUS, STAGE_WISE, TrainConfig
from .variants import MethodVariant, make_variant

DATA_SYNTHETIC = "synthetic"
DATA_FLATFILE = "flatfile"


@dataclass(frozen=True)
class FlatFileData:
    """Per-client train/test CSV paths."""

    train_files: tuple[str, ...]
    test_files: tuple[str, ...]


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig
    train: TrainConfig
    loss: LossConfig
    data: SyntheticSpec | FlatFileData
    method: MethodVariant
    seeds: tuple[int, ...]
    output_dir: str
    eval_every: int
    dump_reps: bool
    checkpoint_every: int
    figures: bool


_DEFAULTS: dict[str, str] = {
    "arch.input_dim": "64",
    "arch.encoder_layers": "64,32,16",
    "arch.projector_depth": "2",
    "arch.projector_hidden": "32",
    "arch.projector_out": "16",
    "arch.projector_use_bn": "true",
    "arch.num_classes": "7",
    "train.lr": "0.01",
    "train.momentum": "0.5",
    "train.batch_size": "256",
    "train.local_epochs": "1",
    "train.rounds": "300",
    "train.strategy": STAGE_WISE,
    "loss.tau": "0.1",
    "loss.lambda": "1.0",
    "data.source": DATA_SYNTHETIC,
    "data.num_domains": "4",
    "data.train_per_client": "490",
    "data.test_per_client": "350",
    "data.prototype_sigma": "1.0",
    "data.noise_sigma": "1.8",
    "data.domain_shift": "0.08",
    "data.difficulty_spread": "0.8",
    "data.identity_transforms": "false",
    "data.seed": "0",
    "data.train_files": "",
    "data.test_files": "",
    "method.name": "dualfed",
    "method.mu": "",
    "method.tag_overrides": "",
    "run.seeds": "0,1,2,3,4",
    "run.output_dir": "runs",
    "run.eval_every": "1",
    "run.dump_reps": "false",
    "run.checkpoint_every": "0",
    "run.figures": "true",
}


def _parse_int(key: str, raw: str, minimum: int | None = None) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key}: must be >= {minimum}, got {value}")
    return value


def _parse_float(key: str, raw: str, minimum: float | None = None,
                 exclusive: bool = False) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if minimum is not None:
        if exclusive and value <= minimum:
            raise ConfigError(f"{key}: must be > {minimum}, got {value}")
        if not exclusive and value < minimum:
            raise ConfigError(f"{key}: must be >= {minimum}, got {value}")
    return value


def _parse_bool(key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}")


def _parse_int_list(key: str, raw: str) -> tuple[int, ...]:
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if not items:
        raise ConfigError(f"{key}: expected a comma-separated list of integers")
    return tuple(_parse_int(key, s) for s in items)


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in raw.split(",") if s.strip())


def _parse_choice(key: str, raw: str, choices: tuple[str, ...]) -> str:
    value = raw.strip().lower()
    if value not in choices:
        raise ConfigError(f"{key}: must be one of {', '.join(choices)}, got {raw!r}")
    return value


def _parse_tag_overrides(key: str, raw: str) -> dict[str, str]:
    overrides = {}
    for item in _parse_str_list(raw):
        if "=" not in item:
            raise ConfigError(f"{key}: expected group=tag entries, got {item!r}")
        group, _, tag = item.partition("=")
        overrides[group.strip()] = tag.strip().lower()
    return overrides


def read_config_file(path: str) -> dict[str, str]:
    """Parse `key = value` lines; comments start with '#'."""
    values: dict[str, str] = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def build_config(values: Mapping[str, str]) -> RunConfig:
    """Validate a complete key-value map into a RunConfig."""
    unknown = sorted(set(values) - set(_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    merged = dict(_DEFAULTS)
    merged.update(values)

    try:
        arch = ArchConfig(
            input_dim=_parse_int("arch.input_dim", merged["arch.input_dim"], 1),
            encoder_layers=_parse_int_list("arch.encoder_layers",
                                           merged["arch.encoder_layers"]),
            projector_depth=_parse_int("arch.projector_depth",
                                       merged["arch.projector_depth"], 1),
            projector_hidden=_parse_int("arch.projector_hidden",
                                        merged["arch.projector_hidden"], 1),
            projector_out=_parse_int("arch.projector_out",
                                     merged["arch.projector_out"], 1),
            projector_use_bn=_parse_bool("arch.projector_use_bn",
                                         merged["arch.projector_use_bn"]),
            num_classes=_parse_int("arch.num_classes",
                                   merged["arch.num_classes"], 2),
        )
    except ValueError as exc:
        raise ConfigError(f"arch: {exc}") from None

    try:
        train = TrainConfig(
            lr=_parse_float("train.lr", merged["train.lr"], 0.0, exclusive=True),
            momentum=_parse_float("train.momentum", merged["train.momentum"], 0.0),
            batch_size=_parse_int("train.batch_size", merged["train.batch_size"], 2),
            local_epochs=_parse_int("train.local_epochs",
                                    merged["train.local_epochs"], 1),
            rounds=_parse_int("train.rounds", merged["train.rounds"], 0),
            strategy=_parse_choice("train.strategy", merged["train.strategy"],
                                   (STAGE_WISE, SIMULTANEOUS)),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None

    try:
        loss = LossConfig(
            tau=_parse_float("loss.tau", merged["loss.tau"], 0.0, exclusive=True),
            lam=_parse_float("loss.lambda", merged["loss.lambda"], 0.0),
        )
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from None

    source = _parse_choice("data.source", merged["data.source"],
                           (DATA_SYNTHETIC, DATA_FLATFILE))
    if source == DATA_SYNTHETIC:
        try:
            data: SyntheticSpec | FlatFileData = SyntheticSpec(
                num_domains=_parse_int("data.num_domains",
                                       merged["data.num_domains"], 1),
                num_classes=arch.num_classes,
                input_dim=arch.input_dim,
                train_per_client=_parse_int("data.train_per_client",
                                            merged["data.train_per_client"], 2),
                test_per_client=_parse_int("data.test_per_client",
                                           merged["data.test_per_client"], 1),
                prototype_sigma=_parse_float("data.prototype_sigma",
                                             merged["data.prototype_sigma"],
                                             0.0, exclusive=True),
                noise_sigma=_parse_float("data.noise_sigma",
                                         merged["data.noise_sigma"], 0.0),
                domain_shift=_parse_float("data.domain_shift",
                                          merged["data.domain_shift"], 0.0),
                difficulty_spread=_parse_float("data.difficulty_spread",
                                               merged["data.difficulty_spread"], 0.0),
                identity_transforms=_parse_bool("data.identity_transforms",
                                                merged["data.identity_transforms"]),
                seed=_parse_int("data.seed", merged["data.seed"]),
            )
        except DataError as exc:
            raise ConfigError(f"data: {exc}") from None
    else:
        train_files = _parse_str_list(merged["data.train_files"])
        test_files = _parse_str_list(merged["data.test_files"])
        if not train_files:
            raise ConfigError("data.train_files: required for flatfile source")
        if len(train_files) != len(test_files):
            raise ConfigError(
                "data.test_files: must list one file per train file")
        data = FlatFileData(train_files=train_files, test_files=test_files)

    mu_raw = merged["method.mu"].strip()
    mu = _parse_float("method.mu", mu_raw, 0.0) if mu_raw else None
    overrides = (_parse_tag_overrides("method.tag_overrides",
                                      merged["method.tag_overrides"])
                 if merged["method.tag_overrides"].strip() else None)
    try:
        method = make_variant(merged["method.name"], mu=mu,
                              tag_overrides=overrides)
    except DualFedError as exc:
        raise ConfigError(f"method.name: {exc}") from None

    return RunConfig(
        arch=arch,
        train=train,
        loss=loss,
        data=data,
        method=method,
        seeds=_parse_int_list("run.seeds", merged["run.seeds"]),
        output_dir=merged["run.output_dir"],
        eval_every=_parse_int("run.eval_every", merged["run.eval_every"], 1),
        dump_reps=_parse_bool("run.dump_reps", merged["run.dump_reps"]),
        checkpoint_every=_parse_int("run.checkpoint_every",
                                    merged["run.checkpoint_every"], 0),
        figures=_parse_bool("run.figures", merged["run.figures"]),
    )


def parse_config(path: str | None = None,
                 overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Load a config file (optional) and apply CLI overrides on top."""
    values = read_config_file(path) if path is not None else {}
    if overrides:
        for key, value in overrides.items():
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = value
    return build_config(values)


def config_text(values: Mapping[str, str] | None = None) -> str:
    """Render defaults plus the given raw values in the file format."""
    merged = dict(_DEFAULTS)
    if values:
        merged.update(values)
    lines = [f"{key} = {merged[key]}" for key in sorted(merged)]
    return "\n".join(lines) + "\n"
