"""Flat-sectioned run configuration: ``key = value`` lines under ``[section]``
headers.  Every key has a default; unknown sections or keys are errors, so a
manifest written by one run can be fed back as the config of the next.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .baselines import RegularizerSpec
from .environment import GridSpec, LinkParams, PathLossParams, Region
from .evaluation import EXPERIMENT_IDS, ExperimentConfig
from .model import ModelConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "default_config"]


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_float_list(text: str) -> tuple[float, ...]:
    items = [part.strip() for part in text.split(",") if part.strip()]
    return tuple(float(part) for part in items)


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str.strip,
    "float_list": _parse_float_list,
    "str_list": _parse_str_list,
}

# section -> key -> (type name, default)
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "run": {
        "seed": ("int", 0),
        "threads": ("int", 1),
        "workdir": ("str", "."),
    },
    "environment": {
        "region_x": ("float", 350.0),
        "region_y": ("float", 350.0),
        "region_z": ("float", 20.0),
        "grid_nx": ("int", 32),
        "grid_ny": ("int", 32),
        "grid_nz": ("int", 1),
        "building_width": ("float", 40.0),
        "building_depth": ("float", 40.0),
        "loss_density": ("float", 1.0),
        "path_loss_l0": ("float", 40.05),
        "path_loss_gamma": ("float", 2.0),
        "path_loss_d0": ("float", 1.0),
        "max_buildings": ("int", 8),
    },
    "dataset": {
        "num_train_envs": ("int", 68),
        "num_test_envs": ("int", 17),
        "num_terminals": ("int", 50),
        "noise_std": ("float", 0.0),
        "train_seed_base": ("int", 1000),
        "test_seed_base": ("int", 9000),
        "write_csv": ("bool", False),
    },
    "link": {
        "bandwidth": ("float", 20e6),
        "tx_power": ("float", 0.3),
        "noise_power_dbm": ("float", -96.0),
        "frequency": ("float", 2.4e9),
    },
    "model": {
        "num_blocks": ("int", 4),
        "num_heads": ("int", 2),
        "embed_dim": ("int", 64),
        "mlp_ratio": ("int", 4),
        "causal": ("bool", True),
        "coordinate_scale": ("float", 200.0),
        "init_seed": ("int", 0),
    },
    "trainer": {
        "steps": ("int", 1500),
        "batch_episodes": ("int", 4),
        "learning_rate": ("float", 3e-4),
        "warmup_steps": ("int", 200),
        "grad_clip": ("float", 1.0),
        "context_min": ("int", 4),
        "context_max": ("int", 256),
        "target_cap": ("int", 8),
        "lr_decay": ("str", "none"),
        "val_every": ("int", 0),
        "val_context": ("int", 100),
        "checkpoint_every": ("int", 0),
        "resample_episodes": ("bool", True),
    },
    "baselines": {
        "knn_k": ("int", 5),
        "lambda_l1": ("float", 0.0),
        "lambda_total_variation": ("float", 0.0),
        "lambda_tikhonov": ("float", 0.0),
        "iterations": ("int", 1500),
        "tolerance": ("float", 1e-8),
        "selection_env_seed": ("int", 4000),
        "selection_context": ("int", 100),
    },
    "evaluation": {
        "experiment": ("str", "mae_vs_m"),
        "sweep": ("float_list", (25.0, 50.0, 100.0, 200.0)),
        "num_envs": ("int", 17),
        "num_eval_pairs": ("int", 30),
        "context_size": ("int", 100),
        "measured_fraction": ("float", 0.5),
        "run_label": ("str", ""),
        "env_seed_base": ("int", 9000),
        "terminal_seed_base": ("int", 500),
        "eval_seed_base": ("int", 700),
        "estimators": ("str_list", ("crete", "knn", "tomo_l1", "tomo_total_variation", "tomo_tikhonov")),
        "checkpoint": ("str", ""),
        "baseline_params": ("str", ""),
    },
    # Written by runs for reproducibility; accepted and ignored as input.
    "manifest": {
        "command": ("str", ""),
        "argv": ("str", ""),
        "version": ("str", ""),
    },
    "artifacts": {},
}


@dataclass
class RunConfig:
    values: dict

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        kind, _ = SCHEMA[section][key]
        try:
            self.values[section][key] = _PARSERS[kind](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc

    # -- builders for module-level config objects ---------------------------

    def region(self) -> Region:
        env = self.values["environment"]
        return Region(env["region_x"], env["region_y"], env["region_z"])

    def grid(self) -> GridSpec:
        env = self.values["environment"]
        return GridSpec(env["grid_nx"], env["grid_ny"], env["grid_nz"])

    def path_loss(self) -> PathLossParams:
        env = self.values["environment"]
        return PathLossParams(env["path_loss_l0"], env["path_loss_gamma"], env["path_loss_d0"])

    def link(self) -> LinkParams:
        link = self.values["link"]
        return LinkParams(link["bandwidth"], link["tx_power"], link["noise_power_dbm"], link["frequency"])

    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(
            num_blocks=m["num_blocks"],
            num_heads=m["num_heads"],
            embed_dim=m["embed_dim"],
            mlp_ratio=m["mlp_ratio"],
            causal=m["causal"],
            coordinate_scale=m["coordinate_scale"],
        )

    def train_config(self) -> TrainConfig:
        t = self.values["trainer"]
        return TrainConfig(
            steps=t["steps"],
            batch_episodes=t["batch_episodes"],
            learning_rate=t["learning_rate"],
            warmup_steps=t["warmup_steps"],
            grad_clip=t["grad_clip"],
            seed=self.get("run", "seed"),
            context_min=t["context_min"],
            context_max=t["context_max"],
            target_cap=t["target_cap"],
            lr_decay=t["lr_decay"],
            val_every=t["val_every"],
            val_context=t["val_context"],
            resample_episodes=t["resample_episodes"],
            checkpoint_every=t["checkpoint_every"],
        )

    def regularizer(self, kind: str, lam: float) -> RegularizerSpec:
        b = self.values["baselines"]
        return RegularizerSpec(kind=kind, lam=lam, iterations=b["iterations"], tolerance=b["tolerance"])

    def experiment_config(self) -> ExperimentConfig:
        e = self.values["evaluation"]
        env = self.values["environment"]
        experiment_id = e["experiment"]
        if experiment_id not in EXPERIMENT_IDS:
            raise ConfigError(f"unknown experiment {experiment_id!r}; expected one of {EXPERIMENT_IDS}")
        sweep = e["sweep"]
        if experiment_id != "cluster_head_vs_threshold":
            sweep = tuple(int(v) for v in sweep)
        return ExperimentConfig(
            id=experiment_id,
            sweep=tuple(sweep),
            num_envs=e["num_envs"],
            env_seed_base=e["env_seed_base"],
            terminal_seed_base=e["terminal_seed_base"],
            eval_seed_base=e["eval_seed_base"],
            max_buildings=env["max_buildings"],
            num_terminals=self.get("dataset", "num_terminals"),
            num_eval_pairs=e["num_eval_pairs"],
            context_size=e["context_size"],
            measured_fraction=e["measured_fraction"],
            noise_std=self.get("dataset", "noise_std"),
            building_size=(env["building_width"], env["building_depth"]),
            region=self.region(),
            grid=self.grid(),
            link=self.link(),
        )

    def serialize(self, extra_sections: dict | None = None) -> str:
        """Render as config text; ``extra_sections`` appends raw key/value maps
        (used for the manifest and artifact hashes)."""
        lines = []
        for section, keys in SCHEMA.items():
            if section in ("manifest", "artifacts"):
                continue
            lines.append(f"[{section}]")
            for key in keys:
                value = self.values[section][key]
                lines.append(f"{key} = {_format_value(value)}")
            lines.append("")
        for section, mapping in (extra_sections or {}).items():
            lines.append(f"[{section}]")
            for key, value in mapping.items():
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def default_config() -> RunConfig:
    return RunConfig(values={sec: {k: v for k, (_, v) in keys.items()} for sec, keys in SCHEMA.items()})


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    cfg = default_config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if section in ("manifest", "artifacts"):
                continue  # reproducibility metadata, not run inputs
            cfg.set(section, key, raw)
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="ascii") as fh:
        return parse_config(fh.read())
