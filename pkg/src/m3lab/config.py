"""Experiment configuration: sectioned key-value files read with configparser.

Every key has a type and default in :data:`SCHEMA`; unknown sections or
keys are rejected, and values are range-checked before any run starts.
Lists are comma separated.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .agents import ACConfig
from .models import ModelConfig
from .planner import DQNConfig, EXPANSIONS, PlanConfig, VALUATIONS

INT, FLOAT, STR, BOOL, INTS, FLOATS, STRS = "int", "float", "str", "bool", "ints", "floats", "strs"

SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "experiment": {
        "name": (STR, "experiment"),
        "env": (STR, "cartpole"),
        "seeds": (INTS, list(range(10))),
        "episodes": (INT, 300),
        "model_kinds": (STRS, ["none", "one-step", "m3", "hallucinated"]),
        "H": (INT, 8),
        "horizons": (INTS, [1, 2, 4, 8]),
        "K": (INT, 5),
        "epsilon": (FLOAT, 0.01),
        "snapshot_every": (INT, 100),
        "workers": (INT, 1),
    },
    "env": {
        "horizon_cap": (INT, 0),          # 0 keeps the environment's own cap
        "grid_n": (INT, 5),
        "goal_reward": (FLOAT, 10.0),
        "capture_reward": (FLOAT, -1.0),
        "step_reward": (FLOAT, -0.1),
    },
    "model": {
        "hidden": (INTS, [64]),
        "lr": (FLOAT, 1e-3),
        "batch_size": (INT, 64),
        "epochs": (INT, 30),
        "loss": (STR, "l2"),
        "reward_source": (STR, "learned"),
        "halluc_depth": (INT, 4),
        "halluc_ratio": (FLOAT, 1.0),
        "em_components": (INT, 4),
        "em_iters": (INT, 10),
        "em_sigma": (FLOAT, 0.5),
        "em_mstep_steps": (INT, 200),
        "model_steps": (INT, 40),
    },
    "agent": {
        "hidden": (INTS, [64]),
        "actor_lr": (FLOAT, 1e-3),
        "critic_lr": (FLOAT, 3e-3),
        "value_scale": (FLOAT, 0.0),       # 0 picks the environment default
        "batch_size": (INT, 32),
        "critic_passes": (INT, 1),
    },
    "planner": {
        "H": (INT, 4),
        "expansion": (STR, "greedy"),
        "valuation": (STR, "ensemble"),
        "em_samples": (INT, 4),
        "sweep_strategies": (BOOL, False),
        "episodes_per_point": (INT, 20),
    },
    "dqn": {
        "q_kind": (STR, "net"),
        "hidden": (INTS, [64]),
        "lr": (FLOAT, 1e-3),
        "gamma": (FLOAT, 0.99),
        "alpha": (FLOAT, 0.5),
        "batch_size": (INT, 32),
        "replay_capacity": (INT, 10000),
        "warmup": (INT, 64),
        "target_sync": (INT, 100),
        "value_scale": (FLOAT, 10.0),
    },
    "diagnostics": {
        "trials": (INT, 100),
        "bound_horizons": (INTS, [2, 3, 4, 5]),
        "corruption": (STR, "shift"),
        "max_entries": (INT, 5),
        "train_episodes": (INT, 100),
        "eval_episodes": (INT, 20),
        "path_counts": (INTS, [1, 2, 4, 8, 16]),
        "em_episodes": (INT, 100),
        "em_eval_episodes": (INT, 50),
    },
}

ENV_DEFAULT_VALUE_SCALE = {"cartpole": 100.0, "acrobot": 100.0, "gridworld": 10.0}


class ConfigError(ValueError):
    pass


def _parse(kind: str, text: str, where: str):
    text = text.strip()
    try:
        if kind == INT:
            return int(text)
        if kind == FLOAT:
            return float(text)
        if kind == BOOL:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == STR:
            return text
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if kind == INTS:
            return [int(p) for p in parts]
        if kind == FLOATS:
            return [float(p) for p in parts]
        if kind == STRS:
            return parts
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {kind}") from None
    raise AssertionError(kind)


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    source: str = "<defaults>"

    def __post_init__(self):
        resolved = {sec: {k: (list(v) if isinstance(v, list) else v)
                          for k, (_, v) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, kv in self.values.items():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
            for k, v in kv.items():
                if k not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key {k!r} in [{sec}]")
                resolved[sec][k] = v
        self.values = resolved
        self.validate()

    def __getitem__(self, key: str):
        sec, _, k = key.partition(".")
        return self.values[sec][k]

    @property
    def exp(self) -> dict:
        return self.values["experiment"]

    def validate(self) -> None:
        e = self.values["experiment"]
        if e["env"] not in ("cartpole", "acrobot", "gridworld"):
            raise ConfigError(f"unknown environment {e['env']!r}")
        if not e["seeds"]:
            raise ConfigError("seeds must be non-empty")
        for key in ("episodes", "H", "K", "workers"):
            if e[key] < 1:
                raise ConfigError(f"experiment.{key} must be >= 1")
        if not 0.0 <= e["epsilon"] <= 1.0:
            raise ConfigError("epsilon must be in [0, 1]")
        if e["snapshot_every"] < 0:
            raise ConfigError("snapshot_every must be >= 0")
        bad = set(e["model_kinds"]) - {"none", "one-step", "m3", "hallucinated", "em"}
        if bad:
            raise ConfigError(f"unknown model kinds {sorted(bad)}")
        if any(h < 1 for h in e["horizons"]):
            raise ConfigError("horizons must be >= 1")
        m = self.values["model"]
        if m["loss"] not in ("l2", "l1-smooth"):
            raise ConfigError(f"unknown loss {m['loss']!r}")
        if m["reward_source"] not in ("learned", "oracle"):
            raise ConfigError("reward_source must be learned|oracle")
        if m["em_sigma"] <= 0 or m["em_components"] < 1:
            raise ConfigError("em_sigma must be > 0 and em_components >= 1")
        for sec, key in (("model", "hidden"), ("agent", "hidden"), ("dqn", "hidden")):
            if not self.values[sec][key] or min(self.values[sec][key]) < 1:
                raise ConfigError(f"{sec}.{key} must list positive widths")
        p = self.values["planner"]
        if p["expansion"] not in EXPANSIONS or p["valuation"] not in VALUATIONS:
            raise ConfigError("planner.expansion/valuation out of range")
        if p["H"] < 1 or p["em_samples"] < 1 or p["episodes_per_point"] < 1:
            raise ConfigError("planner.H, em_samples, episodes_per_point must be >= 1")
        if self.values["dqn"]["q_kind"] not in ("net", "tabular"):
            raise ConfigError("dqn.q_kind must be net|tabular")
        if self.values["dqn"]["q_kind"] == "tabular" and e["env"] != "gridworld":
            raise ConfigError("tabular Q needs env = gridworld")
        d = self.values["diagnostics"]
        if d["corruption"] not in ("shift", "random"):
            raise ConfigError("diagnostics.corruption must be shift|random")
        if any(h < 1 for h in d["bound_horizons"]) or any(k < 1 for k in d["path_counts"]):
            raise ConfigError("bound_horizons and path_counts must be >= 1")

    # -- derived configs ----------------------------------------------------
    def env_kwargs(self) -> dict:
        e, env = self.values["env"], self.exp["env"]
        kw = {}
        if env == "gridworld":
            kw = {"n": e["grid_n"], "goal_reward": e["goal_reward"],
                  "capture_reward": e["capture_reward"], "step_reward": e["step_reward"]}
        if e["horizon_cap"] > 0:
            kw["horizon_cap"] = e["horizon_cap"]
        return kw

    def model_config(self, seed: int = 0) -> ModelConfig:
        m = dict(self.values["model"])
        m.pop("model_steps")
        m["hidden"] = tuple(m["hidden"])
        return ModelConfig(**m, seed=seed)

    def ac_config(self) -> ACConfig:
        a = self.values["agent"]
        vs = a["value_scale"] or ENV_DEFAULT_VALUE_SCALE[self.exp["env"]]
        return ACConfig(hidden=tuple(a["hidden"]), actor_lr=a["actor_lr"],
                        critic_lr=a["critic_lr"], value_scale=vs, batch_size=a["batch_size"],
                        critic_passes=a["critic_passes"],
                        model_steps=self.values["model"]["model_steps"],
                        model=self.model_config())

    def plan_config(self, **over) -> PlanConfig:
        p = self.values["planner"]
        kw = dict(H=p["H"], expansion=p["expansion"], valuation=p["valuation"],
                  em_samples=p["em_samples"])
        kw.update(over)
        return PlanConfig(**kw)

    def dqn_config(self, **over) -> DQNConfig:
        d = dict(self.values["dqn"])
        d["hidden"] = tuple(d["hidden"])
        d.update(epsilon=self.exp["epsilon"], model_steps=self.values["model"]["model_steps"],
                 snapshot_every=self.exp["snapshot_every"], plan=self.plan_config(),
                 model=self.model_config())
        d.update(over)
        return DQNConfig(**d)

    # -- identity -----------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case sensitive (H, K)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        values[sec] = {}
        for k, raw in cp.items(sec):
            if k not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {k!r} in [{sec}]")
            values[sec][k] = _parse(SCHEMA[sec][k][0], raw, f"{source} [{sec}] {k}")
    return ExperimentConfig(values, source)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec, kv in cfg.values.items():
        lines.append(f"[{sec}]")
        for k, v in kv.items():
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
