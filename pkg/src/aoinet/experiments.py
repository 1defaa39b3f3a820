"""Config files, sweeps over episodes, the figure presets and baseline tuning."""

from dataclasses import asdict, dataclass, field, fields, replace
import csv
import json
import logging
import math
import os

import numpy as np
import yaml

from .channel import RadioConfig
from .gnn import GnnConfig
from .policies import MinimumSpanningTree, RandomFlooding, parse_policy
from .protocol import run_episode
from .rl import PpoConfig
from .scenario import MissionConfig

log = logging.getLogger(__name__)

METRICS_FORMAT = "aoinet-metrics/1"
METRICS_HEADER = ["sweep_value", "policy", "mean_aoi", "sem_aoi", "mean_velvar", "sem_velvar",
                  "episodes", "seed_base", "flags"]
SWEEP_AXES = ("receptive_field", "power_ratio", "n_agents", "velocity_ratio")
MODES = ("simulate", "train", "evaluate", "sweep")
P_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


class ConfigError(ValueError):
    pass


def _build(cls, data, where):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}; allowed: {sorted(known)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExperimentSpec:
    mode: str = "simulate"
    mission: MissionConfig = field(default_factory=MissionConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    policies: list = field(default_factory=lambda: ["roundrobin"])
    sweep_axis: str | None = None
    sweep_values: list = field(default_factory=list)
    episodes: int = 100
    seed_base: int = 0
    out_dir: str = "results"
    checkpoint: str | None = None
    save_traces: bool = False
    tune_episodes: int = 20
    reward: str = "aoi"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.sweep_axis is not None and self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {self.sweep_axis!r}")
        if self.sweep_axis is not None and not self.sweep_values:
            raise ConfigError("a sweep axis needs at least one value")
        if self.tune_episodes < 1:
            raise ConfigError("tune_episodes must be >= 1")


def load_config(path_or_dict):
    """Parse a YAML/JSON config into an :class:`ExperimentSpec`.

    Top-level sections: ``mission`` (with nested ``radio``), ``gnn``,
    ``ppo`` and ``experiment``; field names match the dataclasses.
    """
    if isinstance(path_or_dict, dict):
        doc = path_or_dict
    else:
        with open(path_or_dict) as fh:
            doc = yaml.safe_load(fh) or {}
    unknown = set(doc) - {"mission", "gnn", "ppo", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
    mission = dict(doc.get("mission") or {})
    radio = _build(RadioConfig, mission.pop("radio", None), "mission.radio")
    mission = _build(MissionConfig, {**mission, "radio": radio}, "mission")
    gnn = _build(GnnConfig, doc.get("gnn"), "gnn")
    ppo = _build(PpoConfig, doc.get("ppo"), "ppo")
    exp = dict(doc.get("experiment") or {})
    return _build(ExperimentSpec, {**exp, "mission": mission, "gnn": gnn, "ppo": ppo}, "experiment")


def spec_to_dict(spec: ExperimentSpec):
    d = asdict(spec)
    exp = {k: v for k, v in d.items() if k not in ("mission", "gnn", "ppo")}
    return {"mission": d["mission"], "gnn": d["gnn"], "ppo": d["ppo"], "experiment": exp}


def apply_axis(mission: MissionConfig, gnn: GnnConfig, axis, value):
    if axis is None:
        return mission, gnn
    if axis == "receptive_field":
        return mission, replace(gnn, receptive_field=int(value))
    if axis == "power_ratio":
        return replace(mission, comm_range_ratio=float(value)), gnn
    if axis == "n_agents":
        return replace(mission, n_agents=int(value), side_length_m=None), gnn
    if axis == "velocity_ratio":
        return replace(mission, velocity_ratio=float(value), v_max=None), gnn
    raise ConfigError(f"unknown sweep axis {axis!r}")


def sem(values):
    """Standard error of the mean; 0 (flagged by the caller) for a single value."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def run_episodes(mission, policy, episodes, seed_base, trace_dir=None):
    """Episode ``e`` uses seed ``seed_base + e``; returns per-episode metrics."""
    out = []
    for e in range(episodes):
        seed = seed_base + e
        trace = run_episode(mission, policy, seed=seed)
        if trace_dir is not None:
            write_trace(os.path.join(trace_dir, f"episode_{seed}.jsonl"), trace)
        out.append(trace.metrics)
    return out


def summarize(value, label, metrics, seed_base):
    aoi = [m["mean_aoi"] for m in metrics]
    vv = [m["mean_velvar"] for m in metrics]
    flags = sorted({f for m in metrics for f in m["flags"]})
    if len(metrics) == 1:
        flags.append("sem_undefined")
    return {
        "sweep_value": value,
        "policy": label,
        "mean_aoi": float(np.mean(aoi)),
        "sem_aoi": sem(aoi),
        "mean_velvar": float(np.mean(vv)),
        "sem_velvar": sem(vv),
        "episodes": len(metrics),
        "seed_base": seed_base,
        "flags": ";".join(flags),
    }


def tune_baseline(kind, mission: MissionConfig, episodes=20, grid=P_GRID, seed_base=0):
    """Grid-search p for ``flood`` or ``mst``; returns ``(best_p, [(p, mean_aoi), ...])``.

    Ties go to the smaller p.
    """
    if kind not in ("flood", "mst"):
        raise ValueError("only flood and mst take a probability")
    make = RandomFlooding if kind == "flood" else MinimumSpanningTree
    table = []
    for p in sorted(grid):
        metrics = run_episodes(mission, make(p), episodes, seed_base)
        table.append((float(p), float(np.mean([m["mean_aoi"] for m in metrics]))))
    best = min(table, key=lambda row: (row[1], row[0]))
    return best[0], table


def _resolve_checkpoint(template, value, fallback):
    if template:
        path = template.format(value=value) if "{value}" in template else template
        if os.path.exists(path):
            return path
    if fallback:
        path = fallback.format(value=value) if "{value}" in fallback else fallback
        if os.path.exists(path):
            return path
    return None


def make_policies(spec: ExperimentSpec, mission, gnn_cfg, value):
    """Instantiate the configured policies for one sweep point (tuning flood/mst if needed)."""
    out = []
    for name in spec.policies:
        base = name.split("(")[0].strip()
        bare = "(" not in name
        if base in ("flood", "mst") and bare:
            p, _ = tune_baseline(base, mission, spec.tune_episodes, seed_base=spec.seed_base + 10_000)
            log.info("tuned %s p=%.1f at %s=%s", base, p, spec.sweep_axis, value)
            out.append(parse_policy(name, default_p=p))
        elif base == "gnn":
            template = None if bare else name[name.index("(") + 1 : name.rindex(")")]
            path = _resolve_checkpoint(template, value, spec.checkpoint)
            if path is None:
                log.warning("no checkpoint for %s at %s=%s; skipped", name, spec.sweep_axis, value)
                continue
            policy = parse_policy(f"gnn({path})")
            if policy.net.config.receptive_field != gnn_cfg.receptive_field and spec.sweep_axis == "receptive_field":
                log.warning("checkpoint %s has receptive field %d, sweep point asks for %d",
                            path, policy.net.config.receptive_field, gnn_cfg.receptive_field)
            out.append(policy)
        else:
            out.append(parse_policy(name))
    return out


def run_experiment(spec: ExperimentSpec):
    """Run every (sweep point, policy) pair and write ``metrics.csv``; returns the rows."""
    values = spec.sweep_values if spec.sweep_axis else [None]
    # validate every point before running anything
    points = [(v, *apply_axis(spec.mission, spec.gnn, spec.sweep_axis, v)) for v in values]
    for v, mission, _ in points:
        _ = mission.link
    os.makedirs(spec.out_dir, exist_ok=True)
    rows = []
    for value, mission, gnn_cfg in points:
        for policy in make_policies(spec, mission, gnn_cfg, value):
            label = repr(policy)
            trace_dir = None
            if spec.save_traces:
                trace_dir = os.path.join(spec.out_dir, "traces", f"{spec.sweep_axis or 'point'}={value}",
                                         _safe(label))
                os.makedirs(trace_dir, exist_ok=True)
            metrics = run_episodes(mission, policy, spec.episodes, spec.seed_base, trace_dir)
            row = summarize("" if value is None else value, label, metrics, spec.seed_base)
            rows.append(row)
            log.info("%s=%s %s mean AoI %.3f +- %.3f", spec.sweep_axis, value, label, row["mean_aoi"], row["sem_aoi"])
    write_metrics(os.path.join(spec.out_dir, "metrics.csv"), rows)
    with open(os.path.join(spec.out_dir, "experiment.yaml"), "w") as fh:
        yaml.safe_dump(spec_to_dict(spec), fh, sort_keys=False)
    return rows


def _safe(label):
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in label)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# format={METRICS_FORMAT}\n")
        w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_metrics(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_trace(path, trace):
    with open(path, "w") as fh:
        for rec in trace.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path):
    with open(path) as fh:
        return [json.loads(ln) for ln in fh]


def metrics_from_trace(records):
    """Recompute episode metrics from the per-window records of a trace."""
    from .protocol import episode_metrics

    return episode_metrics([{k: v for k, v in r.items() if k != "kind"} for r in records if r["kind"] == "window"])


def preset_fig(name, checkpoint_dir="checkpoints", episodes=100):
    """Experiment specs for the four figure-style sweeps."""
    baselines = ["roundrobin", "flood", "mst"]
    if name == "receptive_field":
        return ExperimentSpec(
            mode="sweep",
            mission=MissionConfig(task="static"),
            policies=baselines + [f"gnn({checkpoint_dir}/rf{{value}}/checkpoint.json)"],
            sweep_axis="receptive_field",
            sweep_values=[0, 1, 2, 3, 4, 5],
            episodes=episodes,
            out_dir="results/receptive_field",
        )
    if name == "power":
        return ExperimentSpec(
            mode="sweep",
            mission=MissionConfig(task="static"),
            policies=baselines + [f"gnn({checkpoint_dir}/power{{value}}/checkpoint.json)"],
            sweep_axis="power_ratio",
            sweep_values=[0.125, 0.25, 0.5, 1.0],
            episodes=episodes,
            checkpoint=f"{checkpoint_dir}/power0.25/checkpoint.json",
            out_dir="results/power",
        )
    if name == "teamsize":
        return ExperimentSpec(
            mode="sweep",
            mission=MissionConfig(task="random_walk", velocity_ratio=0.15),
            policies=baselines + [f"gnn({checkpoint_dir}/team{{value}}/checkpoint.json)",
                                  f"gnn({checkpoint_dir}/team40/checkpoint.json)"],
            sweep_axis="n_agents",
            sweep_values=[10, 20, 40, 80],
            episodes=episodes,
            out_dir="results/teamsize",
        )
    if name == "flocking":
        return ExperimentSpec(
            mode="sweep",
            mission=MissionConfig(task="flocking"),
            policies=baselines + [f"gnn({checkpoint_dir}/flocking_aoi/checkpoint.json)",
                                  f"gnn({checkpoint_dir}/flocking_velvar/checkpoint.json)"],
            sweep_axis="velocity_ratio",
            sweep_values=[0.05, 0.1, 0.15, 0.2, 0.25],
            episodes=episodes,
            out_dir="results/flocking",
        )
    raise ValueError(f"unknown preset {name!r}; expected receptive_field, power, teamsize or flocking")
