"""Command-line driver.

Grammar:

    kooplift <generate|train|evaluate|control|compare> --config <path>
             [--out <dir>] [--seed <N>]

One JSON config describes a run (system, backend, dataset, network,
training, evaluation, control). --out overrides the output directory, the
KOOPLIFT_OUT environment variable sits between the flag and the config
value, and --seed overrides the seed of whichever command is running.
Exit codes: 0 success, 1 runtime or data error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import (
    InstabilityError,
    UncontrollableModelError,
    closed_loop_sim,
    default_weights,
    dlqr,
    settling_time,
    spectral_radius,
)
from .dynamics import (
    PENDULUM_CONTROL_NAMES,
    PENDULUM_DT,
    PENDULUM_STATE_NAMES,
    TWOBODY_CONTROL_NAMES,
    TWOBODY_STATE_NAMES,
    PendulumParams,
    generate_pendulum_dataset,
    generate_twobody_dataset,
    load_dataset,
    pendulum_deriv,
    save_dataset,
)
from .kan import SplineGrid
from .koopman import (
    RolloutDivergedError,
    TrainConfig,
    TrainingDivergedError,
    load_model,
    rollout,
    save_history,
    save_model,
    train,
)

OUT_ENV_VAR = "KOOPLIFT_OUT"

_SYSTEMS = {
    "pendulum": {
        "n": 2,
        "state_names": PENDULUM_STATE_NAMES,
        "control_names": PENDULUM_CONTROL_NAMES,
    },
    "twobody": {
        "n": 4,
        "state_names": TWOBODY_STATE_NAMES,
        "control_names": TWOBODY_CONTROL_NAMES,
    },
}


class ConfigError(Exception):
    """The config document is structurally or semantically invalid."""


@dataclass
class RunConfig:
    system: str
    backend: str
    out_dir: str | None = None
    dataset: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    control: dict = field(default_factory=dict)
    model_path: str | None = None
    compare: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.system not in _SYSTEMS:
            raise ConfigError(
                f"system must be one of {sorted(_SYSTEMS)}, got {self.system!r}"
            )
        if self.backend not in ("kan", "mlp"):
            raise ConfigError(f"backend must be 'kan' or 'mlp', got {self.backend!r}")
        for section in ("dataset", "network", "train", "evaluation", "control",
                        "compare"):
            if not isinstance(getattr(self, section), dict):
                raise ConfigError(f"config section {section!r} must be an object")
        n_ic = self.dataset.get("n_ic", 1)
        if not isinstance(n_ic, int) or n_ic < 1:
            raise ConfigError("dataset.n_ic must be a positive integer")

    @property
    def n_states(self) -> int:
        return _SYSTEMS[self.system]["n"]

    def network_shape(self) -> list[int]:
        net = self.network
        n_obs = int(net.get("n_observables", 1))
        hidden = int(net.get("hidden_layers", 1))
        neurons = int(net.get("neurons", 1))
        if n_obs < 1 or hidden < 0 or neurons < 1:
            raise ConfigError("network sizes must be positive")
        return [self.n_states] + [neurons] * hidden + [n_obs]

    def spline_grid(self) -> SplineGrid:
        doc = self.network.get("grid") or {}
        try:
            return SplineGrid(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid network.grid: {exc}") from exc

    def train_config(self, seed_override: int | None) -> TrainConfig:
        doc = dict(self.train)
        if seed_override is not None:
            doc["seed"] = seed_override
        doc["shape"] = self.network_shape()
        doc["grid"] = self.spline_grid() if self.backend == "kan" else None
        try:
            return TrainConfig(**doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train section: {exc}") from exc


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _dataset_dir(cfg: RunConfig, out_dir: Path) -> Path:
    if cfg.dataset.get("path"):
        return Path(cfg.dataset["path"])
    return out_dir / "dataset"


def _generate(cfg: RunConfig, seed: int):
    if cfg.system == "pendulum":
        return generate_pendulum_dataset(
            cfg.dataset.get("n_ic", 15), seed, cfg.train.get("alpha", 25)
        )
    return generate_twobody_dataset(
        cfg.dataset.get("n_ic", 30),
        seed,
        cfg.dataset.get("points_per_orbit", 800),
    )


def cmd_generate(cfg: RunConfig, out_dir: Path, seed_override: int | None) -> int:
    seed = seed_override if seed_override is not None else cfg.dataset.get("seed", 0)
    trajs = _generate(cfg, seed)
    names = _SYSTEMS[cfg.system]
    dataset_dir = _dataset_dir(cfg, out_dir)
    manifest = save_dataset(
        trajs,
        dataset_dir,
        names["state_names"],
        names["control_names"],
        manifest_extra={
            "system": cfg.system,
            "seed": seed,
            "n_ic": len(trajs),
            **(
                {"points_per_orbit": cfg.dataset.get("points_per_orbit", 800)}
                if cfg.system == "twobody"
                else {}
            ),
        },
    )
    print(f"wrote {len(trajs)} trajectories under {dataset_dir} ({manifest.name})")
    return 0


def cmd_train(cfg: RunConfig, out_dir: Path, seed_override: int | None) -> int:
    dataset_dir = _dataset_dir(cfg, out_dir)
    trajs = load_dataset(dataset_dir)
    tc = cfg.train_config(seed_override)
    started = time.perf_counter()
    model, history = train(cfg.backend, trajs, tc)
    wall = time.perf_counter() - started
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "model.json"
    save_model(
        model,
        model_path,
        cfg=tc,
        metadata={"system": cfg.system, "backend": cfg.backend,
                  "dataset": str(dataset_dir)},
    )
    save_history(history, out_dir / "loss_history.csv")
    last = history[-1]
    summary = {
        "system": cfg.system,
        "backend": cfg.backend,
        "n_params": model.n_params,
        "n_total": model.n_total,
        "K_shape": list(model.K.shape),
        "epochs": tc.epochs,
        "wall_time_s": wall,  # hardware dependent; not covered by determinism
        "final_recon": last.recon,
        "final_pred": last.pred,
        "final_total": last.total,
        "best_total": min(r.total for r in history),
        "model_file": model_path.name,
        "history_file": "loss_history.csv",
    }
    _write_json(out_dir / "summary.json", summary)
    print(
        f"trained {cfg.backend} on {cfg.system}: {model.n_params} parameters, "
        f"lifted size {model.n_total}, best total loss {summary['best_total']:.6g}, "
        f"{wall:.2f}s"
    )
    return 0


def _eval_trajectories(cfg: RunConfig, seed: int, section: dict):
    if cfg.system == "pendulum":
        return generate_pendulum_dataset(
            section.get("n_ic", 5), seed, cfg.train.get("alpha", 25)
        )
    kwargs = {}
    if section.get("radius_range"):
        lo, hi = section["radius_range"]
        kwargs["radius_range"] = (float(lo), float(hi))
    return generate_twobody_dataset(
        section.get("n_ic", 3),
        seed,
        cfg.dataset.get("points_per_orbit", 800),
        **kwargs,
    )


def _evaluate_into(cfg: RunConfig, model, trajs, dest: Path) -> dict:
    """Corrected rollouts against the truth; per-IC CSVs plus a metrics dict."""
    names = _SYSTEMS[cfg.system]["state_names"]
    dest.mkdir(parents=True, exist_ok=True)
    per_ic = []
    worst = np.zeros(len(names))
    for i, truth in enumerate(trajs):
        pred = rollout(model, truth.states[0], truth.controls, truth.dt,
                       correct=True)
        err = np.abs(pred.states - truth.states)
        with open(dest / f"eval_{i:03d}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["t"]
                + [f"true_{s}" for s in names]
                + [f"pred_{s}" for s in names]
                + [f"abs_err_{s}" for s in names]
            )
            for k in range(truth.states.shape[0]):
                writer.writerow(
                    [_fmt(k * truth.dt)]
                    + [_fmt(v) for v in truth.states[k]]
                    + [_fmt(v) for v in pred.states[k]]
                    + [_fmt(v) for v in err[k]]
                )
        ic_max = err.max(axis=0)
        worst = np.maximum(worst, ic_max)
        per_ic.append({
            "initial_state": [float(v) for v in truth.states[0]],
            "max_abs_error": {s: float(e) for s, e in zip(names, ic_max)},
        })
    metrics = {
        "n_ic": len(trajs),
        "max_abs_error": {s: float(e) for s, e in zip(names, worst)},
        "per_ic": per_ic,
    }
    if cfg.system == "pendulum":
        metrics["max_abs_angle_error"] = float(worst[0])
    else:
        metrics["max_abs_position_error"] = float(max(worst[0], worst[1]))
    return metrics


def cmd_evaluate(cfg: RunConfig, out_dir: Path, seed_override: int | None) -> int:
    model_path = Path(cfg.model_path) if cfg.model_path else out_dir / "model.json"
    if not model_path.is_file():
        raise FileNotFoundError(f"model file not found: {model_path}")
    model, _, _ = load_model(model_path)
    section = cfg.evaluation
    seed = seed_override if seed_override is not None else section.get("seed", 900)
    trajs = _eval_trajectories(cfg, seed, section)
    metrics = _evaluate_into(cfg, model, trajs, out_dir / "eval")
    metrics["seed"] = seed
    extra = section.get("extrapolation")
    if extra and cfg.system == "twobody":
        extra_trajs = _eval_trajectories(cfg, seed + 1, extra)
        metrics["extrapolation"] = _evaluate_into(
            cfg, model, extra_trajs, out_dir / "eval_extrapolation"
        )
        metrics["extrapolation"]["radius_range"] = extra.get("radius_range")
    _write_json(out_dir / "eval" / "metrics.json", metrics)
    headline = (
        f"max abs angle error {metrics['max_abs_angle_error']:.4g} rad"
        if cfg.system == "pendulum"
        else f"max abs position error {metrics['max_abs_position_error']:.4g} km"
    )
    print(f"evaluated {model_path.name} on {metrics['n_ic']} held-out ICs: {headline}")
    return 0


def cmd_control(cfg: RunConfig, out_dir: Path, seed_override: int | None) -> int:
    del seed_override  # the control loop is deterministic
    model_path = Path(cfg.model_path) if cfg.model_path else out_dir / "model.json"
    if not model_path.is_file():
        raise FileNotFoundError(f"model file not found: {model_path}")
    model, _, _ = load_model(model_path)
    if model.B.shape[1] == 0:
        print("error: model has no control input; nothing to regulate",
              file=sys.stderr)
        return 1
    if cfg.system != "pendulum":
        raise ConfigError("closed-loop control is implemented for the pendulum")
    section = cfg.control
    q, r = default_weights(
        model.n, model.n_total, model.B.shape[1],
        q_state=float(section.get("q_state", 1.0)),
        r=float(section.get("r", 0.1)),
    )
    gain = dlqr(model.K, model.B, q, r)
    params = PendulumParams()
    plant = lambda x, u: pendulum_deriv(x, u, params)
    traj = closed_loop_sim(
        model,
        gain,
        plant,
        np.asarray(section.get("x0", [1.0, 0.0]), dtype=float),
        duration=float(section.get("duration", 10.0)),
        dt=float(section.get("dt", PENDULUM_DT)),
        u_limit=float(section.get("u_limit", 5.0)),
    )
    dest = out_dir / "control"
    names = _SYSTEMS[cfg.system]
    save_dataset([traj], dest, names["state_names"], names["control_names"],
                 manifest_extra={"system": cfg.system, "kind": "closed_loop"})
    (dest / "traj_0000.csv").rename(dest / "closed_loop.csv")
    manifest_path = dest / "manifest.json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    manifest["files"][0]["name"] = "closed_loop.csv"
    _write_json(manifest_path, manifest)
    settle = settling_time(traj, component=0, threshold=0.05)
    metrics = {
        "settling_time_s": settle,
        "settling_threshold_rad": 0.05,
        "peak_abs_control": float(np.max(np.abs(traj.controls))) if traj.controls.size else 0.0,
        "final_state": [float(v) for v in traj.states[-1]],
        "closed_loop_spectral_radius": spectral_radius(model.K - model.B @ gain.F),
    }
    _write_json(dest / "control_metrics.json", metrics)
    settle_text = "never" if settle is None else f"{settle:.2f}s"
    x0_text = [float(v) for v in np.asarray(section.get("x0", [1.0, 0.0]))]
    print(
        f"closed loop from {x0_text}: "
        f"settled {settle_text}, peak |u| {metrics['peak_abs_control']:.3g}"
    )
    return 0


def cmd_compare(cfg: RunConfig, out_dir: Path, seed_override: int | None) -> int:
    section = cfg.compare
    if not section.get("model_a") or not section.get("model_b"):
        raise ConfigError("compare requires compare.model_a and compare.model_b")
    rows = []
    seed = (
        seed_override
        if seed_override is not None
        else cfg.evaluation.get("seed", 900)
    )
    trajs = _eval_trajectories(cfg, seed, cfg.evaluation)
    for label in ("model_a", "model_b"):
        path = Path(section[label])
        if not path.is_file():
            raise FileNotFoundError(f"model file not found: {path}")
        model, _, meta = load_model(path)
        metrics = _evaluate_into(
            cfg, model, trajs, out_dir / "compare" / f"eval_{label}"
        )
        summary_path = path.parent / "summary.json"
        wall = None
        if summary_path.is_file():
            with open(summary_path) as fh:
                wall = json.load(fh).get("wall_time_s")
        headline = (
            metrics["max_abs_angle_error"]
            if cfg.system == "pendulum"
            else metrics["max_abs_position_error"]
        )
        rows.append({
            "label": label,
            "path": str(path),
            "kind": model.kind,
            "n_params": model.n_params,
            "lifted_size": model.n_total,
            "train_wall_time_s": wall,
            "max_abs_error": headline,
        })
    kinds = {row["kind"]: row for row in rows}
    if {"mlp", "kan"} <= set(kinds) and kinds["kan"]["max_abs_error"] > 0:
        ratio = kinds["mlp"]["max_abs_error"] / kinds["kan"]["max_abs_error"]
        ratio_label = "mlp_over_kan_error_ratio"
    elif rows[1]["max_abs_error"] > 0:
        ratio = rows[0]["max_abs_error"] / rows[1]["max_abs_error"]
        ratio_label = "a_over_b_error_ratio"
    else:
        ratio, ratio_label = None, "a_over_b_error_ratio"
    report = {"system": cfg.system, "eval_seed": seed, "models": rows,
              ratio_label: ratio}
    _write_json(out_dir / "compare" / "compare.json", report)

    err_unit = "rad" if cfg.system == "pendulum" else "km"
    lines = [
        f"# Backend comparison ({cfg.system})",
        "",
        "| model | kind | parameters | lifted size | train time (s) "
        f"| max abs error ({err_unit}) |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for row in rows:
        wall = "n/a" if row["train_wall_time_s"] is None else f"{row['train_wall_time_s']:.2f}"
        lines.append(
            f"| {row['label']} | {row['kind']} | {row['n_params']} "
            f"| {row['lifted_size']} | {wall} | {row['max_abs_error']:.6g} |"
        )
    if ratio is not None:
        lines += ["", f"Error ratio ({ratio_label.replace('_', ' ')}): {ratio:.4g}"]
    (out_dir / "compare" / "compare.md").write_text("\n".join(lines) + "\n")
    print(f"compared {rows[0]['kind']} vs {rows[1]['kind']}: "
          f"errors {rows[0]['max_abs_error']:.4g} / {rows[1]['max_abs_error']:.4g}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "control": cmd_control,
    "compare": cmd_compare,
}


def _resolve_out(flag: str | None, cfg: RunConfig) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return Path(env)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("runs") / f"{cfg.system}_{cfg.backend}"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kooplift",
        description="Learn lifted linear models of nonlinear dynamics and "
                    "use them for prediction and LQR control.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "write a trajectory dataset"),
        ("train", "fit a lifted linear model on a dataset"),
        ("evaluate", "roll out a trained model on held-out initial conditions"),
        ("control", "run the LQR closed loop against the true plant"),
        ("compare", "evaluate two trained models side by side"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory (overrides config and env)")
        p.add_argument("--seed", type=int, help="override the command's seed")
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        out_dir = _resolve_out(args.out, cfg)
        return _COMMANDS[args.command](cfg, out_dir, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, RolloutDivergedError, InstabilityError,
            UncontrollableModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
