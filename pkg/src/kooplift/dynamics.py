"""Ground-truth nonlinear systems, RK4 integration, dataset generation and I/O.

Two reference systems: a torque-actuated pendulum and the planar two-body
problem. Datasets are lists of :class:`Trajectory` produced from documented
uniform ranges with per-trajectory RNG streams, so generation is
bit-reproducible from (seed, trajectory index) and safe to parallelize.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PENDULUM_DT = 0.01
PENDULUM_DURATION = 2.0
PENDULUM_ANGLE_RANGE = (-2.0, 2.0)
PENDULUM_RATE_RANGE = (-2.0, 2.0)
PENDULUM_CONTROL_RANGE = (-0.1, 0.1)

EARTH_MU = 398600.4418  # km^3/s^2
TWOBODY_RADIUS_RANGE = (6578.0, 11378.0)  # km, periapsis sampling range

PENDULUM_STATE_NAMES = ("theta", "theta_dot")
PENDULUM_CONTROL_NAMES = ("u",)
TWOBODY_STATE_NAMES = ("x", "y", "vx", "vy")
TWOBODY_CONTROL_NAMES = ()


class SingularityError(ValueError):
    """State hit a point where the vector field is undefined."""


class BlowupError(RuntimeError):
    """Integration produced non-finite values."""


@dataclass(frozen=True)
class PendulumParams:
    g: float = 9.81
    l: float = 1.0
    control_gain: float = 1.0

    def __post_init__(self):
        if self.g <= 0 or self.l <= 0:
            raise ValueError("g and l must be positive")


@dataclass(frozen=True)
class TwoBodyParams:
    mu: float = EARTH_MU

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")


@dataclass
class Trajectory:
    """A sampled state history with the controls that produced it.

    states has shape (M, n); controls has shape (M-1, p), where p may be 0
    for autonomous systems.
    """

    dt: float
    states: np.ndarray
    controls: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.controls is None:
            self.controls = np.zeros((self.states.shape[0] - 1, 0))
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim == 1:
            self.controls = self.controls[:, None]
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError(
                f"states length {self.states.shape[0]} must be controls "
                f"length {self.controls.shape[0]} plus one"
            )
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states contain non-finite entries")
        if not np.all(np.isfinite(self.controls)):
            raise ValueError("controls contain non-finite entries")

    @property
    def n_states(self) -> int:
        return self.states.shape[1]

    @property
    def n_controls(self) -> int:
        return self.controls.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.states.shape[0])


def pendulum_deriv(state, u, p: PendulumParams = PendulumParams()) -> np.ndarray:
    """Pendulum vector field: theta'' = -(g/l) sin(theta) + control_gain * u.

    u is a scalar torque; a length-1 vector is accepted too.
    """
    theta, theta_dot = float(state[0]), float(state[1])
    u_arr = np.asarray(u, dtype=float).ravel()
    uval = u_arr[0] if u_arr.size else 0.0
    return np.array([theta_dot, -(p.g / p.l) * math.sin(theta) + p.control_gain * uval])


def twobody_deriv(state, p: TwoBodyParams = TwoBodyParams()) -> np.ndarray:
    """Planar two-body vector field with attractive inverse-square gravity."""
    x, y, vx, vy = (float(v) for v in state)
    r = math.hypot(x, y)
    if r == 0.0:
        raise SingularityError("two-body state at the origin")
    a = -p.mu / r**3
    return np.array([vx, vy, a * x, a * y])


def rk4_step(deriv, state, u, dt: float) -> np.ndarray:
    """One classical Runge-Kutta 4 step with the control held over the step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(state, dtype=float)
    k1 = deriv(x, u)
    k2 = deriv(x + 0.5 * dt * k1, u)
    k3 = deriv(x + 0.5 * dt * k2, u)
    k4 = deriv(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise BlowupError("non-finite state after RK4 step")
    return out


def simulate(deriv, x0, controls, dt: float) -> Trajectory:
    """Integrate len(controls) RK4 steps from x0, returning the full history."""
    x = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 contains non-finite entries")
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls[:, None]
    states = np.empty((controls.shape[0] + 1, x.shape[0]))
    states[0] = x
    for k in range(controls.shape[0]):
        x = rk4_step(deriv, x, controls[k], dt)
        states[k + 1] = x
    return Trajectory(dt=dt, states=states, controls=controls)


def _pendulum_step_fn(p: PendulumParams):
    return lambda state, u: pendulum_deriv(state, u, p)


def generate_pendulum_dataset(
    n_ic: int,
    seed: int,
    alpha: int = 25,
    params: PendulumParams = PendulumParams(),
) -> list[Trajectory]:
    """Random pendulum trajectories: 2 s at dt=0.01 under random torques.

    Per trajectory i, the stream default_rng((seed, i)) draws, in order:
    theta_0 ~ U[-2, 2], theta_dot_0 ~ U[-2, 2], then the full control
    sequence ~ U[-0.1, 0.1]. alpha is the multi-step horizon the data must
    support and is only validated against the trajectory length.
    """
    if n_ic < 1:
        raise ValueError("n_ic must be >= 1")
    n_steps = round(PENDULUM_DURATION / PENDULUM_DT)
    if not 1 <= alpha < n_steps + 1:
        raise ValueError(f"alpha must be in [1, {n_steps}]")
    deriv = _pendulum_step_fn(params)
    out = []
    for i in range(n_ic):
        rng = np.random.default_rng((seed, i))
        theta0 = rng.uniform(*PENDULUM_ANGLE_RANGE)
        theta_dot0 = rng.uniform(*PENDULUM_RATE_RANGE)
        controls = rng.uniform(*PENDULUM_CONTROL_RANGE, size=(n_steps, 1))
        out.append(simulate(deriv, [theta0, theta_dot0], controls, PENDULUM_DT))
    return out


def generate_twobody_dataset(
    n_ic: int,
    seed: int,
    points_per_orbit: int = 800,
    params: TwoBodyParams = TwoBodyParams(),
    radius_range: tuple[float, float] = TWOBODY_RADIUS_RANGE,
) -> list[Trajectory]:
    """Random circular orbits sampled for exactly one period each.

    Per trajectory i, the stream default_rng((seed, i)) draws the periapsis
    radius r ~ U[radius_range] km (default [6578, 11378]); the initial state
    is [r, 0, 0, sqrt(mu/r)] and the step is dt = T / points_per_orbit with
    T the orbital period, so every trajectory holds points_per_orbit
    samples. No control input.
    """
    if n_ic < 1:
        raise ValueError("n_ic must be >= 1")
    if points_per_orbit < 2:
        raise ValueError("points_per_orbit must be >= 2")
    if not radius_range[1] >= radius_range[0] > 0:
        raise ValueError("radius_range must be positive and ordered")
    deriv = lambda state, u: twobody_deriv(state, params)
    out = []
    for i in range(n_ic):
        rng = np.random.default_rng((seed, i))
        r = rng.uniform(*radius_range)
        period = 2.0 * math.pi * math.sqrt(r**3 / params.mu)
        dt = period / points_per_orbit
        x0 = [r, 0.0, 0.0, math.sqrt(params.mu / r)]
        controls = np.zeros((points_per_orbit - 1, 0))
        out.append(simulate(deriv, x0, controls, dt))
    return out


def save_dataset(
    trajectories: list[Trajectory],
    out_dir,
    state_names,
    control_names,
    manifest_extra: dict | None = None,
) -> Path:
    """Write one CSV per trajectory plus a JSON manifest; returns the manifest path.

    CSV header is t, then state columns, then control columns; the final row
    has empty control cells (one fewer control than states). Floats go out at
    full precision ("%.17g") so a load reproduces the arrays bit for bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_names = list(state_names)
    control_names = list(control_names)
    files = []
    for i, traj in enumerate(trajectories):
        if traj.n_states != len(state_names):
            raise ValueError("state_names does not match trajectory width")
        if traj.n_controls != len(control_names):
            raise ValueError("control_names does not match trajectory width")
        name = f"traj_{i:04d}.csv"
        with open(out_dir / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *state_names, *control_names])
            m = traj.states.shape[0]
            for k in range(m):
                row = [f"{k * traj.dt:.17g}"]
                row += [f"{v:.17g}" for v in traj.states[k]]
                if k < m - 1:
                    row += [f"{v:.17g}" for v in traj.controls[k]]
                else:
                    row += [""] * traj.n_controls
                writer.writerow(row)
        files.append({"name": name, "dt": traj.dt, "n_samples": m})
    manifest = {
        "n_trajectories": len(trajectories),
        "state_names": state_names,
        "control_names": control_names,
        "files": files,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path


def load_dataset(in_dir) -> list[Trajectory]:
    """Read back a dataset written by :func:`save_dataset`."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json under {in_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    n_state = len(manifest["state_names"])
    n_ctrl = len(manifest["control_names"])
    out = []
    for entry in manifest["files"]:
        with open(in_dir / entry["name"], newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        states = np.array(
            [[float(c) for c in row[1 : 1 + n_state]] for row in body]
        )
        controls = np.array(
            [[float(c) for c in row[1 + n_state :]] for row in body[:-1]]
        ).reshape(len(body) - 1, n_ctrl)
        out.append(Trajectory(dt=float(entry["dt"]), states=states, controls=controls))
    return out
