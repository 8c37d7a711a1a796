"""LQR regulation on the learned lifted linear system.

The gain is computed for the discrete operator pair (K, B) directly; the
control law u = -F * lift(x) reads the true plant state, lifts it, and the
saturated input drives the true nonlinear dynamics one RK4 step at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory, rk4_step
from .koopman import KoopmanModel, lift
from .numerics import ConvergenceError, solve_dare


class UncontrollableModelError(RuntimeError):
    """The Riccati iteration found no stabilizing solution for (K, B)."""


class InstabilityError(RuntimeError):
    def __init__(self, step: int, bound: float):
        self.step = step
        self.bound = bound
        super().__init__(
            f"closed-loop state exceeded |x| = {bound} at step {step}"
        )


@dataclass
class LqrGain:
    F: np.ndarray
    Q: np.ndarray
    R: np.ndarray


def default_weights(n: int, n_total: int, p: int, q_state: float = 1.0,
                    r: float = 0.1):
    """Q penalizing only the physical-state block; R = r * I."""
    q = np.zeros((n_total, n_total))
    q[:n, :n] = q_state * np.eye(n)
    return q, r * np.eye(p)


def dlqr(k: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray) -> LqrGain:
    """Infinite-horizon discrete LQR gain for z+ = K z + B u.

    F = (R + B'PB)^-1 B'PK with P the Riccati fixed point; the law is
    u = -F z.
    """
    k = np.asarray(k, dtype=float)
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    try:
        p_sol = solve_dare(k, b, q, r)
    except ConvergenceError as exc:
        raise UncontrollableModelError(
            "Riccati iteration did not converge; the fitted (K, B) pair "
            "is likely not stabilizable"
        ) from exc
    f = np.linalg.solve(r + b.T @ p_sol @ b, b.T @ p_sol @ k)
    return LqrGain(F=f, Q=q, R=r)


def spectral_radius(m: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def lqr_control(model: KoopmanModel, gain: LqrGain, x, u_limit: float | None = None):
    """u = -F * lift(x), optionally saturated to [-u_limit, u_limit]."""
    u = -gain.F @ lift(model, np.asarray(x, dtype=float))
    if u_limit is not None:
        u = np.clip(u, -u_limit, u_limit)
    return u


def closed_loop_sim(
    model: KoopmanModel,
    gain: LqrGain,
    plant,
    x0,
    duration: float,
    dt: float,
    u_limit: float | None = 5.0,
    state_bound: float = 1e6,
) -> Trajectory:
    """Run the regulator against the true plant for a fixed duration.

    Per step: lift the measured plant state, evaluate the linear law,
    saturate, and integrate the plant one RK4 step under that input. The
    returned Trajectory carries the applied control history.

    plant is a callable (state, u) -> state derivative.
    """
    if duration <= 0 or dt <= 0:
        raise ValueError("duration and dt must be positive")
    n_steps = round(duration / dt)
    x = np.asarray(x0, dtype=float)
    states = np.empty((n_steps + 1, x.size))
    controls = np.empty((n_steps, gain.F.shape[0]))
    states[0] = x
    for k in range(n_steps):
        u = lqr_control(model, gain, x, u_limit)
        x = rk4_step(plant, x, u, dt)
        if np.max(np.abs(x)) > state_bound:
            raise InstabilityError(k, state_bound)
        states[k + 1] = x
        controls[k] = u
    return Trajectory(dt=dt, states=states, controls=controls)


def settling_time(traj: Trajectory, component: int = 0, threshold: float = 0.05):
    """First time after which |state[component]| stays below threshold.

    Returns None if the trajectory never settles.
    """
    vals = np.abs(traj.states[:, component])
    inside = vals < threshold
    for k in range(inside.size):
        if np.all(inside[k:]):
            return k * traj.dt
    return None
