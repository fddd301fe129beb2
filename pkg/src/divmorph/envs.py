"""Seedable planar kinematic-chain environments and the 7-task registry.

The dynamics are a deliberate surrogate, not physics: each limb is a
damped torque-driven paddle and forward velocity is the mean of
l_i * omega_i * sin(theta_i), so return depends jointly on morphology
parameters and coordinated limb phase.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolationError
from .specs import Limb, MorphSpec, TaskSpec

DT = 0.05          # s
TAU_MAX = 1.0
GRAVITY = 1.0
OMEGA_MAX = 4.0    # rad/s
HORIZON = 500
CTRL_COST = 0.01
GLOBAL_OBS_DIM = 4
LIMB_OBS_DIM = 9   # 3 proprio + 6 context

TASKS = {
    t.id: t
    for t in [
        TaskSpec("flat", "walk forward on flat ground", "velocity", {"incline": 0.0}),
        TaskSpec("incline", "walk forward up a gentle incline", "velocity", {"incline": 0.3}),
        TaskSpec("patrol", "walk back and forth between two points", "patrol",
                 {"half_period": 250, "target_abs": 5.0}),
        TaskSpec("reach", "walk to the target position", "reach",
                 {"goal_low": -5.0, "goal_high": 5.0, "capture_radius": 0.2, "bonus": 10.0}),
        TaskSpec("obstacle", "walk forward across a slow zone", "obstacle",
                 {"zone_low": 2.0, "zone_high": 4.0, "slow_factor": 0.2, "zone_penalty": 0.05}),
        TaskSpec("escape", "move away from the start position as far as possible", "escape", {}),
        TaskSpec("steep", "climb forward up a steep incline", "velocity", {"incline": 0.6}),
    ]
}
TRAIN_TASKS = ("flat", "incline", "patrol", "reach", "obstacle")
HELDOUT_TASKS = ("escape", "steep")


@dataclass
class EnvState:
    x: float
    theta: np.ndarray   # joint angles, rad
    omega: np.ndarray   # joint velocities, rad/s
    t: int
    goal: float = 0.0           # reach target
    patrol_target: float = 0.0  # current patrol waypoint
    rng: np.random.Generator | None = None  # goal resampling stream


def gen_morphologies(seed, count):
    """Deterministic procedural morphology set (chains of 3..8 limbs)."""
    rng = np.random.default_rng(seed)
    morphs = []
    for i in range(count):
        n = int(rng.integers(3, 9))
        limbs = tuple(
            Limb(
                length=float(rng.uniform(0.3, 1.0)),
                joint_range=float(rng.uniform(0.5, 1.5)),
                damping=float(rng.uniform(0.1, 0.5)),
                density=float(rng.uniform(0.5, 1.5)),
            )
            for _ in range(n)
        )
        topology = tuple(j - 1 for j in range(n))
        morphs.append(MorphSpec(f"m{seed}-{i}", limbs, topology).validate())
    return morphs


def _limb_arrays(morph):
    l = np.array([b.length for b in morph.limbs])
    jr = np.array([b.joint_range for b in morph.limbs])
    c = np.array([b.damping for b in morph.limbs])
    rho = np.array([b.density for b in morph.limbs])
    return l, jr, c, rho


def limb_context(morph):
    """Per-limb context features (l, jr/pi, c, rho, i/N, depth/N), shape (N, 6)."""
    l, jr, c, rho = _limb_arrays(morph)
    n = morph.n_limbs
    idx = np.arange(n) / n
    depth = morph.depths() / n
    return np.stack([l, jr / np.pi, c, rho, idx, depth], axis=1)


def _observe(state, morph, task):
    prop = np.stack(
        [np.sin(state.theta), np.cos(state.theta), state.omega / OMEGA_MAX], axis=1
    )
    obs = np.concatenate([prop, limb_context(morph)], axis=1)
    g = np.zeros(GLOBAL_OBS_DIM)
    p = task.params
    kind = task.reward_kind
    if kind == "velocity":
        g[0] = p["incline"]
    elif kind == "patrol":
        dx = state.patrol_target - state.x
        g[:3] = (dx / 10.0, np.sign(dx), float((state.t // p["half_period"]) % 2))
    elif kind == "reach":
        g[0] = (state.goal - state.x) / 10.0
    elif kind == "obstacle":
        g[:2] = ((p["zone_low"] - state.x) / 10.0,
                 float(p["zone_low"] <= state.x <= p["zone_high"]))
    elif kind == "escape":
        g[0] = state.x / 10.0
    return obs, g


def reset(morph, task, seed):
    """Fresh episode state; goal/patrol randomness comes only from `seed`."""
    n = morph.n_limbs
    rng = np.random.default_rng(seed)
    state = EnvState(x=0.0, theta=np.zeros(n), omega=np.zeros(n), t=0, rng=rng)
    if task.reward_kind == "reach":
        state.goal = float(rng.uniform(task.params["goal_low"], task.params["goal_high"]))
    elif task.reward_kind == "patrol":
        state.patrol_target = float(task.params["target_abs"] * rng.choice([-1.0, 1.0]))
    obs, g = _observe(state, morph, task)
    return state, obs, g


def step(state, morph, task, actions):
    """Semi-implicit Euler update with hard angle/velocity clamps."""
    a = np.asarray(actions, dtype=np.float64)
    n = morph.n_limbs
    if a.shape != (n,):
        raise ContractViolationError(f"expected {n} actions, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolationError("actions must be finite")

    l, jr, c, rho = _limb_arrays(morph)
    alpha = task.params.get("incline", 0.0)
    x_prev = state.x

    torque = a * TAU_MAX / (rho * l**2)
    omega = state.omega + DT * (torque - c * state.omega - GRAVITY * np.sin(alpha) * np.sin(state.theta))
    omega = np.clip(omega, -OMEGA_MAX, OMEGA_MAX)
    theta = state.theta + DT * omega
    hit = np.abs(theta) >= jr
    theta = np.clip(theta, -jr, jr)
    omega = np.where(hit, 0.0, omega)

    v = float(np.mean(l * omega * np.sin(theta)))
    x = state.x + DT * v
    t = state.t + 1
    new = replace(state, x=x, theta=theta, omega=omega, t=t)

    ctrl = CTRL_COST * float(a @ a)
    p = task.params
    kind = task.reward_kind
    if kind == "velocity":
        r = v - ctrl
    elif kind == "patrol":
        r = v * np.sign(new.patrol_target - x) - ctrl
        # waypoint flips every half-period
        if t % p["half_period"] == 0:
            new.patrol_target = -new.patrol_target
    elif kind == "reach":
        r = (abs(x_prev - new.goal) - abs(x - new.goal)) - ctrl
        if abs(x - new.goal) < p["capture_radius"]:
            r += p["bonus"]
            new.goal = float(new.rng.uniform(p["goal_low"], p["goal_high"]))
    elif kind == "obstacle":
        if p["zone_low"] <= x <= p["zone_high"]:
            r = p["slow_factor"] * v - p["zone_penalty"] - ctrl
        else:
            r = v - ctrl
    elif kind == "escape":
        r = abs(x) - abs(x_prev) - ctrl
    else:
        raise ContractViolationError(f"unknown reward kind {kind!r}")

    done = t >= HORIZON
    obs, g = _observe(new, morph, task)
    return new, obs, g, float(r), done
