"""Benchmark systems with analytic dynamics and known constants of motion, plus dataset generation.

All dynamics and constants act on the last axis, so they accept a single
state or a batch of states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .odeint import TRUTH, IntegratorConfig, integrate

DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


class SingularityError(ArithmeticError):
    """The two bodies coincide."""


@dataclass(frozen=True)
class SystemSpec:
    name: str
    n_s: int
    n_x: int
    true_n_c: int
    dynamics: Callable  # (s, x, t) -> s_dot
    quantities: Callable  # (s, x) -> (..., n_q) monitored quantities
    quantity_names: tuple[str, ...]
    conserved: tuple[bool, ...]
    init_sampler: Callable  # rng -> s0
    force_sampler: Callable | None = None  # rng -> (a0, a1, a2)

    def constants(self, s, x=None) -> np.ndarray:
        """Values of the known conserved quantities at ``s``."""
        q = self.quantities(np.asarray(s, dtype=np.float64), x)
        return q[..., np.array(self.conserved)]

    @property
    def constant_names(self) -> tuple[str, ...]:
        return tuple(n for n, c in zip(self.quantity_names, self.conserved) if c)


# ---------------------------------------------------------------- cases


def _mass_spring(s, x=None, t=None):
    return np.stack([s[..., 1], -s[..., 0]], axis=-1)


def _mass_spring_q(s, x=None):
    return (0.5 * (s[..., 0] ** 2 + s[..., 1] ** 2))[..., None]


def _box(lo, hi, n):
    return lambda rng: rng.uniform(lo, hi, size=n)


def _pendulum_accel(s, alpha: float, force):
    """Acceleration of a point mass on a rigid rod (pivot at origin, gravity -y).

    The rod tension is the multiplier that keeps d^2/dt^2 |r|^2 = 0:
    lam = (r . a_free + |v|^2) / |r|^2.
    """
    r, v = s[..., :2], s[..., 2:]
    a_free = np.zeros_like(r)
    a_free[..., 1] = -1.0
    a_free = a_free - alpha * v
    if force is not None:
        a_free[..., 0] += np.asarray(force)[..., 0]
    lam = (np.sum(r * a_free, axis=-1) + np.sum(v * v, axis=-1)) / np.sum(r * r, axis=-1)
    return a_free - lam[..., None] * r


def _pendulum_dyn(alpha: float):
    def dyn(s, x=None, t=None):
        s = np.asarray(s, dtype=np.float64)
        return np.concatenate([s[..., 2:], _pendulum_accel(s, alpha, x)], axis=-1)

    return dyn


def _pendulum_q(s, x=None):
    px, py, vx, vy = (s[..., k] for k in range(4))
    energy = 0.5 * (vx ** 2 + vy ** 2) + py
    if x is not None:
        # potential of a constant horizontal force
        energy = energy - np.asarray(x)[..., 0] * px
    return np.stack([energy, px ** 2 + py ** 2, px * vx + py * vy], axis=-1)


def _pendulum_init(rng):
    theta, omega = rng.uniform(-1.0, 1.0, size=2)
    return np.array([np.sin(theta), -np.cos(theta), np.cos(theta) * omega, np.sin(theta) * omega])


def _sample_force(rng):
    return np.array([rng.uniform(-0.5, 0.5), rng.uniform(0.0, 5.0), rng.uniform(0.0, 2 * np.pi)])


def force_profile(a) -> Callable[[float], np.ndarray]:
    """F_x(t) = a0 cos(a1 t + a2) as a length-1 external input."""
    a0, a1, a2 = (float(v) for v in a)
    return lambda t: np.array([a0 * np.cos(a1 * t + a2)])


def _two_body_dyn(s, x=None, t=None):
    s = np.asarray(s, dtype=np.float64)
    d = s[..., 2:4] - s[..., 0:2]
    r = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    if np.any(r < 1e-9):
        raise SingularityError("bodies coincide")
    a1 = d / r ** 3
    return np.concatenate([s[..., 4:], a1, -a1], axis=-1)


def _two_body_q(s, x=None):
    p1, p2, v1, v2 = s[..., 0:2], s[..., 2:4], s[..., 4:6], s[..., 6:8]
    r = np.sqrt(np.sum((p2 - p1) ** 2, axis=-1))
    energy = 0.5 * (np.sum(v1 * v1, axis=-1) + np.sum(v2 * v2, axis=-1)) - 1.0 / r
    ang = (p1[..., 0] * v1[..., 1] - p1[..., 1] * v1[..., 0]
           + p2[..., 0] * v2[..., 1] - p2[..., 1] * v2[..., 0])
    return np.stack([energy, ang, v1[..., 0] + v2[..., 0], v1[..., 1] + v2[..., 1]], axis=-1)


def circular_speed(distance: float) -> float:
    """Speed of each unit mass on a circular orbit about the centre of mass (G = 1)."""
    return np.sqrt(1.0 / (2.0 * distance))


def _two_body_init(rng):
    d = rng.uniform(1.0, 3.0)
    speed = rng.uniform(0.7, 1.0) * circular_speed(d)
    phi = rng.uniform(0.0, 2 * np.pi)
    u = np.array([np.cos(phi), np.sin(phi)])
    w = np.array([-u[1], u[0]])
    return np.concatenate([-0.5 * d * u, 0.5 * d * u, -speed * w, speed * w])


def _nl_spring_dyn(s, x=None, t=None):
    s = np.asarray(s, dtype=np.float64)
    r = s[..., :2]
    r2 = np.sum(r * r, axis=-1, keepdims=True)
    return np.concatenate([s[..., 2:], -r2 * r], axis=-1)


def _nl_spring_q(s, x=None):
    x_, y_, vx, vy = (s[..., k] for k in range(4))
    energy = 0.5 * (vx ** 2 + vy ** 2) + 0.25 * (x_ ** 2 + y_ ** 2) ** 2
    return np.stack([energy, x_ * vy - y_ * vx], axis=-1)


def _lv_dyn(s, x=None, t=None):
    s = np.asarray(s, dtype=np.float64)
    a, b = s[..., 0], s[..., 1]
    return np.stack([a - a * b, -b + a * b], axis=-1)


def _lv_q(s, x=None):
    a, b = s[..., 0], s[..., 1]
    return (a - np.log(a) + b - np.log(b))[..., None]


SYSTEMS: dict[str, SystemSpec] = {
    "mass-spring": SystemSpec(
        "mass-spring", 2, 0, 1, _mass_spring, _mass_spring_q, ("energy",), (True,),
        _box(-0.5, 0.5, 2)),
    "pendulum": SystemSpec(
        "pendulum", 4, 0, 3, _pendulum_dyn(0.0), _pendulum_q, ("energy", "length", "angle"),
        (True, True, True), _pendulum_init),
    "damped-pendulum": SystemSpec(
        "damped-pendulum", 4, 0, 2, _pendulum_dyn(1.0), _pendulum_q,
        ("energy", "length", "angle"), (False, True, True), _pendulum_init),
    "two-body": SystemSpec(
        "two-body", 8, 0, 7, _two_body_dyn, _two_body_q,
        ("energy", "angular_momentum", "momentum_x", "momentum_y"), (True,) * 4, _two_body_init),
    "nonlinear-spring": SystemSpec(
        "nonlinear-spring", 4, 0, 2, _nl_spring_dyn, _nl_spring_q,
        ("energy", "angular_momentum"), (True, True), _box(-1.0, 1.0, 4)),
    "lotka-volterra": SystemSpec(
        "lotka-volterra", 2, 0, 1, _lv_dyn, _lv_q, ("lyapunov",), (True,), _box(0.5, 2.0, 2)),
    "forced-pendulum": SystemSpec(
        "forced-pendulum", 4, 1, 3, _pendulum_dyn(0.0), _pendulum_q,
        ("energy", "length", "angle"), (True, True, True), _pendulum_init, _sample_force),
}

BENCHMARKS = ("mass-spring", "pendulum", "damped-pendulum", "two-body", "nonlinear-spring",
              "lotka-volterra")


def get_system(name: str) -> SystemSpec:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None


def true_dynamics(system: SystemSpec | str, s, x=None, t=None) -> np.ndarray:
    system = get_system(system) if isinstance(system, str) else system
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != system.n_s:
        raise ValueError(f"{system.name} has {system.n_s} states, got {s.shape[-1]}")
    return system.dynamics(s, x, t)


def true_constants(system: SystemSpec | str, s, x=None) -> np.ndarray:
    system = get_system(system) if isinstance(system, str) else system
    return system.constants(s, x)


def sample_initial(system: SystemSpec | str, rng: np.random.Generator) -> np.ndarray:
    system = get_system(system) if isinstance(system, str) else system
    return system.init_sampler(rng)


def sample_force(rng: np.random.Generator) -> np.ndarray:
    return _sample_force(rng)


def simulate(system: SystemSpec, s0, t_eval, force=None,
             config: IntegratorConfig = TRUTH):
    """Integrate the exact dynamics; ``force(t)`` supplies the external input."""
    t_eval = np.asarray(t_eval, dtype=np.float64)

    def f(t, s):
        return system.dynamics(s, None if force is None else force(t), t)

    return integrate(f, s0, (t_eval[0], t_eval[-1]), t_eval, config)


# ---------------------------------------------------------------- datasets


@dataclass
class TrajectoryData:
    id: int
    split: str
    t: np.ndarray
    s: np.ndarray
    s_dot: np.ndarray
    x: np.ndarray | None = None


@dataclass
class Dataset:
    system: str
    n_s: int
    n_x: int
    noise: float
    seed: int
    trajectories: list[TrajectoryData] = field(default_factory=list)
    retries: int = 0

    def __len__(self) -> int:
        return sum(len(tr.t) for tr in self.trajectories)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Stacked (s, s_dot, x) of every sample in the named split."""
        trs = [tr for tr in self.trajectories if tr.split == name]
        if not trs:
            empty = np.empty((0, self.n_s))
            return empty, empty, (np.empty((0, self.n_x)) if self.n_x else None)
        s = np.concatenate([tr.s for tr in trs])
        s_dot = np.concatenate([tr.s_dot for tr in trs])
        x = np.concatenate([tr.x for tr in trs]) if self.n_x else None
        return s, s_dot, x

    def split_sizes(self) -> dict[str, int]:
        return {name: sum(len(tr.t) for tr in self.trajectories if tr.split == name)
                for name in SPLITS}

    def to_json(self) -> str:
        doc = {
            "meta": {"system": self.system, "n_s": self.n_s, "n_x": self.n_x,
                     "sigma": self.noise, "seed": self.seed, "version": DATASET_VERSION},
            "trajectories": [],
        }
        for tr in self.trajectories:
            item = {"id": tr.id, "split": tr.split, "t": tr.t.tolist(), "s": tr.s.tolist(),
                    "s_dot": tr.s_dot.tolist()}
            if tr.x is not None:
                item["x"] = tr.x.tolist()
            doc["trajectories"].append(item)
        return json.dumps(doc)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        meta = doc["meta"]
        if meta.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {meta.get('version')!r}")
        trs = []
        for item in doc["trajectories"]:
            x = np.array(item["x"], dtype=np.float64) if "x" in item else None
            trs.append(TrajectoryData(int(item["id"]), item["split"],
                                      np.array(item["t"], dtype=np.float64),
                                      np.array(item["s"], dtype=np.float64).reshape(-1, meta["n_s"]),
                                      np.array(item["s_dot"], dtype=np.float64).reshape(-1, meta["n_s"]),
                                      x))
        return cls(meta["system"], meta["n_s"], meta["n_x"], meta["sigma"], meta["seed"], trs)

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_json(Path(path).read_text())


def assign_splits(n_traj: int, rng: np.random.Generator,
                  fractions=(0.7, 0.1, 0.2)) -> list[str]:
    """Split labels per trajectory id, in 70/10/20 proportions."""
    n_train = int(round(fractions[0] * n_traj))
    n_val = int(round(fractions[1] * n_traj))
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n_traj - n_train - n_val)
    order = rng.permutation(n_traj)
    out = [""] * n_traj
    for label, k in zip(labels, order):
        out[k] = label
    return out


def generate_dataset(system: SystemSpec | str, n_traj: int = 100, n_points: int = 100,
                     t_end: float = 10.0, noise: float = 0.05, seed: int = 0,
                     max_retries: int = 10) -> Dataset:
    """Simulate ``n_traj`` trajectories and record noisy analytic derivatives.

    Each trajectory has its own generator seeded by (seed, trajectory id), so
    the output does not depend on generation order.
    """
    system = get_system(system) if isinstance(system, str) else system
    t = np.linspace(0.0, t_end, n_points)
    labels = assign_splits(n_traj, np.random.default_rng([seed, 2 ** 31]))
    ds = Dataset(system.name, system.n_s, system.n_x, float(noise), int(seed))
    for k in range(n_traj):
        rng = np.random.default_rng([seed, k])
        for attempt in range(max_retries + 1):
            s0 = system.init_sampler(rng)
            force = None
            if system.force_sampler is not None:
                force = force_profile(system.force_sampler(rng))
            try:
                traj = simulate(system, s0, t, force)
            except SingularityError:
                traj = None
            if traj is not None and traj.ok:
                break
            ds.retries += 1
        else:
            raise RuntimeError(f"trajectory {k} failed after {max_retries} retries")
        x = None if force is None else np.stack([force(tt) for tt in t])
        s_dot = system.dynamics(traj.states, x, t)
        if noise > 0:
            s_dot = s_dot + rng.normal(0.0, noise, size=s_dot.shape)
        ds.trajectories.append(TrajectoryData(k, labels[k], t.copy(), traj.states, s_dot, x))
    return ds
