"""Core types for the benchmark systems: state, model description, cost geometry.

Specs are frozen (hashable) dataclasses built from plain tuples so they can be
used as cache keys and serialized into run manifests; numeric arrays are
derived from them on demand.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

Bounds = tuple[tuple[float, float], ...]


class Region(enum.Enum):
    WORKSPACE = "workspace"
    HARD_REGION = "hard_region"


@dataclass(frozen=True)
class TimeState:
    """Augmented state: physical state vector plus discrete time index."""

    x: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if self.x.ndim != 1:
            raise ValueError(f"state must be a 1-d vector, got shape {self.x.shape}")
        if self.t < 0:
            raise ValueError(f"time index must be >= 0, got {self.t}")

    @property
    def augmented(self) -> np.ndarray:
        """The network input [x, t]."""
        return np.concatenate([self.x, [float(self.t)]])


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    angle: float = 0.0

    def __post_init__(self):
        if min(self.semi_axes) <= 0.0:
            raise ValueError(f"semi-axes must be positive, got {self.semi_axes}")

    def quadratic_form(self) -> np.ndarray:
        """Symmetric E with (p-c)^T E (p-c) = 1 on the boundary."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        rot = np.array([[c, s], [-s, c]])
        d = np.diag([1.0 / self.semi_axes[0] ** 2, 1.0 / self.semi_axes[1] ** 2])
        return rot.T @ d @ rot


@dataclass(frozen=True)
class CostField:
    """Weights and geometry of the reach-target / avoid-obstacles cost."""

    target: tuple[float, float] = (-7.0, 0.0)
    obstacles: tuple[Ellipse, ...] = ()
    obstacle_weight: float = 0.0
    target_reward_weight: float = 0.0
    target_reward_radius: float = 1.0
    control_weight: float = 0.0
    distance_weight: float = 1.0

    def __post_init__(self):
        for w in (self.obstacle_weight, self.target_reward_weight,
                  self.control_weight, self.distance_weight):
            if w < 0.0:
                raise ValueError("cost weights must be non-negative")
        if self.target_reward_radius <= 0.0:
            raise ValueError("target_reward_radius must be positive")


@dataclass(frozen=True)
class ModelSpec:
    """Static description of one benchmark system."""

    name: str
    n: int
    m: int
    dt: float
    t_max: int
    u_max: tuple[float, ...]
    workspace: Bounds
    hard_region: Bounds
    extra: tuple[tuple[str, float], ...] = field(default=())

    def __post_init__(self):
        if self.dt <= 0.0 or self.t_max < 1:
            raise ValueError("need dt > 0 and t_max >= 1")
        if len(self.u_max) != self.m or any(b <= 0.0 for b in self.u_max):
            raise ValueError("u_max must have m positive components")
        for bounds, label in ((self.workspace, "workspace"),
                              (self.hard_region, "hard_region")):
            if len(bounds) != self.n:
                raise ValueError(f"{label} must cover all {self.n} state dims")

    @property
    def u_bound(self) -> np.ndarray:
        return np.asarray(self.u_max, dtype=float)

    def region_box(self, region: Region) -> tuple[np.ndarray, np.ndarray]:
        bounds = self.workspace if region is Region.WORKSPACE else self.hard_region
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        if np.any(lo > hi):
            raise ValueError(f"empty {region.value} box: lo > hi")
        return lo, hi

    def extra_params(self) -> dict[str, float]:
        return dict(self.extra)


class System:
    """Discrete-time dynamics of one system, vectorized over a leading batch axis.

    `step_x`/`jacobians` take raw state arrays (without the time index); the
    time-aware wrappers live in envs.__init__.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.n = spec.n
        self.m = spec.m
        self.dt = spec.dt

    def step_x(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def position(self, x: np.ndarray) -> np.ndarray:
        """Task-space point the cost acts on; (..., 2)."""
        raise NotImplementedError

    def position_derivs(self, x: np.ndarray):
        """(p, dp/dx, d2p/dx2) with shapes (...,2), (...,2,n), (...,2,n,n)."""
        raise NotImplementedError


_REGISTRY: dict[str, type[System]] = {}


def register_system(name: str):
    def deco(cls):
        _REGISTRY[name] = cls
        return cls
    return deco


def make_system(spec: ModelSpec) -> System:
    try:
        cls = _REGISTRY[spec.name]
    except KeyError:
        raise ValueError(f"unknown system '{spec.name}' "
                         f"(known: {sorted(_REGISTRY)})") from None
    return cls(spec)
