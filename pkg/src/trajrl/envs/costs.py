"""Stage/terminal costs with exact derivatives.

The 2D systems share a task-space cost acting on a point p(x): quadratic
distance to the target, a Gaussian bonus in the target neighborhood, a
softplus barrier around each elliptic obstacle, and quadratic control effort.
The 1D toy system uses its own double-well cost.
"""

from __future__ import annotations

import numpy as np

from .base import CostField, ModelSpec, System
from . import base

BARRIER_SHARPNESS = 10.0   # slope of the softplus obstacle wall

# double-well parameters: (x^2 - 1)^2 + TILT * x
TOY_TILT = 0.3


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    # exp(z - softplus(z)) is overflow-safe on both tails
    z = np.asarray(z, dtype=float)
    return np.exp(z - np.logaddexp(0.0, z))


def toy1d_cost(x):
    """Double-well running cost; global minimum left, worse local minimum right."""
    x = np.asarray(x, dtype=float)
    return (x**2 - 1.0) ** 2 + TOY_TILT * x


class Cost:
    """Derivative interface used by the solver; broadcasts over a batch axis."""

    def stage(self, x, u):
        raise NotImplementedError

    def stage_derivs(self, x, u):
        raise NotImplementedError

    def terminal(self, x):
        raise NotImplementedError

    def terminal_derivs(self, x):
        raise NotImplementedError


class Toy1DCost(Cost):

    def __init__(self, field: CostField):
        self.w_u = field.control_weight

    def _base(self, x):
        s = x[..., 0]
        val = (s**2 - 1.0) ** 2 + TOY_TILT * s
        grad = (4.0 * s**3 - 4.0 * s + TOY_TILT)[..., None]
        hess = (12.0 * s**2 - 4.0)[..., None, None]
        return val, grad, hess

    def stage(self, x, u):
        return self._base(x)[0] + self.w_u * (u[..., 0] ** 2)

    def stage_derivs(self, x, u):
        batch = x.shape[:-1]
        val, lx, lxx = self._base(x)
        l = val + self.w_u * (u[..., 0] ** 2)
        lu = 2.0 * self.w_u * u
        luu = np.broadcast_to(2.0 * self.w_u * np.eye(1), batch + (1, 1)).copy()
        lux = np.zeros(batch + (1, 1))
        return l, lx, lu, lxx, luu, lux

    def terminal(self, x):
        return self._base(x)[0]

    def terminal_derivs(self, x):
        return self._base(x)


class TaskCost(Cost):
    """Reach/avoid cost acting through the system's task-space point."""

    def __init__(self, system: System, field: CostField):
        self.system = system
        self.field = field
        self.target = np.asarray(field.target, dtype=float)
        self.forms = [ob.quadratic_form() for ob in field.obstacles]
        self.centers = [np.asarray(ob.center, dtype=float) for ob in field.obstacles]

    # -- scalar field over the 2D task point ---------------------------------

    def point_value(self, p):
        f = self.field
        diff = p - self.target
        q = (diff**2).sum(axis=-1)
        val = f.distance_weight * q
        val -= f.target_reward_weight * np.exp(-q / f.target_reward_radius**2)
        for e_mat, c in zip(self.forms, self.centers):
            d = p - c
            e = np.einsum("...i,ij,...j->...", d, e_mat, d)
            val += f.obstacle_weight * softplus(BARRIER_SHARPNESS * (1.0 - e))
        return val

    def point_derivs(self, p):
        f = self.field
        batch = p.shape[:-1]
        diff = p - self.target
        q = (diff**2).sum(axis=-1)
        eye2 = np.eye(2)

        val = f.distance_weight * q
        g = 2.0 * f.distance_weight * diff
        h = np.broadcast_to(2.0 * f.distance_weight * eye2, batch + (2, 2)).copy()

        # bonus r(q) = -w exp(-q/rho^2)
        rho2 = f.target_reward_radius**2
        ex = np.exp(-q / rho2)
        val -= f.target_reward_weight * ex
        dr = (f.target_reward_weight / rho2) * ex          # dr/dq
        d2r = -dr / rho2
        g += dr[..., None] * 2.0 * diff
        h += 2.0 * dr[..., None, None] * eye2
        h += 4.0 * d2r[..., None, None] * diff[..., :, None] * diff[..., None, :]

        s = BARRIER_SHARPNESS
        for e_mat, c in zip(self.forms, self.centers):
            d = p - c
            ed = d @ e_mat.T
            e = (d * ed).sum(axis=-1)
            z = s * (1.0 - e)
            sig = sigmoid(z)
            val += f.obstacle_weight * softplus(z)
            db = -f.obstacle_weight * s * sig               # db/de
            d2b = f.obstacle_weight * s**2 * sig * (1.0 - sig)
            g += db[..., None] * 2.0 * ed
            h += 4.0 * d2b[..., None, None] * ed[..., :, None] * ed[..., None, :]
            h += 2.0 * db[..., None, None] * e_mat
        return val, g, h

    # -- chained to the state -------------------------------------------------

    def stage(self, x, u):
        w_u = self.field.control_weight
        return self.point_value(self.system.position(x)) + w_u * (u**2).sum(axis=-1)

    def stage_derivs(self, x, u):
        batch = x.shape[:-1]
        n, m = self.system.n, self.system.m
        p, jp, hp = self.system.position_derivs(x)
        val, g, h = self.point_derivs(p)

        w_u = self.field.control_weight
        l = val + w_u * (u**2).sum(axis=-1)
        lx = np.einsum("...ci,...c->...i", jp, g)
        lxx = (np.einsum("...ci,...cd,...dj->...ij", jp, h, jp)
               + np.einsum("...c,...cij->...ij", g, hp))
        lu = 2.0 * w_u * u
        luu = np.broadcast_to(2.0 * w_u * np.eye(m), batch + (m, m)).copy()
        lux = np.zeros(batch + (m, n))
        return l, lx, lu, lxx, luu, lux

    def terminal(self, x):
        return self.point_value(self.system.position(x))

    def terminal_derivs(self, x):
        p, jp, hp = self.system.position_derivs(x)
        val, g, h = self.point_derivs(p)
        lx = np.einsum("...ci,...c->...i", jp, g)
        lxx = (np.einsum("...ci,...cd,...dj->...ij", jp, h, jp)
               + np.einsum("...c,...cij->...ij", g, hp))
        return val, lx, lxx


_COST_REGISTRY: dict[str, type] = {}


def register_cost(name: str):
    """Attach a custom cost factory (spec, field, system) -> Cost to a system name."""
    def deco(factory):
        _COST_REGISTRY[name] = factory
        return factory
    return deco


def build_cost(spec: ModelSpec, field: CostField, system: System | None = None) -> Cost:
    if system is None:
        system = base.make_system(spec)
    if spec.name in _COST_REGISTRY:
        return _COST_REGISTRY[spec.name](spec, field, system)
    if spec.name == "toy1d":
        return Toy1DCost(field)
    if len(field.obstacles) != 3:
        raise ValueError(f"{spec.name} expects exactly 3 obstacles, "
                         f"got {len(field.obstacles)}")
    return TaskCost(system, field)
