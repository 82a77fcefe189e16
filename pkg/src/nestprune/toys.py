"""Small closed-form problems for checking the descent properties numerically."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradients import IntegrationConfig, enumerate_project, integrate, shuffle_orders


@dataclass
class QuadraticToy:
    """Two convex quadratics ``0.5 (x - a_k)^T H_k (x - a_k)`` sharing one parameter vector."""

    hessians: tuple[np.ndarray, np.ndarray]
    minima: tuple[np.ndarray, np.ndarray]

    @property
    def lipschitz(self) -> float:
        """Largest eigenvalue of the summed Hessian."""
        return float(np.linalg.eigvalsh(self.hessians[0] + self.hessians[1])[-1])

    def losses(self, x) -> list[float]:
        return [0.5 * float((x - a) @ h @ (x - a)) for h, a in zip(self.hessians, self.minima)]

    def total(self, x) -> float:
        return sum(self.losses(x))

    def grads(self, x) -> list[np.ndarray]:
        return [h @ (x - a) for h, a in zip(self.hessians, self.minima)]

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> "QuadraticToy":
        hs = []
        for _ in range(2):
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            eig = rng.uniform(0.1, 5.0, size=dim)
            hs.append((q * eig) @ q.T)
        minima = tuple(rng.normal(scale=3.0, size=dim) for _ in range(2))
        return cls(tuple(hs), minima)


def integrated_step(toy: QuadraticToy, x, eta: float, cfg: IntegrationConfig, step: int = 0):
    """One conflict-aware update. Returns ``(new_x, had_conflict)``."""
    g = toy.grads(x)
    orders = shuffle_orders(2, 1, np.random.default_rng([cfg.shuffle_seed, step]))[0]
    projected = enumerate_project(g, cfg, orders=orders)
    update = integrate(g, projected, cfg)
    return x - eta * update, float(g[0] @ g[1]) < 0.0


@dataclass
class SwapInstance:
    """One neuron with two candidate inputs, of which one is kept."""

    z: np.ndarray  # inputs (Z_j, Z_k)
    w: np.ndarray  # weights
    s: np.ndarray  # scores; entry 0 is currently kept
    target: float
    eta: float

    def loss(self, pre: float) -> float:
        return 0.5 * (pre - self.target) ** 2

    def step(self):
        """One straight-through step on weights and scores.

        Returns ``(swapped, loss_before, loss_after)`` where the loss after
        uses whichever connection ranks first once the scores moved.
        """
        pre = self.w[0] * self.z[0]
        dl = pre - self.target  # dL/dI
        mask = np.array([1.0, 0.0])
        new_w = self.w - self.eta * dl * mask * self.z
        new_s = self.s - self.eta * dl * self.w * self.z  # unfiltered, as in the descent argument
        keep = 1 if new_s[1] > new_s[0] else 0
        after = self.loss(new_w[keep] * self.z[keep])
        return keep == 1, self.loss(pre), after


def random_swap_instance(rng: np.random.Generator, eta: float = 1e-2) -> SwapInstance:
    z = rng.normal(size=2)
    w = rng.normal(size=2)
    target = rng.normal(scale=2.0)
    s0 = rng.uniform(0.0, 1.0)
    gap = rng.uniform(0.0, 0.05)
    return SwapInstance(z, w, np.array([s0 + gap, s0]), target, eta)


def swap_is_local(inst: SwapInstance) -> bool:
    """Whether the swapped-in contribution lies within the first-order regime.

    The descent argument drops the second-order term, which is valid when
    the pre-activation change is small against the current error:
    ``|w_k Z_k - w_j Z_j| <= |dL/dI|``.
    """
    pre = inst.w[0] * inst.z[0]
    return abs(inst.w[1] * inst.z[1] - pre) <= abs(pre - inst.target)
