"""Closed-loop application of synthesized gains ``u = K Z(x)`` per sub-platoon."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import lift_states


class ControllerFault(RuntimeError):
    """Raised when the controller is fed a non-finite state or produces a non-finite effort."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:.3f} s")
        self.t = t


@dataclass(frozen=True)
class GainBlock:
    """Gain of one sub-platoon.

    ``indices`` are the global vehicle indices of the group in order and
    ``av_local`` the positions of its AVs within the group.
    """

    indices: tuple
    av_local: tuple
    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "av_local", tuple(int(i) for i in self.av_local))
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        object.__setattr__(self, "K", K)
        n_z = 3 * len(self.indices) + 2 * len(self.av_local)
        if K.shape != (len(self.av_local), n_z):
            raise ValueError(f"gain has shape {K.shape}, expected {(len(self.av_local), n_z)}")

    @property
    def av_global(self) -> list[int]:
        return [self.indices[i] for i in self.av_local]

    def control(self, err: np.ndarray) -> np.ndarray:
        x = err[list(self.indices)].reshape(-1)
        return self.K @ lift_states(x, self.av_local)


@dataclass(frozen=True)
class ControllerBundle:
    blocks: tuple
    t_s: float
    n_vehicles: int
    u_max: Optional[float] = None  # exploratory clamp, off unless set

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        seen = [i for b in self.blocks for i in b.indices]
        if sorted(seen) != list(range(self.n_vehicles)) or len(seen) != len(set(seen)):
            raise ValueError("gain blocks must partition the platoon")
        if self.t_s <= 0:
            raise ValueError("t_s must be positive")

    @classmethod
    def from_groups(cls, groups: Sequence, gains: Sequence[np.ndarray], t_s: float, n_vehicles: int, u_max=None):
        """``groups`` are objects with ``indices`` and ``spec.av_indices`` (such as sub-platoons)."""
        blocks = [GainBlock(g.indices, g.spec.av_indices, K) for g, K in zip(groups, gains)]
        return cls(tuple(blocks), t_s, n_vehicles, u_max)

    @property
    def av_indices(self) -> list[int]:
        return sorted(i for b in self.blocks for i in b.av_global)

    def save(self, path) -> None:
        meta = {"t_s": self.t_s, "n_vehicles": self.n_vehicles, "u_max": self.u_max,
                "blocks": [{"indices": list(b.indices), "av_local": list(b.av_local)} for b in self.blocks]}
        np.savez(path, meta=json.dumps(meta), **{f"K{k}": b.K for k, b in enumerate(self.blocks)})

    @classmethod
    def load(cls, path) -> "ControllerBundle":
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f["meta"]))
            blocks = [GainBlock(b["indices"], b["av_local"], np.array(f[f"K{k}"])) for k, b in enumerate(meta["blocks"])]
        return cls(tuple(blocks), meta["t_s"], meta["n_vehicles"], meta["u_max"])


def cacc_control(bundle: ControllerBundle, err: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Efforts for all vehicles (zero for HVs) from the global ``(n, 3)`` error state."""
    err = np.asarray(err, dtype=float).reshape(bundle.n_vehicles, 3)
    if not np.all(np.isfinite(err)):
        raise ControllerFault("non-finite platoon state", t)
    u = np.zeros(bundle.n_vehicles)
    for block in bundle.blocks:
        u[block.av_global] = block.control(err)
    if not np.all(np.isfinite(u)):
        raise ControllerFault("non-finite control effort", t)
    if bundle.u_max is not None:
        u = np.clip(u, -bundle.u_max, bundle.u_max)
    return u


class CaccController:
    """Sampled controller: recomputes at multiples of ``t_s`` and holds in between."""

    def __init__(self, bundle: ControllerBundle):
        self.bundle = bundle
        self._k = None
        self._u = np.zeros(bundle.n_vehicles)

    def __call__(self, t: float, err: np.ndarray) -> np.ndarray:
        k = int(np.floor(t / self.bundle.t_s + 1e-9))
        if k != self._k:
            self._u = cacc_control(self.bundle, err, t)
            self._k = k
        return self._u.copy()
