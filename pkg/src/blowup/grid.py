"""Uniform 1-D grids and sampled fields shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Symmetric uniform grid on ``[-y_max, y_max]`` with a node at the origin."""

    y_max: float
    n_points: int

    def __post_init__(self):
        if self.y_max <= 0:
            raise ValueError(f"y_max must be positive, got {self.y_max}")
        if self.n_points < 3 or self.n_points % 2 == 0:
            raise ValueError(f"n_points must be odd and >= 3, got {self.n_points}")

    @classmethod
    def from_spacing(cls, y_max: float, h: float) -> "GridSpec":
        half = int(round(y_max / h))
        return cls(half * h, 2 * half + 1)

    @property
    def h(self) -> float:
        return 2.0 * self.y_max / (self.n_points - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        half = (self.n_points - 1) // 2
        y = np.arange(-half, half + 1, dtype=float) * self.h
        y.flags.writeable = False
        return y

    def to_dict(self) -> dict:
        return {"y_max": self.y_max, "n_points": self.n_points, "h": self.h}


@dataclass(frozen=True)
class Field:
    """Samples of a real function on ``grid``.

    ``frame`` is ``"y"`` (similarity variables, ``time`` = s) or ``"x"``
    (physical variables, ``time`` = t).
    """

    values: np.ndarray
    grid: GridSpec
    frame: str = "y"
    time: float = 0.0
    _frozen: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(
                f"values shape {vals.shape} does not match grid of {self.grid.n_points} points"
            )
        if self.frame not in ("x", "y"):
            raise ValueError(f"frame must be 'x' or 'y', got {self.frame!r}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.nodes

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def with_values(self, values, time: float | None = None) -> "Field":
        return Field(values, self.grid, self.frame, self.time if time is None else time)

    @classmethod
    def from_function(cls, func, grid: GridSpec, frame: str = "y", time: float = 0.0) -> "Field":
        return cls(func(grid.nodes), grid, frame, time)
