"""Reconstruction state: current tablets plus the initial tablets they grew from."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotFound
from .tablet import Tablet


@dataclass
class Scene:
    """Current tablets, the first-generation tablets and who owns whom.

    ``affiliation[k]`` is the index of the current tablet that initial tablet
    ``k`` has been merged into. ``camera_centers[c]`` is the optical center of
    view ``c``; tablet center rays start there.
    """

    tablets: list[Tablet]
    initial: list[Tablet]
    affiliation: np.ndarray
    camera_centers: np.ndarray

    def __post_init__(self):
        self.affiliation = np.asarray(self.affiliation, dtype=np.int64).reshape(-1)
        self.camera_centers = np.asarray(self.camera_centers, dtype=np.float64).reshape(-1, 3)
        if len(self.affiliation) != len(self.initial):
            raise ValueError("affiliation length must match the initial tablet count")
        if len(self.affiliation) and (self.affiliation.min() < 0 or self.affiliation.max() >= len(self.tablets)):
            raise ValueError("affiliation points at a missing tablet")

    @classmethod
    def from_initial(cls, tablets: list[Tablet], camera_centers) -> "Scene":
        return cls(
            tablets=[t.copy() for t in tablets],
            initial=[t.copy() for t in tablets],
            affiliation=np.arange(len(tablets)),
            camera_centers=camera_centers,
        )

    def members(self, index: int) -> np.ndarray:
        return np.nonzero(self.affiliation == index)[0]

    def concat(self, other: "Scene") -> "Scene":
        """Union of two scenes sharing one camera list."""
        return Scene(
            tablets=self.tablets + other.tablets,
            initial=self.initial + other.initial,
            affiliation=np.concatenate([self.affiliation, other.affiliation + len(self.tablets)]),
            camera_centers=self.camera_centers,
        )

    def keep(self, survivors) -> "Scene":
        """Restrict to the listed current tablets, dropping their orphaned initial tablets."""
        survivors = [int(i) for i in survivors]
        remap = np.full(len(self.tablets), -1, dtype=np.int64)
        remap[survivors] = np.arange(len(survivors))
        owner = remap[self.affiliation] if len(self.affiliation) else self.affiliation
        alive = owner >= 0
        return Scene(
            tablets=[self.tablets[i] for i in survivors],
            initial=[t for t, a in zip(self.initial, alive) if a],
            affiliation=owner[alive],
            camera_centers=self.camera_centers,
        )


@dataclass
class PlaneSet:
    """Final reconstruction: one tablet per plane instance, ids dense from 0."""

    tablets: list[Tablet]
    instance_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.instance_ids:
            self.instance_ids = list(range(len(self.tablets)))
        if len(self.instance_ids) != len(self.tablets):
            raise ValueError("one instance id per tablet is required")

    def __len__(self) -> int:
        return len(self.tablets)

    def index_of(self, instance_id: int) -> int:
        try:
            return self.instance_ids.index(int(instance_id))
        except ValueError:
            raise NotFound(f"no plane with instance id {instance_id}") from None

    def copy(self) -> "PlaneSet":
        return PlaneSet([t.copy() for t in self.tablets], list(self.instance_ids))
