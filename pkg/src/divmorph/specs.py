"""Morphology and task descriptions plus their JSON wire formats."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, FormatError

LIMB_RANGES = {
    "length": (0.3, 1.0),
    "joint_range": (0.5, 1.5),
    "damping": (0.1, 0.5),
    "density": (0.5, 1.5),
}
MIN_LIMBS, MAX_LIMBS = 3, 8


@dataclass(frozen=True)
class Limb:
    length: float       # m
    joint_range: float  # rad
    damping: float
    density: float


@dataclass(frozen=True)
class MorphSpec:
    """A kinematic chain/tree of limbs rooted at limb 0.

    topology[i] is the parent limb index (-1 for the root); for a plain
    chain topology[i] == i - 1.
    """

    id: str
    limbs: tuple[Limb, ...]
    topology: tuple[int, ...]

    @property
    def n_limbs(self):
        return len(self.limbs)

    def depths(self):
        """Distance of each limb from the root."""
        d = [0] * self.n_limbs
        for i, p in enumerate(self.topology):
            d[i] = 0 if p < 0 else d[p] + 1
        return np.asarray(d, dtype=np.float64)

    def validate(self):
        n = self.n_limbs
        if not (MIN_LIMBS <= n <= MAX_LIMBS):
            raise ContractViolationError(f"{self.id}: limb count {n} outside [{MIN_LIMBS}, {MAX_LIMBS}]")
        if len(self.topology) != n or self.topology[0] != -1:
            raise ContractViolationError(f"{self.id}: topology must be a tree rooted at limb 0")
        for i, p in enumerate(self.topology[1:], start=1):
            if not (0 <= p < i):
                raise ContractViolationError(f"{self.id}: parent of limb {i} must precede it")
        for limb in self.limbs:
            for name, (lo, hi) in LIMB_RANGES.items():
                v = getattr(limb, name)
                if not (lo <= v <= hi):
                    raise ContractViolationError(f"{self.id}: limb {name}={v} outside [{lo}, {hi}]")
        return self

    def to_dict(self):
        return {
            "id": self.id,
            "limbs": [
                {"length": l.length, "joint_range": l.joint_range,
                 "damping": l.damping, "density": l.density}
                for l in self.limbs
            ],
            "topology": list(self.topology),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            limbs = tuple(Limb(l["length"], l["joint_range"], l["damping"], l["density"])
                          for l in d["limbs"])
            return cls(d["id"], limbs, tuple(d["topology"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed MorphSpec: {exc}") from exc


@dataclass(frozen=True)
class TaskSpec:
    id: str
    instruction: str
    reward_kind: str
    params: dict = field(default_factory=dict)

    def validate(self):
        if not self.instruction.strip():
            raise ContractViolationError(f"{self.id}: instruction must be non-empty")
        return self

    def to_dict(self):
        return {"id": self.id, "instruction": self.instruction,
                "reward_kind": self.reward_kind, "params": self.params}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["id"], d["instruction"], d["reward_kind"], dict(d.get("params", {})))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed TaskSpec: {exc}") from exc


def dump_morphs(morphs, path):
    with open(path, "w") as f:
        json.dump([m.to_dict() for m in morphs], f, indent=1, sort_keys=True)
        f.write("\n")


def load_morphs(path):
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return [MorphSpec.from_dict(d).validate() for d in raw]
