"""Self-supervised grasp emulation: collect (observation, aligning displacement) pairs.

With the object held at the reference grasp, the EEF is displaced by random ``N``
around the reference pose. Each capture looks like the object held at some other
grasp with the EEF at the reference pose, and ``inverse(N)`` is the displacement
that aligns that emulated grasp back to the reference grasp.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import CollectionFailed, EmptyObservation, EmptySubset, FormatError
from .se3 import Pose, SampleRange, compose, inverse, sample_displacement
from .world import Observation, WorldState, observe

FORMAT_VERSION = 1
DEFAULT_M = 2000
DEFAULT_RANGE = SampleRange(0.30, 60.0)


@dataclass(frozen=True)
class ReferenceSetup:
    """Reference EEF pose and reference grasp. The grasp is simulator truth only."""

    reference_eef: Pose
    reference_grasp: Pose


@dataclass
class GraspDataset:
    entries: List[Tuple[Observation, Pose]]
    range: SampleRange
    reference_eef: Pose
    object_name: str = "object"
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a dataset needs at least one entry")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> List[Pose]:
        return [label for _, label in self.entries]

    @property
    def observations(self) -> List[Observation]:
        return [obs for obs, _ in self.entries]

    def __eq__(self, other):
        if not isinstance(other, GraspDataset):
            return NotImplemented
        return (
            self.range == other.range
            and self.reference_eef == other.reference_eef
            and self.object_name == other.object_name
            and len(self) == len(other)
            and all(o1 == o2 and l1 == l2 for (o1, l1), (o2, l2) in zip(self.entries, other.entries))
        )


def entry_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, index, attempt])


def collect_dataset(world: WorldState, sample_range: SampleRange, m: int = DEFAULT_M, seed: int = 0) -> GraspDataset:
    """Emulate ``m`` grasps around ``world.eef_pose`` (the reference pose).

    The EEF returns to the reference pose between captures, so every label is
    relative to it. Entry ``i`` draws from a generator seeded by ``(seed, i, attempt)``;
    empty captures are resampled, with at most ``10 * m`` attempts overall.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    reference = world.eef_pose
    entries = []
    attempts = 0
    for i in range(m):
        attempt = 0
        while True:
            attempts += 1
            if attempts > 10 * m:
                raise CollectionFailed(f"only {len(entries)} of {m} entries after {attempts - 1} attempts")
            rng = entry_rng(seed, i, attempt)
            label = inverse(sample_displacement(sample_range, rng))
            # observe at reference @ inverse(label) so that replaying a label is bit-exact
            try:
                obs = observe(world.replace(eef_pose=compose(reference, inverse(label))), rng)
            except EmptyObservation:
                attempt += 1
                continue
            entries.append((obs, label))
            break
    return GraspDataset(entries, sample_range, reference, world.object.name, seed)


def subset_by_range(d: GraspDataset, sub: SampleRange) -> GraspDataset:
    """Entries whose sampled displacement ``inverse(label)`` lies inside ``sub`` on all six DoFs."""
    if not sub.issubset(d.range):
        raise ValueError(f"{sub} is not inside the dataset range {d.range}")
    kept = [(o, label) for o, label in d.entries if sub.contains(inverse(label))]
    if not kept:
        raise EmptySubset(f"no entries inside {sub}")
    return GraspDataset(kept, sub, d.reference_eef, d.object_name, d.seed)


# -- persistence -------------------------------------------------------------


def _entry_record(obs: Observation, label: Pose) -> dict:
    return {
        "label": label.to_json(),
        "points_C": obs.points_C.tolist(),
        "appearance": None if obs.appearance is None else obs.appearance.tolist(),
        "mask_source": obs.mask_source,
        "point_ids": None if obs.point_ids is None else obs.point_ids.tolist(),
    }


def save_dataset(d: GraspDataset, path) -> None:
    """Write a JSON-lines file: one header record, then one record per entry."""
    lines = [json.dumps(_entry_record(o, label), separators=(",", ":")) for o, label in d.entries]
    digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    header = {
        "version": FORMAT_VERSION,
        "object": d.object_name,
        "range": d.range.to_json(),
        "reference_eef": d.reference_eef.to_json(),
        "m": len(lines),
        "seed": d.seed,
        "sha256": digest,
    }
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as f:
        f.write(json.dumps(header, separators=(",", ":")) + "\n")
        for line in lines:
            f.write(line + "\n")
    os.replace(tmp, path)


def load_dataset(path) -> GraspDataset:
    with open(path) as f:
        raw = f.read().split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    if not raw:
        raise FormatError("empty dataset file")
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"bad header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')!r}")
    lines = raw[1:]
    if len(lines) != header.get("m"):
        raise FormatError(f"header declares {header.get('m')} entries, file has {len(lines)}")
    if hashlib.sha256("\n".join(lines).encode()).hexdigest() != header.get("sha256"):
        raise FormatError("checksum mismatch")
    rng_ = SampleRange.from_json(header["range"])
    entries = []
    try:
        for line in lines:
            rec = json.loads(line)
            obs = Observation(
                np.array(rec["points_C"], dtype=float),
                rec.get("appearance"),
                rec.get("mask_source", "full"),
                rec.get("point_ids"),
            )
            entries.append((obs, Pose.from_json(rec["label"])))
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise FormatError(f"malformed entry: {e}") from None
    for _, label in entries:
        if not rng_.contains(inverse(label), tol=1e-9):
            raise FormatError("label outside the declared sample range")
    return GraspDataset(entries, rng_, Pose.from_json(header["reference_eef"]), header.get("object", "object"), header.get("seed"))
