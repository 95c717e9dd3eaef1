"""Flat, named parameter collections and their on-disk archive format."""

from __future__ import annotations

import json
from collections.abc import Callable, Iterator, Mapping
from pathlib import Path

import numpy as np
import torch


class StructureError(ValueError):
    """Two parameter collections (or maps) do not line up."""


class ParameterVector(Mapping[str, torch.Tensor]):
    """Ordered mapping ``layer name -> tensor`` holding every trainable value of a net."""

    def __init__(self, entries: Mapping[str, torch.Tensor]):
        self._entries = dict(entries)

    def __getitem__(self, key: str) -> torch.Tensor:
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ParameterVector({len(self)} entries, {self.total_count} values)"

    @property
    def entries(self) -> dict[str, torch.Tensor]:
        return self._entries

    @property
    def total_count(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def check_compatible(self, other: Mapping[str, torch.Tensor]) -> None:
        if list(self.keys()) != list(other.keys()):
            missing = set(self.keys()) ^ set(other.keys())
            raise StructureError(f"key sets differ: {sorted(missing)[:5]}")
        for k, v in self._entries.items():
            if tuple(v.shape) != tuple(other[k].shape):
                raise StructureError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(other[k].shape)}")

    def map(self, fn: Callable[[str, torch.Tensor], torch.Tensor]) -> ParameterVector:
        return ParameterVector({k: fn(k, v) for k, v in self._entries.items()})

    def detach(self) -> ParameterVector:
        return self.map(lambda _, v: v.detach().clone())

    def to(self, dtype: torch.dtype) -> ParameterVector:
        return self.map(lambda _, v: v.detach().to(dtype))

    def requires_grad_(self) -> ParameterVector:
        for v in self._entries.values():
            v.requires_grad_(True)
        return self

    def flatten(self) -> torch.Tensor:
        return torch.cat([v.reshape(-1) for v in self._entries.values()])

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self._entries.items()}

    @classmethod
    def from_numpy(cls, arrays: Mapping[str, np.ndarray]) -> ParameterVector:
        return cls({k: torch.from_numpy(np.array(v, copy=True)) for k, v in arrays.items()})

    def equal(self, other: Mapping[str, torch.Tensor]) -> bool:
        """Bit-level equality."""
        if list(self.keys()) != list(other.keys()):
            return False
        return all(torch.equal(v, other[k]) for k, v in self._entries.items())


MANIFEST_KEY = "__manifest__"


def save_parameters(path: str | Path, theta: ParameterVector, manifest: dict) -> None:
    """Write ``theta`` as little-endian float32 arrays plus an embedded JSON manifest."""
    arrays = {k: np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f4") for k, v in theta.items()}
    if MANIFEST_KEY in arrays:
        raise StructureError(f"reserved layer name {MANIFEST_KEY}")
    manifest = dict(manifest)
    manifest["layers"] = {k: list(a.shape) for k, a in arrays.items()}
    manifest["layer_order"] = list(arrays)
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{MANIFEST_KEY: blob})


def load_parameters(path: str | Path) -> tuple[ParameterVector, dict]:
    with np.load(path, allow_pickle=False) as archive:
        manifest = json.loads(bytes(archive[MANIFEST_KEY]).decode("utf-8"))
        order = manifest.get("layer_order", sorted(manifest["layers"]))
        arrays = {}
        for k in order:
            a = archive[k]
            if list(a.shape) != manifest["layers"][k]:
                raise StructureError(f"archive shape for {k} disagrees with manifest")
            arrays[k] = a.astype(np.float32)
    return ParameterVector.from_numpy(arrays), manifest
