"""Named parameter groups with freeze flags and a raw-file checkpoint format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, ValidationError
from .tape import Var

CHECKPOINT_VERSION = 1


class ParamStore:
    """Flat mapping of group name -> float array, plus per-group freeze flags.

    Shapes are fixed at creation; frozen groups receive zero gradients and
    zero optimizer updates. ``dtype`` is float64 for verification work and
    may be float32 for training runs.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._groups: dict[str, np.ndarray] = {}
        self._frozen: set[str] = set()

    def create(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self._groups:
            raise ValidationError(f"duplicate parameter group '{name}'")
        self._groups[name] = np.asarray(array, dtype=self.dtype).copy()
        return self._groups[name]

    def get(self, name: str) -> np.ndarray:
        return self._groups[name]

    def set(self, name: str, array: np.ndarray):
        cur = self._groups[name]
        array = np.asarray(array, dtype=self.dtype)
        if array.shape != cur.shape:
            raise ValidationError(
                f"group '{name}' has shape {cur.shape}, got {array.shape}")
        self._groups[name] = array.copy()

    def names(self) -> list[str]:
        return sorted(self._groups)

    def __contains__(self, name: str) -> bool:
        return name in self._groups

    def freeze(self, *prefixes: str):
        for name in self._match(prefixes):
            self._frozen.add(name)

    def unfreeze(self, *prefixes: str):
        for name in self._match(prefixes):
            self._frozen.discard(name)

    def unfreeze_all(self):
        self._frozen.clear()

    def _match(self, prefixes) -> list[str]:
        hits = []
        for prefix in prefixes:
            matched = [n for n in self._groups
                       if n == prefix or n.startswith(prefix + "/")]
            if not matched:
                raise ValidationError(f"no parameter group matches '{prefix}'")
            hits.extend(matched)
        return hits

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if n not in self._frozen]

    def leaf_vars(self) -> dict[str, Var]:
        """Fresh leaf nodes for one forward/backward pass."""
        return {
            name: Var(arr, requires_grad=name not in self._frozen)
            for name, arr in self._groups.items()
        }

    def num_params(self) -> int:
        return int(sum(a.size for a in self._groups.values()))

    def clone(self) -> "ParamStore":
        other = ParamStore(self.dtype)
        for name in self.names():
            other.create(name, self._groups[name])
        other._frozen = set(self._frozen)
        return other


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _file_name(group: str) -> str:
    return group.replace("/", "__") + ".f32"


def save_checkpoint(store: ParamStore, directory, stage: str, step: int):
    """manifest.json plus one raw little-endian float32 file per group."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups = []
    for name in store.names():
        arr = store.get(name)
        arr.astype("<f4").tofile(directory / _file_name(name))
        groups.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "frozen": store.is_frozen(name),
        })
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "step": int(step),
        "groups": groups,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory, dtype=np.float64):
    """Returns (store, stage, step). Raises CheckpointError on problems."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest.json under {directory}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {manifest.get('format_version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    store = ParamStore(dtype)
    for rec in manifest["groups"]:
        shape = tuple(rec["shape"])
        raw = np.fromfile(directory / _file_name(rec["name"]), dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise CheckpointError(f"group '{rec['name']}' file size mismatch")
        store.create(rec["name"], raw.reshape(shape))
        if rec.get("frozen"):
            store.freeze(rec["name"])
    return store, manifest["stage"], manifest["step"]
