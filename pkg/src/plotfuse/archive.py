"""Flat key->array weight archives with a manifest and a load-verification probe.

Container: a single ``.npz`` holding ``param:<name>`` arrays, a JSON manifest
(shape/dtype per key), a probe input, and the output the archived weights
produced on that probe. Loading re-runs the probe and must reproduce the
declared output within tolerance, otherwise the archive is rejected.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Union

import numpy as np
import torch
from torch import nn

PROBE_TOLERANCE = 1e-4


class ArchiveError(RuntimeError):
    pass


def save_module_archive(
    path: Union[str, Path],
    module: nn.Module,
    probe_input: torch.Tensor,
    probe_fn: Callable[[nn.Module, torch.Tensor], torch.Tensor],
    meta: dict | None = None,
) -> None:
    params = {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}
    with torch.no_grad():
        probe_output = probe_fn(module, probe_input).detach().cpu().numpy()
    manifest = {
        "keys": {name: {"shape": list(arr.shape), "dtype": str(arr.dtype)} for name, arr in params.items()},
        "meta": meta or {},
    }
    payload = {f"param:{name}": arr for name, arr in params.items()}
    payload["probe_input"] = probe_input.detach().cpu().numpy()
    payload["probe_output"] = probe_output
    payload["manifest"] = np.array(json.dumps(manifest, sort_keys=True))
    np.savez(path, **payload)


def load_module_archive(
    path: Union[str, Path],
    module: nn.Module,
    probe_fn: Callable[[nn.Module, torch.Tensor], torch.Tensor],
    tolerance: float = PROBE_TOLERANCE,
) -> dict:
    """Load weights into ``module`` and verify the bundled probe reproduces."""
    path = Path(path)
    if not path.exists():
        raise ArchiveError(f"no such archive: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "manifest" not in data:
            raise ArchiveError(f"{path}: missing manifest")
        manifest = json.loads(str(data["manifest"]))
        state = {}
        for name, info in manifest["keys"].items():
            key = f"param:{name}"
            if key not in data:
                raise ArchiveError(f"{path}: missing array {key}")
            arr = data[key]
            if list(arr.shape) != info["shape"]:
                raise ArchiveError(f"{path}: {name} has shape {list(arr.shape)}, manifest says {info['shape']}")
            state[name] = torch.from_numpy(arr.copy())
        probe_input = torch.from_numpy(data["probe_input"].copy())
        expected = data["probe_output"].copy()

    missing = module.load_state_dict(state, strict=True)
    del missing
    with torch.no_grad():
        got = probe_fn(module, probe_input).detach().cpu().numpy()
    err = float(np.max(np.abs(got - expected))) if expected.size else 0.0
    if err > tolerance:
        raise ArchiveError(f"{path}: probe mismatch {err:.3e} > {tolerance:.0e}; archive does not match this architecture")
    return manifest.get("meta", {})
