"""Single-file checkpoint archives.

A checkpoint is a zip holding `meta.json` (format version, model kind tag,
config dict, step counter, free-form extras) and `arrays.npz` with every
named tensor: model parameters and buffers, optimizer moments, and RNG
states.  Arrays round-trip bitwise.
"""

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointData:
    kind: str
    config: dict
    step: int
    arrays: dict
    extra: dict

    def require_kind(self, expected: str) -> "CheckpointData":
        if self.kind != expected:
            raise CheckpointError(
                f"checkpoint holds a {self.kind!r} model, expected {expected!r}"
            )
        return self


def _config_to_dict(config) -> dict:
    if dataclasses.is_dataclass(config) and not isinstance(config, type):
        return dataclasses.asdict(config)
    if isinstance(config, dict):
        return dict(config)
    raise CheckpointError(f"config must be a dataclass or dict, got {type(config)}")


def save_checkpoint(path, kind: str, config, step: int, arrays: dict, extra: dict = None):
    """Write a checkpoint archive; keys in `arrays` map to numpy arrays."""
    clean = {}
    for key, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        clean[key] = np.asarray(value)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": _config_to_dict(config),
        "step": int(step),
        "extra": extra or {},
        "array_names": sorted(clean),
    }
    buf = io.BytesIO()
    np.savez(buf, **clean)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        zf.writestr("arrays.npz", buf.getvalue())
    return path


def load_checkpoint(path) -> CheckpointData:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            with zf.open("arrays.npz") as fh:
                npz = np.load(io.BytesIO(fh.read()))
                arrays = {k: npz[k] for k in npz.files}
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {meta.get('format_version')}"
        )
    missing = set(meta.get("array_names", [])) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing arrays: {sorted(missing)}")
    return CheckpointData(
        kind=meta["kind"],
        config=meta["config"],
        step=int(meta["step"]),
        arrays=arrays,
        extra=meta.get("extra", {}),
    )


# --- torch state helpers -----------------------------------------------------


def state_dict_arrays(module: torch.nn.Module, prefix: str = "model/") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_dict_arrays(module: torch.nn.Module, arrays: dict, prefix: str = "model/"):
    state = {}
    for key, value in arrays.items():
        if key.startswith(prefix):
            state[key[len(prefix):]] = torch.from_numpy(np.asarray(value).copy())
    module.load_state_dict(state, strict=True)
    return module


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict:
    """Flatten Adam-style optimizer state to named arrays.  Parameter order
    inside param_groups is the canonical index."""
    out = {}
    state = opt.state_dict()
    for idx, entry in state["state"].items():
        for name, value in entry.items():
            if isinstance(value, torch.Tensor):
                out[f"{prefix}{idx}/{name}"] = value.detach().cpu().numpy()
            else:
                out[f"{prefix}{idx}/{name}"] = np.asarray(value)
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: dict, prefix: str):
    state = opt.state_dict()
    entries = {}
    for key, value in arrays.items():
        if not key.startswith(prefix):
            continue
        idx_str, name = key[len(prefix):].split("/", 1)
        entries.setdefault(int(idx_str), {})[name] = value
    rebuilt = {}
    for idx, entry in entries.items():
        rebuilt[idx] = {
            name: torch.from_numpy(np.asarray(value)).clone()
            if np.asarray(value).ndim > 0
            else torch.tensor(value)
            for name, value in entry.items()
        }
    state["state"] = rebuilt
    opt.load_state_dict(state)
    return opt


def generator_state_array(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy()


def load_generator_state(gen: torch.Generator, array: np.ndarray) -> torch.Generator:
    gen.set_state(torch.from_numpy(np.asarray(array, dtype=np.uint8)))
    return gen


def numpy_rng_state(rng: np.random.Generator) -> dict:
    """JSON-able PCG64 state."""
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def restore_numpy_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    fixed = dict(state)
    fixed["state"] = {k: int(v) for k, v in state["state"].items()}
    rng.bit_generator.state = fixed
    return rng
