"""Self-describing array archives with a format tag and an integrity digest.

File layout: ``MAGIC | sha256(payload) | payload`` where payload is an ``.npz``
(no pickles) holding the named arrays plus a JSON ``__meta__`` record.
"""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"UNIMISS\x01"
RUN_TAG = "unimiss-run-v1"
BACKBONE_TAG = "mit-v1"
_META = "__meta__"


class CheckpointError(IOError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict, tag: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, format=tag)
    buf = io.BytesIO()
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(buf, **{_META: blob}, **arrays)
    payload = buf.getvalue()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MAGIC + hashlib.sha256(payload).digest() + payload)
    tmp.replace(path)
    return path


def load_arrays(path: str | Path, expected_tag: str | tuple[str, ...] | None = None):
    """Return ``(arrays, meta)``; raises CheckpointError on corruption or tag mismatch."""
    raw = Path(path).read_bytes()
    head = len(MAGIC) + 32
    if len(raw) < head or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an archive (bad magic)")
    digest, payload = raw[len(MAGIC):head], raw[head:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: integrity check failed (truncated or corrupted)")
    with np.load(io.BytesIO(payload), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop(_META).tobytes().decode())
    if expected_tag is not None:
        tags = (expected_tag,) if isinstance(expected_tag, str) else tuple(expected_tag)
        if meta.get("format") not in tags:
            raise CheckpointError(f"{path}: format tag {meta.get('format')!r}, expected {' or '.join(tags)}")
    return arrays, meta


def _to_numpy(state: dict[str, torch.Tensor], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in state.items()}


def _from_numpy(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, torch.Tensor]:
    head = prefix + "/"
    return {k[len(head):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(head)}


def optimizer_to_arrays(opt_state: dict) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    for idx, st in opt_state["state"].items():
        for key, value in st.items():
            arrays[f"optim/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return arrays, {"param_groups": opt_state["param_groups"]}


def optimizer_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> dict:
    state: dict[int, dict] = {}
    for name, value in arrays.items():
        if not name.startswith("optim/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(value.copy())
    # JSON turns tuples (betas) into lists
    groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def save_backbone(path: str | Path, backbone: torch.nn.Module, mit_config_text: str) -> Path:
    """Backbone-only archive (``mit-v1``): parameter names to arrays plus the MiT config."""
    return save_arrays(path, _to_numpy(backbone.state_dict(), "backbone"),
                       {"mit_config": mit_config_text}, tag=BACKBONE_TAG)


def load_backbone_state(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Backbone weights from a ``mit-v1`` archive or the teacher of a run checkpoint."""
    arrays, meta = load_arrays(path, expected_tag=(BACKBONE_TAG, RUN_TAG))
    if meta["format"] == BACKBONE_TAG:
        return _from_numpy(arrays, "backbone"), meta
    teacher = _from_numpy(arrays, "teacher")
    return {k[len("backbone."):]: v for k, v in teacher.items() if k.startswith("backbone.")}, meta


def save_checkpoint(path: str | Path, state, config_text: str) -> Path:
    """Run checkpoint: student, teacher, center, optimizer, step, schedule config, data cursor."""
    arrays = {}
    arrays.update(_to_numpy(state.student.state_dict(), "student"))
    arrays.update(_to_numpy(state.teacher.state_dict(), "teacher"))
    arrays["center"] = state.center.detach().cpu().numpy()
    opt_arrays, opt_meta = optimizer_to_arrays(state.optimizer.state_dict())
    arrays.update(opt_arrays)
    meta = {
        "step": int(state.step),
        "data_cursor": int(state.data_cursor),
        "config": config_text,
        "optimizer": opt_meta,
    }
    return save_arrays(path, arrays, meta, tag=RUN_TAG)


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)`` of a run checkpoint; see ``engine.restore_state``."""
    arrays, meta = load_arrays(path, expected_tag=RUN_TAG)
    tensors = {
        "student": _from_numpy(arrays, "student"),
        "teacher": _from_numpy(arrays, "teacher"),
        "center": torch.from_numpy(arrays["center"].copy()),
        "optimizer": optimizer_from_arrays(arrays, meta["optimizer"]),
    }
    return tensors, meta
