"""On-disk formats: raw little-endian tensors with JSON sidecars, model
checkpoints, trajectory/ensemble directories, CSV emission, and run
manifests.  All writers are deterministic byte-for-byte given identical
inputs; manifests are written atomically (tmp + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time

import numpy as np

BYTE_ORDER = "little"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _atomic_write(path, data_bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data_bytes)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    _atomic_write(
        path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")
    )


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_tensor(path_base, arr, dtype=None):
    """Raw little-endian values + sidecar (dtype, shape, byte order)."""
    arr = np.asarray(arr)
    name = dtype or str(arr.dtype)
    if name not in _DTYPES:
        raise ValueError(f"unsupported dtype {name}; use float32/float64")
    cast = arr.astype(_DTYPES[name])
    _atomic_write(path_base + ".bin", cast.tobytes(order="C"))
    write_json(
        path_base + ".json",
        {"dtype": name, "shape": list(arr.shape), "byte_order": BYTE_ORDER},
    )


def load_tensor(path_base):
    meta = read_json(path_base + ".json")
    if meta["byte_order"] != BYTE_ORDER:
        raise ValueError(f"unsupported byte order {meta['byte_order']}")
    raw = np.fromfile(path_base + ".bin", dtype=_DTYPES[meta["dtype"]])
    return raw.reshape(meta["shape"]).astype(meta["dtype"])


def fmt_float(x):
    """Shortest round-trip decimal form; deterministic across runs."""
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(
            ",".join(fmt_float(v) if isinstance(v, (float, np.floating)) else str(v)
                     for v in row)
        )
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    return header, rows


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ckpt_dir, params, model_json, schedule_json, optimizer_json,
                    seed, epoch, layout_fields=None, training_state=None):
    """params.bin (little-endian float32) + meta.json; optionally the exact
    optimizer/rng state needed to resume bit-identically."""
    os.makedirs(ckpt_dir, exist_ok=True)
    params = np.asarray(params)
    _atomic_write(
        os.path.join(ckpt_dir, "params.bin"),
        params.astype("<f4").tobytes(order="C"),
    )
    meta = {
        "format": "flowgen-checkpoint-v1",
        "n_params": int(params.size),
        "model": model_json,
        "schedule": schedule_json,
        "optimizer": optimizer_json,
        "seed": int(seed),
        "epoch": int(epoch),
    }
    if layout_fields is not None:
        meta["param_layout"] = layout_fields
    write_json(os.path.join(ckpt_dir, "meta.json"), meta)
    if training_state is not None:
        write_json(os.path.join(ckpt_dir, "training_state.json"),
                   training_state["json"])
        save_tensor(os.path.join(ckpt_dir, "adam_m"), training_state["m"], "float64")
        save_tensor(os.path.join(ckpt_dir, "adam_v"), training_state["v"], "float64")


def load_checkpoint(ckpt_dir):
    meta = read_json(os.path.join(ckpt_dir, "meta.json"))
    raw = np.fromfile(os.path.join(ckpt_dir, "params.bin"), dtype="<f4")
    if raw.size != meta["n_params"]:
        raise ValueError(
            f"checkpoint corrupt: expected {meta['n_params']} params, got {raw.size}"
        )
    params = raw.astype(np.float64)
    state = None
    state_path = os.path.join(ckpt_dir, "training_state.json")
    if os.path.exists(state_path):
        state = {
            "json": read_json(state_path),
            "m": load_tensor(os.path.join(ckpt_dir, "adam_m")),
            "v": load_tensor(os.path.join(ckpt_dir, "adam_v")),
        }
    return params, meta, state


# ---------------------------------------------------------------------------
# trajectories and ensemble datasets


def save_trajectory(path_base, trajectory, extra_meta=None):
    save_tensor(path_base, trajectory.fields, "float64")
    meta = {
        "times": [float(t) for t in trajectory.times],
        "domain": float(trajectory.domain),
        "grid": int(trajectory.fields.shape[1]) if trajectory.fields.size else 0,
        "channels": int(trajectory.fields.shape[-1]) if trajectory.fields.size else 0,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_json(path_base + ".meta.json", meta)


def load_trajectory(path_base):
    from .fluids2d import Trajectory

    fields = load_tensor(path_base)
    meta = read_json(path_base + ".meta.json")
    return Trajectory(np.array(meta["times"]), fields, meta["domain"]), meta


def save_ensemble(out_dir, members, spec_json, seed):
    """Directory of member trajectories plus a manifest listing them."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for m in members:
        stem = f"member_{m.macro_id:04d}_{m.micro_id:04d}"
        save_trajectory(
            os.path.join(out_dir, stem),
            m.trajectory,
            {
                "macro_id": m.macro_id,
                "micro_id": m.micro_id,
                "shear_params": m.params.to_json(),
            },
        )
        entries.append(
            {"macro_id": m.macro_id, "micro_id": m.micro_id, "file": stem}
        )
    write_json(
        os.path.join(out_dir, "manifest.json"),
        {"kind": "ensemble", "seed": int(seed), "spec": spec_json, "members": entries},
    )


def load_ensemble(out_dir):
    manifest = read_json(os.path.join(out_dir, "manifest.json"))
    members = []
    for e in manifest["members"]:
        traj, meta = load_trajectory(os.path.join(out_dir, e["file"]))
        members.append((e["macro_id"], e["micro_id"], traj, meta))
    return manifest, members


# ---------------------------------------------------------------------------
# run manifests


def write_run_manifest(out_dir, config_json, artifacts, started_at, status="ok"):
    """Atomic record of a finished run: config snapshot, code version,
    wall-clock, artifact paths with checksums."""
    from . import __version__

    checks = {}
    for rel in artifacts:
        p = os.path.join(out_dir, rel)
        if os.path.isfile(p):
            checks[rel] = sha256_file(p)
    write_json(
        os.path.join(out_dir, "run_manifest.json"),
        {
            "kind": "run",
            "status": status,
            "code_version": __version__,
            "config": config_json,
            "wall_clock_seconds": round(time.time() - started_at, 3),
            "artifacts": sorted(artifacts),
            "sha256": checks,
        },
    )
