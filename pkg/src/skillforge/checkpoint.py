"""Self-describing binary checkpoints for parameters, Adam state, and RNG.

Layout of a file:

    line 1: ``SKILLFORGE-CKPT <version>``            (ascii)
    line 2: one JSON manifest (kind, layouts, adam hyperparams, rng state,
            payload order, per-array element counts)
    rest:   raw little-endian float64 arrays, concatenated in the manifest's
            ``order``: every param vector, then every Adam (m, v) pair.

Round trips are bit-exact because values are written/read as raw float64.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import AdamState, ParamVector

MAGIC = "SKILLFORGE-CKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointLayoutError(CheckpointError):
    pass


def _layout_to_json(layout):
    return [[name, list(shape)] for name, shape in layout]


def _layout_from_json(data):
    return tuple((name, tuple(shape)) for name, shape in data)


def save_checkpoint(
    path,
    params: dict[str, ParamVector],
    adam: dict[str, AdamState] | None = None,
    rng_state: dict | None = None,
    kind: str = "full",
    meta: dict | None = None,
):
    """Write named param vectors plus optional optimizer/rng state."""
    adam = adam or {}
    manifest = {
        "kind": kind,
        "meta": meta or {},
        "params": {name: _layout_to_json(p.layout) for name, p in params.items()},
        "adam": {
            name: {
                "layout": _layout_to_json(st.first_moment.layout),
                "step_count": st.step_count,
                "lr": st.lr,
                "beta1": st.beta1,
                "beta2": st.beta2,
                "eps": st.eps,
            }
            for name, st in adam.items()
        },
        "rng": rng_state,
        "order": [f"param:{n}" for n in params] + [f"adam:{n}" for n in adam],
    }
    payload = []
    for name in params:
        payload.append(params[name].values)
    for name in adam:
        payload.append(adam[name].first_moment.values)
        payload.append(adam[name].second_moment.values)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n".encode("ascii"))
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for arr in payload:
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expect_kind: str | None = None):
    """Read a checkpoint; returns (params, adam, rng_state, meta).

    Nothing is returned unless the whole file parses, so a truncated or
    corrupt file never exposes partial state.
    """
    raw = Path(path).read_bytes()
    head_end = raw.find(b"\n")
    if head_end < 0:
        raise CheckpointCorruptError(f"{path}: missing header line")
    head = raw[:head_end].decode("ascii", errors="replace").split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a {MAGIC} file")
    if head[1] != str(VERSION):
        raise CheckpointVersionError(
            f"{path}: format version {head[1]}, this build reads version {VERSION}"
        )
    manifest_end = raw.find(b"\n", head_end + 1)
    if manifest_end < 0:
        raise CheckpointCorruptError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[head_end + 1 : manifest_end].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable manifest: {exc}") from exc
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise CheckpointLayoutError(
            f"{path}: checkpoint kind {manifest.get('kind')!r}, expected {expect_kind!r}"
        )

    blob = raw[manifest_end + 1 :]
    offset = 0

    def take(n_values: int) -> np.ndarray:
        nonlocal offset
        n_bytes = n_values * 8
        if offset + n_bytes > len(blob):
            raise CheckpointCorruptError(f"{path}: payload truncated")
        arr = np.frombuffer(blob[offset : offset + n_bytes], dtype="<f8").astype(np.float64)
        offset += n_bytes
        return arr

    params: dict[str, ParamVector] = {}
    adam: dict[str, AdamState] = {}
    for entry in manifest["order"]:
        tag, name = entry.split(":", 1)
        if tag == "param":
            layout = _layout_from_json(manifest["params"][name])
            n = sum(int(np.prod(s)) for _, s in layout)
            params[name] = ParamVector(layout, take(n))
        else:
            spec = manifest["adam"][name]
            layout = _layout_from_json(spec["layout"])
            n = sum(int(np.prod(s)) for _, s in layout)
            adam[name] = AdamState(
                first_moment=ParamVector(layout, take(n)),
                second_moment=ParamVector(layout, take(n)),
                step_count=spec["step_count"],
                lr=spec["lr"],
                beta1=spec["beta1"],
                beta2=spec["beta2"],
                eps=spec["eps"],
            )
    if offset != len(blob):
        raise CheckpointCorruptError(f"{path}: trailing bytes after payload")
    return params, adam, manifest.get("rng"), manifest.get("meta", {})


def check_layouts(params: dict[str, ParamVector], expected: dict[str, tuple], path=""):
    """Raise CheckpointLayoutError unless every expected block matches."""
    for name, layout in expected.items():
        if name not in params:
            raise CheckpointLayoutError(f"{path}: missing parameter set {name!r}")
        if params[name].layout != tuple(layout):
            raise CheckpointLayoutError(f"{path}: layout mismatch for {name!r}")


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(getattr(np.random, state["bit_generator"])())
    gen.bit_generator.state = state
    return gen
