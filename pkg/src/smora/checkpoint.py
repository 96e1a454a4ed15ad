"""Checkpoint container: one JSON manifest followed by raw float64 blocks.

Layout: 8-byte magic, little-endian uint64 manifest length, manifest JSON
(UTF-8, canonical key order), then each tensor's C-order little-endian float64
bytes in manifest order. Round trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .adapter import LoraParams, SmoraLayer
from .baselines import HydraParams, MoeLoraParams, MosloraParams
from .routing import RouterParams

MAGIC = b"SMORACK1"
FORMAT_VERSION = 1

__all__ = [
    "save_container",
    "load_container",
    "save_adapter",
    "load_adapter",
    "save_model",
    "load_model",
]


def save_container(path, meta: dict, tensors: dict) -> None:
    manifest = dict(meta)
    manifest["version"] = FORMAT_VERSION
    manifest["dtype"] = "float64"
    manifest["tensors"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()
    ]
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes())


def load_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint container")
        size = int.from_bytes(fh.read(8), "little")
        manifest = json.loads(fh.read(size).decode("utf-8"))
        tensors = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 8)
            if len(payload) != count * 8:
                raise ValueError(f"truncated payload for tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after declared tensors")
    return manifest, tensors


# --- adapter-level (de)serialization -------------------------------------------


def _pack(obj, w0) -> tuple[str, dict, dict]:
    if isinstance(obj, SmoraLayer):
        hyper = {
            "k": obj.k,
            "scaling": obj.lora.scaling,
            "update_rate": obj.router.update_rate,
            "bias_in_weights": obj.bias_in_weights,
        }
        tensors = {
            "w0": obj.w0,
            "a": obj.lora.a,
            "b": obj.lora.b,
            "w_g": obj.router.w_g,
            "bias": obj.router.bias,
        }
        return "smora", hyper, tensors
    if isinstance(obj, LoraParams):
        return "lora", {"scaling": obj.scaling}, {"w0": w0, "a": obj.a, "b": obj.b}
    if isinstance(obj, MoeLoraParams):
        hyper = {
            "mode": obj.mode,
            "top_m": obj.top_m,
            "temperature": obj.temperature,
            "scaling": obj.experts[0].scaling,
            "n": obj.n,
        }
        tensors = {"w0": w0, "router": obj.router}
        for i, e in enumerate(obj.experts):
            tensors[f"expert{i}.a"] = e.a
            tensors[f"expert{i}.b"] = e.b
        return "moe", hyper, tensors
    if isinstance(obj, HydraParams):
        tensors = {"w0": w0, "shared_a": obj.shared_a, "router": obj.router}
        for i, b in enumerate(obj.bs):
            tensors[f"b{i}"] = b
        return "hydra", {"n": len(obj.bs)}, tensors
    if isinstance(obj, MosloraParams):
        return (
            "moslora",
            {"scaling": obj.lora.scaling},
            {"w0": w0, "a": obj.lora.a, "b": obj.lora.b, "mixer": obj.mixer},
        )
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def save_adapter(path, obj, w0=None, seed: int = 0, kind: str | None = None) -> None:
    """Write one adapter (+ its frozen base) to a container file.

    ``kind`` overrides the stored kind tag, e.g. "smear" for a parameter-merge
    adapter that shares the expert-mixture layout.
    """
    default_kind, hyper, tensors = _pack(obj, w0)
    meta = {"kind": kind or default_kind, "seed": seed, "hyper": hyper}
    if tensors.get("w0") is None:
        tensors.pop("w0", None)
        meta["hyper"]["has_w0"] = False
    save_container(path, meta, tensors)


def load_adapter(path):
    """Returns (adapter_object, w0_or_None, manifest)."""
    manifest, tensors = load_container(path)
    kind = manifest["kind"]
    hyper = manifest["hyper"]
    w0 = tensors.get("w0")
    if kind == "smora":
        layer = SmoraLayer(
            w0=tensors["w0"],
            lora=LoraParams(a=tensors["a"], b=tensors["b"], scaling=hyper["scaling"]),
            router=RouterParams(
                w_g=tensors["w_g"], bias=tensors["bias"], update_rate=hyper["update_rate"]
            ),
            k=hyper["k"],
            bias_in_weights=hyper["bias_in_weights"],
        )
        return layer, tensors["w0"], manifest
    if kind == "lora":
        return LoraParams(a=tensors["a"], b=tensors["b"], scaling=hyper["scaling"]), w0, manifest
    if kind in ("moe", "smear"):
        experts = [
            LoraParams(
                a=tensors[f"expert{i}.a"], b=tensors[f"expert{i}.b"], scaling=hyper["scaling"]
            )
            for i in range(hyper["n"])
        ]
        p = MoeLoraParams(
            experts=experts,
            router=tensors["router"],
            mode=hyper["mode"],
            top_m=hyper["top_m"],
            temperature=hyper["temperature"],
        )
        return p, w0, manifest
    if kind == "hydra":
        p = HydraParams(
            shared_a=tensors["shared_a"],
            bs=[tensors[f"b{i}"] for i in range(hyper["n"])],
            router=tensors["router"],
        )
        return p, w0, manifest
    if kind == "moslora":
        p = MosloraParams(
            lora=LoraParams(a=tensors["a"], b=tensors["b"], scaling=hyper["scaling"]),
            mixer=tensors["mixer"],
        )
        return p, w0, manifest
    raise ValueError(f"unknown checkpoint kind {kind!r}")


# --- trained-model (de)serialization ----------------------------------------------


def save_model(path, model, train_config, seed: int = 0) -> None:
    from .training import LoraUnit, MoeUnit, SmoraUnit  # local import, no cycle

    tensors: dict = {}
    unit_meta = []
    for i, unit in enumerate(model.units):
        pre = f"unit{i}."
        if isinstance(unit, LoraUnit):
            tensors[pre + "w0"] = unit.w0
            tensors[pre + "a"] = unit.lora.a
            tensors[pre + "b"] = unit.lora.b
            unit_meta.append({"kind": "lora", "scaling": unit.lora.scaling})
        elif isinstance(unit, SmoraUnit):
            lyr = unit.layer
            tensors[pre + "w0"] = lyr.w0
            tensors[pre + "a"] = lyr.lora.a
            tensors[pre + "b"] = lyr.lora.b
            tensors[pre + "w_g"] = lyr.router.w_g
            tensors[pre + "bias"] = lyr.router.bias
            unit_meta.append(
                {
                    "kind": "smora",
                    "k": lyr.k,
                    "scaling": lyr.lora.scaling,
                    "update_rate": lyr.router.update_rate,
                    "bias_in_weights": lyr.bias_in_weights,
                }
            )
        elif isinstance(unit, MoeUnit):
            tensors[pre + "w0"] = unit.w0
            tensors[pre + "a_stack"] = unit.a_stack
            tensors[pre + "b_stack"] = unit.b_stack
            tensors[pre + "router"] = unit.router
            tensors[pre + "bias"] = unit.bias
            unit_meta.append(
                {
                    "kind": unit.kind,
                    "mode": unit.mode,
                    "top_m": unit.top_m,
                    "scaling": unit.scaling,
                    "update_rate": unit.update_rate,
                }
            )
        else:
            raise TypeError(f"cannot checkpoint unit {type(unit).__name__}")
    meta = {
        "kind": "model",
        "seed": seed,
        "hyper": {"arch": model.arch, "units": unit_meta, "train_config": asdict(train_config)},
    }
    save_container(path, meta, tensors)


def load_model(path):
    from .training import LoraUnit, Model, MoeUnit, SmoraUnit

    manifest, tensors = load_container(path)
    if manifest["kind"] != "model":
        raise ValueError(f"expected a trained-model checkpoint, got {manifest['kind']!r}")
    hyper = manifest["hyper"]
    units = []
    for i, um in enumerate(hyper["units"]):
        pre = f"unit{i}."
        if um["kind"] == "lora":
            units.append(
                LoraUnit(
                    tensors[pre + "w0"],
                    LoraParams(a=tensors[pre + "a"], b=tensors[pre + "b"], scaling=um["scaling"]),
                )
            )
        elif um["kind"] == "smora":
            layer = SmoraLayer(
                w0=tensors[pre + "w0"],
                lora=LoraParams(
                    a=tensors[pre + "a"], b=tensors[pre + "b"], scaling=um["scaling"]
                ),
                router=RouterParams(
                    w_g=tensors[pre + "w_g"],
                    bias=tensors[pre + "bias"],
                    update_rate=um["update_rate"],
                ),
                k=um["k"],
                bias_in_weights=um["bias_in_weights"],
            )
            units.append(SmoraUnit(layer))
        else:
            units.append(
                MoeUnit(
                    tensors[pre + "w0"],
                    tensors[pre + "a_stack"],
                    tensors[pre + "b_stack"],
                    tensors[pre + "router"],
                    tensors[pre + "bias"],
                    um["mode"],
                    um["top_m"],
                    um["scaling"],
                    um["update_rate"],
                )
            )
    return Model(units, arch=hyper["arch"]), manifest
