"""JSON file formats, validated against the schemas shipped in ``schedcert/schemas``."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .model import GnnArch, JobGraph, Mlp, StructureError, TransitionSystem

SCHEMA_VERSION = 1


class InputError(ValueError):
    """A file does not match its format; the message names the offending field."""


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    return json.loads(resources.files("schedcert").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(data, name: str, source: str = "<data>"):
    v = jsonschema.Draft202012Validator(schema(name))
    errors = sorted(v.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise InputError(f"{source}: field '{where}': {e.message}")


def read_json(path, name: str):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from None
    validate(data, name, str(path))
    return data


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def graph_to_json(graph: JobGraph) -> dict:
    return {"schema_version": SCHEMA_VERSION, **graph.to_dict()}


def graph_from_json(data: dict, source: str = "<graph>") -> JobGraph:
    validate(data, "graph", source)
    dims = {len(n["features"]) for n in data["nodes"]}
    if len(dims) != 1:
        raise InputError(f"{source}: field 'nodes': feature vectors have different lengths {sorted(dims)}")
    try:
        return JobGraph.from_dict(data)
    except StructureError as exc:
        raise InputError(f"{source}: {exc}") from None


def load_graph(path) -> JobGraph:
    return graph_from_json(read_json(path, "graph"), str(path))


def save_graph(path, graph: JobGraph):
    write_json(path, graph_to_json(graph))


def mlp_to_json(mlp: Mlp) -> dict:
    return {"layers": [{"in": int(w.shape[1]), "out": int(w.shape[0]), "weights": w.reshape(-1).tolist(),
                        "bias": b.tolist()} for w, b in zip(mlp.weights, mlp.biases)]}


def mlp_from_json(data: dict, where: str) -> Mlp:
    ws, bs = [], []
    for k, layer in enumerate(data["layers"]):
        n_in, n_out = layer["in"], layer["out"]
        if len(layer["weights"]) != n_in * n_out:
            raise InputError(f"{where}/layers/{k}/weights: expected {n_in * n_out} entries, got {len(layer['weights'])}")
        if len(layer["bias"]) != n_out:
            raise InputError(f"{where}/layers/{k}/bias: expected {n_out} entries, got {len(layer['bias'])}")
        ws.append(np.array(layer["weights"], dtype=float).reshape(n_out, n_in))
        bs.append(np.array(layer["bias"], dtype=float))
    try:
        return Mlp(tuple(ws), tuple(bs))
    except StructureError as exc:
        raise InputError(f"{where}: {exc}") from None


def arch_to_json(arch: GnnArch) -> dict:
    return {"schema_version": SCHEMA_VERSION, "alpha": arch.alpha, "f": mlp_to_json(arch.f), "g": mlp_to_json(arch.g),
            "pred": mlp_to_json(arch.pred), "summary": None if arch.summary is None else mlp_to_json(arch.summary)}


def arch_from_json(data: dict, source: str = "<arch>") -> GnnArch:
    validate(data, "arch", source)
    parts = {k: mlp_from_json(data[k], f"{source}: field '{k}'") for k in ("f", "g", "pred")}
    summary = data.get("summary")
    summary = None if summary is None else mlp_from_json(summary, f"{source}: field 'summary'")
    try:
        return GnnArch(parts["f"], parts["g"], parts["pred"], summary, float(data["alpha"]))
    except StructureError as exc:
        raise InputError(f"{source}: {exc}") from None


def load_arch(path) -> GnnArch:
    return arch_from_json(read_json(path, "arch"), str(path))


def save_arch(path, arch: GnnArch):
    write_json(path, arch_to_json(arch))


def load_spec(path) -> dict:
    return read_json(path, "spec")


def load_transitions(path) -> TransitionSystem:
    data = read_json(path, "transitions")
    try:
        return TransitionSystem.from_dict(data)
    except StructureError as exc:
        raise InputError(f"{path}: {exc}") from None


def save_transitions(path, system: TransitionSystem):
    write_json(path, {"schema_version": SCHEMA_VERSION, **system.to_dict()})
