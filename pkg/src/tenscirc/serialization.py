"""JSON circuit container with base64-encoded little-endian float64 parameters."""
from __future__ import annotations

import base64
import json

import numpy as np

from .circuit import Circuit, FoldedCircuit, FoldGroup, Layer, Parameter
from .exceptions import FormatError
from .families import family_from_spec

__all__ = ["FORMAT_VERSION", "circuit_to_dict", "circuit_from_dict", "save_circuit", "load_circuit"]

FORMAT_VERSION = 1
_KINDS = ("input", "hadamard", "kronecker", "sum")


def _encode(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(float)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def circuit_to_dict(c) -> dict:
    folded = isinstance(c, FoldedCircuit)
    base = c.circuit if folded else c
    fams = base.input_families()
    out = {
        "format_version": FORMAT_VERSION,
        "d": base.num_vars,
        "families": [fams[v].spec() if v in fams else None for v in range(base.num_vars)],
        "nomenclature": base.meta.get("nomenclature", ""),
        "output": base.output,
        "meta": _jsonable(base.meta),
        "layers": [
            {
                "id": la.id,
                "kind": la.kind,
                "scope": list(la.scope),
                "width": la.width,
                "inputs": list(la.inputs),
                "family": la.family.spec() if la.family is not None else None,
                "param": la.param,
                "diagonal": la.diagonal,
                "block": la.block,
                "role": la.role,
            }
            for la in base.layers
        ],
        "params": {
            name: {"reparam": p.reparam, **_encode(p.value)} for name, p in base.params.items()
        },
    }
    if folded:
        out["fold_groups"] = [
            {"layers": list(g.layers), "routing": g.routing.tolist()} for g in c.groups
        ]
    return out


def circuit_from_dict(obj: dict):
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported circuit format version {version!r} (expected {FORMAT_VERSION})")
    layers = []
    for rec in obj["layers"]:
        if rec["kind"] not in _KINDS:
            raise FormatError(f"unknown layer kind {rec['kind']!r} in layer {rec.get('id')}")
        layers.append(
            Layer(
                id=int(rec["id"]),
                kind=rec["kind"],
                scope=tuple(rec["scope"]),
                width=int(rec["width"]),
                inputs=tuple(rec["inputs"]),
                family=family_from_spec(rec["family"]) if rec.get("family") else None,
                param=rec.get("param"),
                diagonal=bool(rec.get("diagonal", False)),
                block=int(rec.get("block", -1)),
                role=rec.get("role", ""),
            )
        )
    params = {n: Parameter(_decode(p), p["reparam"]) for n, p in obj["params"].items()}
    circuit = Circuit(layers, obj["output"], obj["d"], params, obj.get("meta", {}))
    if "fold_groups" not in obj:
        return circuit
    groups = []
    for g in obj["fold_groups"]:
        ids = tuple(g["layers"])
        first = circuit.layers[ids[0]]
        groups.append(
            FoldGroup(
                kind=first.kind,
                layers=ids,
                width=first.width,
                in_widths=tuple(circuit.layers[j].width for j in first.inputs),
                routing=np.array(g["routing"], dtype=np.intp).reshape(len(ids), len(first.inputs), 2),
                diagonal=first.diagonal,
                family=first.family,
                params=tuple(circuit.layers[i].param for i in ids) if first.param is not None else (),
                variables=np.array([circuit.layers[i].scope[0] for i in ids], dtype=np.intp)
                if first.kind == "input"
                else np.zeros(0, dtype=np.intp),
            )
        )
    return FoldedCircuit(circuit, groups)


def save_circuit(c, path) -> None:
    """Write a circuit (or folded circuit) to a JSON file."""
    with open(path, "w") as fh:
        json.dump(circuit_to_dict(c), fh)


def load_circuit(path):
    """Read a circuit written by :func:`save_circuit`."""
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON circuit file ({exc})") from None
    return circuit_from_dict(obj)
