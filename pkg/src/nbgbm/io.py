"""Delimited-matrix and manifest I/O used by the command line tools.

Matrices are plain text, comma or tab delimited (auto-detected on read),
with an optional header row; reals are serialized with 17 significant
digits so a write/read round trip is exact.  Structured outputs (manifests,
Wald tables, evaluation reports) are JSON.
"""

from __future__ import annotations

import hashlib
import json
import os
import time

import numpy as np

from .exceptions import InputError

FLOAT_FMT = "%.17g"


def read_matrix(path, allow_empty=False) -> np.ndarray:
    """Read a delimited numeric matrix, detecting delimiter and header."""
    with open(path, "r") as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln]
    if not lines:
        if allow_empty:
            return np.zeros((0, 0))
        raise InputError(f"{path}: empty matrix file")
    delim = "\t" if "\t" in lines[0] else ","
    start = 0
    try:
        [float(tok) for tok in lines[0].split(delim)]
    except ValueError:
        start = 1
    rows = []
    width = None
    for lineno, ln in enumerate(lines[start:], start=start + 1):
        toks = ln.split(delim)
        if width is None:
            width = len(toks)
        elif len(toks) != width:
            raise InputError(f"{path}: line {lineno} has {len(toks)} fields, expected {width}")
        try:
            rows.append([float(tok) for tok in toks])
        except ValueError as err:
            col = next(i for i, tok in enumerate(toks, start=1) if not _is_number(tok))
            raise InputError(f"{path}: line {lineno}, column {col}: {err}") from err
    return np.asarray(rows, dtype=np.float64)


def _is_number(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


def write_matrix(path, mat, header=None):
    """Write a matrix as comma-delimited text at round-trip-exact precision."""
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in mat:
            fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")


def write_vector(path, vec, header=None):
    write_matrix(path, np.asarray(vec, dtype=np.float64).reshape(-1, 1), header=header)


def read_vector(path) -> np.ndarray:
    mat = read_matrix(path)
    if 1 not in mat.shape and mat.ndim == 2 and min(mat.shape) != 1:
        raise InputError(f"{path}: expected a single row or column")
    return mat.ravel()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonify)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)!r}")


def build_manifest(command, config, seed, inputs, wall_time, convergence=None, version="0.1.0"):
    """Run manifest emitted next to every command's outputs."""
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "input_digests": {name: file_digest(path) for name, path in inputs.items()
                          if path and os.path.exists(path)},
        "software_version": version,
        "wall_time_seconds": wall_time,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "convergence": convergence,
    }


PARAM_FILES = ("A", "B", "C", "D", "U", "V", "S", "T", "omega")


def write_params(outdir, params):
    """One delimited file per block plus a combined JSON ledger."""
    os.makedirs(outdir, exist_ok=True)
    combined = {}
    for name, block in params.blocks().items():
        write_matrix(os.path.join(outdir, f"{name}.csv"), block)
        combined[name] = np.atleast_2d(block)
    write_json(os.path.join(outdir, "params.json"), combined)


def read_params(indir):
    """Reconstruct a parameter state from a fit directory."""
    from .model import GbmParams

    def load(name):
        path = os.path.join(indir, f"{name}.csv")
        if not os.path.exists(path):
            raise InputError(f"missing parameter block file {path}")
        return read_matrix(path, allow_empty=name in ("D", "U", "V"))

    blocks = {name: load(name) for name in PARAM_FILES}
    M = blocks["D"].size
    I = blocks["B"].shape[0]
    J = blocks["A"].shape[0]
    return GbmParams(
        A=blocks["A"], B=blocks["B"], C=blocks["C"],
        D=blocks["D"].ravel(),
        U=blocks["U"].reshape(I, M), V=blocks["V"].reshape(J, M),
        S=blocks["S"].ravel(), T=blocks["T"].ravel(),
        omega=float(blocks["omega"].ravel()[0]),
    )
