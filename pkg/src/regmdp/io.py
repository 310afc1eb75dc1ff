"""File formats: MDP and oracle JSON, trace CSV + JSON sidecar, binary sample buffers.

MDP JSON (``"schema": "regmdp.mdp/1"``)::

    {"schema", "num_states", "num_actions", "gamma",
     "reward": [[r_00, r_01, ...], ...],               # S rows of A entries
     "transition": [[[P_0,0,0, ...], ...], ...]        # dense, A x S x S
                 | {"support_indices": [[[...]]],      # sparse, S x A x k
                    "support_prob": p | [[[...]]]}}    # scalar when uniform

Floats are written with ``repr``, the shortest string that parses back to the
same double, so every round trip is bit-exact.

Buffer files: a 48-byte little-endian header ``<8sIIqqqq`` holding the magic
``b"RMDPBUF\\0"``, format version, a reserved zero, ``|S|``, ``|A|``, ``N`` and
the seed (``-1`` if unknown), followed by three ``<i4`` columns of length
``N``: ``s``, ``a``, ``s'``. A JSON manifest next to it repeats the header and
records the SHA-256 of the data file.
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import RegMDPError
from .mdp import MdpModel, build_mdp, mdp_from_support
from .oracle import OracleSolution
from .sampling import SampleBuffer
from .solvers import SolverTrace

MDP_SCHEMA = "regmdp.mdp/1"
ORACLE_SCHEMA = "regmdp.oracle/1"
TRACE_SCHEMA = "regmdp.trace/1"
BUFFER_SCHEMA = "regmdp.buffer/1"
BUFFER_MAGIC = b"RMDPBUF\x00"
BUFFER_HEADER = struct.Struct("<8sIIqqqq")
TRACE_COLUMNS = ("iter", "q", "lyapunov", "policy_error", "value_error", "fo_residual")


class FormatError(RegMDPError, ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=False, allow_nan=False) + "\n"


def mdp_to_dict(mdp: MdpModel, sparse: bool | None = None) -> dict:
    if sparse is None:
        sparse = mdp.is_sparse
    d = {"schema": MDP_SCHEMA, "num_states": mdp.num_states, "num_actions": mdp.num_actions,
         "gamma": mdp.discount, "reward": mdp.reward.tolist()}
    if sparse:
        if not mdp.is_sparse:
            raise FormatError("model has no sparse representation")
        prob = mdp.support_prob
        uniform = np.all(prob == prob.flat[0])
        d["transition"] = {"support_indices": mdp.support_indices.tolist(),
                           "support_prob": float(prob.flat[0]) if uniform else prob.tolist()}
    else:
        d["transition"] = mdp.transition.tolist()
    return d


def mdp_from_dict(d: dict) -> MdpModel:
    if d.get("schema", MDP_SCHEMA) != MDP_SCHEMA:
        raise FormatError(f"unexpected schema {d.get('schema')!r}")
    try:
        n_s, n_a, gamma = int(d["num_states"]), int(d["num_actions"]), float(d["gamma"])
        reward = np.array(d["reward"], dtype=float)
        tr = d["transition"]
    except KeyError as exc:
        raise FormatError(f"missing field {exc}") from exc
    if isinstance(tr, dict):
        mdp = mdp_from_support(tr["support_indices"], tr["support_prob"], reward, gamma)
    else:
        mdp = build_mdp(np.array(tr, dtype=float), reward, gamma)
    if (mdp.num_states, mdp.num_actions) != (n_s, n_a):
        raise FormatError("declared dimensions do not match the arrays")
    return mdp


def save_mdp(mdp: MdpModel, path, sparse: bool | None = None) -> None:
    atomic_write(path, dumps(mdp_to_dict(mdp, sparse)))


def load_mdp(path) -> MdpModel:
    with open(path, encoding="utf-8") as fh:
        return mdp_from_dict(json.load(fh))


def mdp_digest(mdp: MdpModel) -> str:
    """SHA-256 over the discount, reward and transition bytes."""
    h = hashlib.sha256()
    h.update(struct.pack("<qqd", mdp.num_states, mdp.num_actions, mdp.discount))
    h.update(np.ascontiguousarray(mdp.reward, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mdp.transition, dtype="<f8").tobytes())
    return h.hexdigest()


def mdp_summary(mdp: MdpModel) -> dict:
    nnz = np.count_nonzero(mdp.transition, axis=2)
    return {"num_states": mdp.num_states, "num_actions": mdp.num_actions, "gamma": mdp.discount,
            "reward_mean": float(mdp.reward.mean()), "reward_min": float(mdp.reward.min()),
            "reward_max": float(mdp.reward.max()), "support_min": int(nnz.min()),
            "support_max": int(nnz.max()), "sha256": mdp_digest(mdp)}


def oracle_to_dict(sol: OracleSolution, mdp_sha: str | None = None) -> dict:
    return {"schema": ORACLE_SCHEMA, "mdp_sha256": mdp_sha, "tau": sol.tau, "alpha": sol.alpha,
            "iterations": sol.iterations, "residual": sol.residual,
            "weight": sol.weight.tolist(), "v_star": sol.v_star.tolist(),
            "pi_star": sol.pi_star.tolist(), "u_circ": sol.u_circ.tolist(),
            "u_star": sol.u_star.tolist()}


def oracle_from_dict(d: dict) -> OracleSolution:
    if d.get("schema") != ORACLE_SCHEMA:
        raise FormatError(f"unexpected schema {d.get('schema')!r}")
    arr = {k: np.array(d[k], dtype=float) for k in ("weight", "v_star", "pi_star", "u_circ", "u_star")}
    return OracleSolution(tau=float(d["tau"]), alpha=float(d["alpha"]),
                          iterations=int(d["iterations"]), residual=float(d["residual"]), **arr)


def save_oracle(sol: OracleSolution, path, mdp_sha: str | None = None) -> None:
    atomic_write(path, dumps(oracle_to_dict(sol, mdp_sha)))


def load_oracle(path) -> OracleSolution:
    with open(path, encoding="utf-8") as fh:
        return oracle_from_dict(json.load(fh))


def fmt_float(x) -> str:
    """17 significant digits; empty for a missing value."""
    if x is None:
        return ""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def trace_csv(trace: SolverTrace) -> str:
    out = _io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for rec in trace.records:
        writer.writerow([str(rec.iter)] + [fmt_float(getattr(rec, k)) for k in TRACE_COLUMNS[1:]])
    return out.getvalue()


def trace_sidecar(trace: SolverTrace) -> dict:
    return {"schema": TRACE_SCHEMA, "variant": trace.variant, "config": trace.config.to_dict(),
            "converged": trace.converged, "iterations": trace.iterations,
            "metadata": trace.metadata}


def save_trace(trace: SolverTrace, csv_path) -> Path:
    """Write the CSV and a ``.json`` sidecar with config and seeds; returns the sidecar path."""
    csv_path = Path(csv_path)
    atomic_write(csv_path, trace_csv(trace))
    side = csv_path.with_suffix(".json")
    atomic_write(side, dumps(trace_sidecar(trace)))
    return side


def read_trace_csv(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "iter" else (float(v) if v != "" else None))
                         for k, v in row.items()})
    return rows


def save_buffer(buffer: SampleBuffer, path) -> Path:
    """Write the binary buffer and its ``.manifest.json``; returns the manifest path."""
    path = Path(path)
    n = len(buffer)
    seed = -1 if buffer.seed is None else int(buffer.seed)
    header = BUFFER_HEADER.pack(BUFFER_MAGIC, 1, 0, buffer.num_states, buffer.num_actions, n, seed)
    payload = b"".join([header] + [np.ascontiguousarray(col, dtype="<i4").tobytes()
                                   for col in (buffer.states, buffer.actions, buffer.next_states)])
    atomic_write(path, payload)
    manifest = {"schema": BUFFER_SCHEMA, "data_file": path.name, "num_states": buffer.num_states,
                "num_actions": buffer.num_actions, "n_samples": n, "seed": buffer.seed,
                "dtype": "<i4", "header_bytes": BUFFER_HEADER.size,
                "columns": ["s", "a", "s_next"], "sha256": hashlib.sha256(payload).hexdigest()}
    mpath = path.with_name(path.name + ".manifest.json")
    atomic_write(mpath, dumps(manifest))
    return mpath


def load_buffer(path) -> SampleBuffer:
    raw = Path(path).read_bytes()
    if len(raw) < BUFFER_HEADER.size:
        raise FormatError("buffer file too short")
    magic, version, _, n_s, n_a, n, seed = BUFFER_HEADER.unpack_from(raw)
    if magic != BUFFER_MAGIC or version != 1:
        raise FormatError("not a buffer file")
    if len(raw) != BUFFER_HEADER.size + 12 * n:
        raise FormatError("buffer length does not match header")
    cols = np.frombuffer(raw, dtype="<i4", offset=BUFFER_HEADER.size).reshape(3, n)
    return SampleBuffer(cols[0], cols[1], cols[2], int(n_s), int(n_a), None if seed == -1 else int(seed))
