"""On-disk cache of basis functions and reference fields.

One file per key. Record layout (little endian)::

    magic  b"MSFB"        4 bytes
    version               u16, reserved u16
    key digest            32 bytes (sha256 of the canonical key JSON)
    meta length           u32, followed by UTF-8 JSON metadata
    array payload         raw little-endian arrays in the order listed in meta
    checksum              32 bytes, sha256 of everything above

Writers publish with ``os.link`` from a private temp file, so concurrent
writers of one key produce exactly one complete record. Unreadable records
are renamed to ``*.corrupt`` and reported as a miss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"MSFB"
VERSION = 1
CACHE_ENV = "MSFEM_CACHE_DIR"
_HEAD = struct.Struct("<4sHH32sI")


def default_root() -> Path | None:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def key_digest(key: dict) -> bytes:
    text = json.dumps(key, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


def record_path(root, key: dict) -> Path:
    hexkey = key_digest(key).hex()
    return Path(root) / hexkey[:2] / f"{hexkey}.bin"


def encode(key: dict, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    layout = []
    payload = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "b":
            arr = arr.astype("<u1")
            kind = "bool"
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
            kind = "int64"
        else:
            arr = arr.astype("<f8")
            kind = "float64"
        layout.append({"name": name, "dtype": kind, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr).tobytes())
    header_meta = {"key": key, "arrays": layout, "meta": meta or {}}
    mbytes = json.dumps(header_meta, sort_keys=True, separators=(",", ":")).encode()
    body = _HEAD.pack(MAGIC, VERSION, 0, key_digest(key), len(mbytes)) + mbytes + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes, key: dict | None = None):
    """Inverse of :func:`encode`; raises ``ValueError`` on any inconsistency."""
    if len(blob) < _HEAD.size + 32:
        raise ValueError("record truncated")
    body, check = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != check:
        raise ValueError("checksum mismatch")
    magic, version, _, digest, mlen = _HEAD.unpack_from(body)
    if magic != MAGIC or version != VERSION:
        raise ValueError("bad magic or version")
    if key is not None and digest != key_digest(key):
        raise ValueError("key digest mismatch")
    off = _HEAD.size
    header = json.loads(body[off:off + mlen])
    off += mlen
    arrays = {}
    for spec in header["arrays"]:
        dt = {"float64": "<f8", "int64": "<i8", "bool": "<u1"}[spec["dtype"]]
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * 8 if dt != "<u1" else count
        arr = np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(spec["shape"]).copy()
        if spec["dtype"] == "bool":
            arr = arr.astype(bool)
        arrays[spec["name"]] = arr
        off += nbytes
    if off != len(body):
        raise ValueError("payload length mismatch")
    return arrays, header["meta"]


def store(root, key: dict, arrays: dict[str, np.ndarray], meta: dict | None = None) -> bool:
    """Publish a record; returns False when another writer already did."""
    path = record_path(root, key)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        return False
    blob = encode(key, arrays, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".bin")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        try:
            os.link(tmp, path)
            return True
        except FileExistsError:
            return False
    finally:
        os.unlink(tmp)


def load(root, key: dict):
    """Return ``(arrays, meta)`` or ``None`` on a miss or a quarantined record."""
    path = record_path(root, key)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        return None
    try:
        return decode(blob, key)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        bad = path.with_suffix(".corrupt")
        log.warning("quarantining corrupt cache record %s: %s", path, exc)
        try:
            os.replace(path, bad)
        except FileNotFoundError:
            pass
        return None


# ---------------------------------------------------------------------------
# LocalBasis records


def basis_key(spec_key: str, cfg_key: str, m: int, alpha, b_descriptor: str, N: int, t: int) -> dict:
    return {"kind": "basis", "domain": spec_key, "cfg": cfg_key, "m": int(m),
            "alpha": repr(float(alpha)), "b": b_descriptor, "N": int(N), "t": int(t),
            "format": VERSION}


def basis_to_record(basis):
    arrays = {"dof_ids": basis.dof_ids, "functions": basis.functions, "active": basis.active}
    for name in ("bubble", "multipliers", "bubble_multipliers"):
        val = getattr(basis, name)
        if val is not None:
            arrays[name] = val
    meta = {"parent": int(basis.parent), "family": basis.family, "edge_operator": basis.edge_operator,
            "bubble_operator": basis.bubble_operator, "h": float(basis.h).hex(),
            "residual": float(basis.residual).hex(), "flags": list(basis.flags),
            "config_key": basis.config_key}
    return arrays, meta


def basis_from_record(arrays, meta):
    from .basis import LocalBasis
    return LocalBasis(meta["parent"], meta["family"], arrays["dof_ids"], arrays["functions"],
                      arrays["active"], meta["edge_operator"], arrays.get("bubble"),
                      meta["bubble_operator"], arrays.get("multipliers"),
                      arrays.get("bubble_multipliers"), float.fromhex(meta["h"]),
                      float.fromhex(meta["residual"]), tuple(meta["flags"]), meta["config_key"])


def cache_store(root, key: dict, basis) -> bool:
    arrays, meta = basis_to_record(basis)
    return store(root, key, arrays, meta)


def cache_load(root, key: dict):
    rec = load(root, key)
    if rec is None:
        return None
    return basis_from_record(*rec)
