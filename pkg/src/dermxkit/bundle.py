"""Deterministic ``.npz`` containers used for dataset and label bundles.

A bundle is a zip archive readable by :func:`numpy.load`. It holds one
``__meta__`` member (UTF-8 JSON stored as a uint8 array) plus any number of
named arrays. Members are written in sorted order with a fixed timestamp so
identical content always produces identical bytes.
"""

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from .errors import SchemaError

META_KEY = "__meta__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(meta, arrays):
    """sha256 over canonical metadata and every array's dtype, shape and bytes."""
    h = hashlib.sha256()
    h.update(canonical_json(meta).encode())
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bundle(path, meta, arrays):
    """Write ``meta`` and ``arrays`` to ``path`` atomically. Returns the content hash."""
    meta = dict(meta)
    meta.pop("content_hash", None)
    digest = content_hash(meta, arrays)
    meta["content_hash"] = digest

    buf = io.BytesIO()
    members = {META_KEY: np.frombuffer(canonical_json(meta).encode(), dtype=np.uint8)}
    members.update(arrays)
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for key in sorted(members):
            npy = io.BytesIO()
            np.lib.format.write_array(npy, np.ascontiguousarray(members[key]), allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, npy.getvalue())
    atomic_write_bytes(path, buf.getvalue())
    return digest


def open_bundle(path, kind=None):
    """Open a bundle lazily. Returns ``(meta, npz)``; arrays load on access."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"bundle not found: {path}")
    try:
        npz = np.load(path, allow_pickle=False)
    except (zipfile.BadZipFile, ValueError, OSError) as exc:
        raise SchemaError(f"{path}: not a bundle ({exc})") from exc
    if META_KEY not in npz.files:
        raise SchemaError(f"{path}: missing {META_KEY} member")
    meta = json.loads(npz[META_KEY].tobytes().decode())
    if kind is not None and meta.get("kind") != kind:
        raise SchemaError(f"{path}: expected a {kind!r} bundle, found {meta.get('kind')!r}")
    return meta, npz
