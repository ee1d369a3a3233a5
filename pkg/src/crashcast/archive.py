"""Directory archives: a JSON manifest plus one flat little-endian float64 file per array.

Layout::

    <dir>/manifest.json
    <dir>/<name>.f64          raw '<f8' values in C order

The manifest records ``format``, ``version``, the null convention (NaN marks a
missing value), and for every array its file name and shape. Anything else a
caller wants to keep goes under ``meta``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "crashcast-archive"
VERSION = 1
NULL_CONVENTION = "nan"


class ArchiveError(ValueError):
    pass


def write_archive(path, arrays, meta=None, kind="generic"):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fname = f"{name}.f64"
        arr.tofile(path / fname)
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "null": NULL_CONVENTION,
        "arrays": entries,
        "meta": meta or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise ArchiveError(f"{path}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise ArchiveError(f"{mpath}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise ArchiveError(f"{mpath}: unsupported version {manifest.get('version')}")
    return manifest


def read_archive(path, kind=None):
    path = Path(path)
    manifest = read_manifest(path)
    if kind is not None and manifest.get("kind") != kind:
        raise ArchiveError(f"{path}: expected a {kind!r} archive, found {manifest.get('kind')!r}")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        shape = tuple(entry["shape"])
        data = np.fromfile(path / entry["file"], dtype="<f8")
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise ArchiveError(f"{path / entry['file']}: expected {shape}, found {data.size} values")
        arrays[name] = data.reshape(shape).astype(np.float64)
    return arrays, manifest["meta"]


def config_hash(obj):
    """Stable short hash of any JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
