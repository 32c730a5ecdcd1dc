"""Content-addressed artifact cache for the command-line front end.

A cache entry is keyed by the SHA-256 of the canonical JSON serialization
of (module name, relevant config subset, code version), so any change to
the inputs or to the package version misses cleanly. The payload is a
``.npz`` of named arrays next to a ``.json`` sidecar that stores the full
serialized key; a load compares the stored key against the requested one
and treats any mismatch as a miss, which makes hash collisions harmless
at the cost of one string comparison.

Writes are atomic: both files are written to temporaries in the cache
directory and moved into place with os.replace, so a concurrent reader
never sees a partial entry.
"""

import hashlib
import json
import os
import tempfile
import time

import numpy as np

from . import __version__

__all__ = ["Cache", "cache_key"]


def _canonical(obj):
    """Canonical JSON text of a key object (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def cache_key(module, subset):
    """(digest, canonical key text) for a module name and config subset."""
    key = {"module": module, "config": subset, "code_version": __version__}
    blob = _canonical(key)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest(), blob


class Cache:
    """Directory of npz payloads with JSON key sidecars."""

    def __init__(self, root):
        self.root = str(root)

    def _paths(self, digest):
        return (os.path.join(self.root, digest + ".npz"),
                os.path.join(self.root, digest + ".json"))

    def key(self, module, subset):
        return cache_key(module, subset)[0]

    def load(self, module, subset):
        """Payload dict of arrays, or None on miss or key mismatch."""
        digest, blob = cache_key(module, subset)
        npz_path, json_path = self._paths(digest)
        if not (os.path.exists(npz_path) and os.path.exists(json_path)):
            return None
        try:
            with open(json_path, "r", encoding="utf-8") as fh:
                sidecar = json.load(fh)
        except (OSError, ValueError):
            return None
        if _canonical(sidecar.get("key")) != blob:
            return None
        try:
            with np.load(npz_path) as data:
                return {name: data[name].copy() for name in data.files}
        except (OSError, ValueError):
            return None

    def store(self, module, subset, arrays, meta=None):
        """Atomically write a payload; returns the entry digest."""
        digest, blob = cache_key(module, subset)
        npz_path, json_path = self._paths(digest)
        os.makedirs(self.root, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".npz.tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, **{k: np.asarray(v) for k, v in arrays.items()})
            os.replace(tmp, npz_path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        sidecar = {"key": json.loads(blob), "hash": digest,
                   "created": time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                            time.gmtime()),
                   "payload": os.path.basename(npz_path),
                   "meta": meta or {}}
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".json.tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(sidecar, fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, json_path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return digest
