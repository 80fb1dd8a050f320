"""Content-addressed store of solver results as .npz files."""
from __future__ import annotations

import logging
import os
import tempfile
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CACHE_ENV = "METASTABLE_HOPFIELD_CACHE"


class NpzCache:
    """``get(key)`` / ``put(key, arrays)`` keyed by a hex digest.

    Writes go to a temporary file that is renamed into place, so a crashed
    writer never leaves a half-written entry under the final name. Entries
    that fail to load are deleted and treated as misses.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.npz"

    def get(self, key: str):
        path = self._path(key)
        if not path.exists():
            self.misses += 1
            return None
        try:
            with np.load(path, allow_pickle=False) as data:
                out = {k: data[k] for k in data.files}
        except Exception as exc:  # corrupt entry: drop it and recompute
            log.warning("discarding corrupt cache entry %s (%s)", path.name, exc)
            path.unlink(missing_ok=True)
            self.misses += 1
            return None
        self.hits += 1
        log.info("cache hit %s", key[:12])
        return out

    def put(self, key: str, arrays: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        try:
            with open(tmp, "wb") as fh:
                np.savez(fh, **{k: np.asarray(v) for k, v in arrays.items()})
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


def default_cache_dir():
    return os.environ.get(CACHE_ENV) or None
