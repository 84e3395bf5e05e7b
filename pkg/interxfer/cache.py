"""On-disk cache for template images of target lattices.

Mapping every point of a resolution^3 lattice through the deformation
decoder is the most expensive step of a transfer, and repeated transfers to
the same target with the same checkpoint produce the same images.
`TemplateCache` keeps those arrays as `.npy` files in a cache directory and
records each one in a CSV index.  When a caller asks for a key, the cache
returns the stored array if the key is in the index *and* the file is on
disk; otherwise it computes the array, stores it, and indexes it.
"""

import csv
import hashlib
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CACHE_INDEX = "cache_index.csv"
CACHE_HEADER = ["cache_path", "key"]


def template_key(checkpoint_bytes, target_points, resolution, extra=""):
    """SHA-256 key of a checkpoint, a target cloud and a lattice resolution."""
    digest = hashlib.sha256()
    digest.update(checkpoint_bytes)
    digest.update(np.ascontiguousarray(target_points, dtype="<f8").tobytes())
    digest.update(str(int(resolution)).encode())
    digest.update(extra.encode())
    return digest.hexdigest()


class TemplateCache:
    """Cache template-image arrays by key."""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self.cache_index = Path(self.cache_dir, CACHE_INDEX)
        self.setup_cache()

    def get(self, key, compute):
        """Return the array stored under `key`, calling `compute()` as needed."""
        cache_path = self.path_for(key)
        if cache_path.exists() and self.check_if_in_cache(key):
            logger.debug("template cache hit %s", key[:12])
            return np.load(cache_path)

        logger.debug("template cache miss %s", key[:12])
        values = np.asarray(compute(), dtype=float)
        np.save(cache_path, values)
        if not self.check_if_in_cache(key):
            self.add_to_cache_index(key, cache_path)
        return values

    def path_for(self, key):
        return Path(self.cache_dir, f"{key}.npy")

    def clear(self):
        """Clear the cache, deleting stored arrays."""
        for filename in self.cache_dir.iterdir():
            filename.unlink()
        self.setup_cache()

    def setup_cache(self):
        """Creates the cache directory and an index if they don't exist"""
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        if not self.cache_index.exists():
            with open(self.cache_index, "w", newline="") as fhandle:
                writer = csv.DictWriter(fhandle, fieldnames=CACHE_HEADER)
                writer.writeheader()

    def check_if_in_cache(self, key):
        """Checks if a key is in the cache index"""
        with open(self.cache_index, "r", newline="") as fhandle:
            reader = csv.DictReader(fhandle)
            return any(row[CACHE_HEADER[1]] == key for row in reader)

    def add_to_cache_index(self, key, cache_path):
        """Adds an array to the cache index"""
        with open(self.cache_index, "a", newline="") as fhandle:
            writer = csv.DictWriter(fhandle, fieldnames=CACHE_HEADER)
            writer.writerow({CACHE_HEADER[0]: str(cache_path), CACHE_HEADER[1]: key})
