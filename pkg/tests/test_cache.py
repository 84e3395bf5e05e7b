import csv
from pathlib import Path
from unittest import mock

import numpy as np
import pytest

from interxfer.cache import CACHE_HEADER, CACHE_INDEX, TemplateCache, template_key

CACHE_DIR = "/cache/templates"
KEY = "abc123"


@pytest.fixture()
def cache(fs):
    return TemplateCache(CACHE_DIR)


def index_rows(cache):
    with open(cache.cache_index, "r") as fhandle:
        return list(csv.DictReader(fhandle))


def test_init_creates_directory_and_index(fs):
    cache = TemplateCache(CACHE_DIR)
    assert Path(CACHE_DIR).is_dir()
    assert Path(CACHE_DIR, CACHE_INDEX).exists()
    with open(cache.cache_index, "r") as fhandle:
        assert fhandle.readline().strip() == ",".join(CACHE_HEADER)


def test_get_when_not_in_cache_computes_and_indexes(cache):
    compute = mock.Mock(return_value=np.arange(6.0).reshape(2, 3))
    values = cache.get(KEY, compute)
    assert compute.call_count == 1
    assert np.array_equal(values, np.arange(6.0).reshape(2, 3))
    assert cache.path_for(KEY).exists()
    assert index_rows(cache) == [
        {CACHE_HEADER[0]: str(cache.path_for(KEY)), CACHE_HEADER[1]: KEY}
    ]


def test_get_when_cached_does_not_compute(cache):
    cache.get(KEY, lambda: np.ones((4, 3)))
    compute = mock.Mock()
    values = cache.get(KEY, compute)
    assert compute.call_count == 0
    assert np.array_equal(values, np.ones((4, 3)))
    assert len(index_rows(cache)) == 1


def test_in_cache_index_but_not_on_disk_recomputes(cache):
    cache.add_to_cache_index(KEY, cache.path_for(KEY))
    compute = mock.Mock(return_value=np.zeros((1, 3)))
    cache.get(KEY, compute)
    assert compute.call_count == 1
    assert len(index_rows(cache)) == 1


def test_on_disk_but_not_in_index_recomputes(cache):
    np.save(cache.path_for(KEY), np.zeros((1, 3)))
    compute = mock.Mock(return_value=np.ones((1, 3)))
    values = cache.get(KEY, compute)
    assert compute.call_count == 1
    assert np.array_equal(values, np.ones((1, 3)))


def test_clear_empties_cache(cache):
    cache.get(KEY, lambda: np.ones((2, 3)))
    cache.clear()
    assert not cache.path_for(KEY).exists()
    assert index_rows(cache) == []


def test_template_key_depends_on_every_input():
    points = np.zeros((5, 3))
    base = template_key(b"weights", points, 48)
    assert base == template_key(b"weights", points.copy(), 48)
    assert base != template_key(b"other", points, 48)
    assert base != template_key(b"weights", points + 1e-9, 48)
    assert base != template_key(b"weights", points, 32)
