import multiprocessing as mp
import os

import numpy as np
import pytest

from perfmsfem import cache
from perfmsfem.basis import BasisConfig, compute_cr_basis
from perfmsfem.geometry import O1, DomainSpec, Periodic
from perfmsfem.mesh import build_coarse_mesh, build_fine_mesh


@pytest.fixture(scope="module")
def basis():
    c = build_coarse_mesh(4)
    spec = DomainSpec(0.1, Periodic(O1))
    mesh = build_fine_mesh(c, 9, spec, 3)
    return compute_cr_basis(c, mesh, spec, 0.25, (1.0, 1.0), BasisConfig("advdiff", bubbles="advdiff_bubble"))


def key(alpha=0.25):
    return cache.basis_key("spec", "cfg", 3, alpha, "b", 4, 9)


def test_round_trip_is_bit_exact(tmp_path, basis):
    assert cache.cache_store(tmp_path, key(), basis)
    back = cache.cache_load(tmp_path, key())
    for name in ("dof_ids", "functions", "active", "bubble", "multipliers", "bubble_multipliers"):
        a, b = getattr(basis, name), getattr(back, name)
        assert a.dtype.kind == b.dtype.kind and a.tobytes() == b.tobytes()
    assert back.h == basis.h and back.residual == basis.residual
    assert back.flags == basis.flags and back.config_key == basis.config_key


def test_key_includes_alpha(tmp_path, basis):
    cache.cache_store(tmp_path, key(), basis)
    assert cache.cache_load(tmp_path, key(0.5)) is None
    assert cache.cache_store(tmp_path, key(), basis) is False  # already present


def test_corrupt_record_is_quarantined(tmp_path, basis):
    cache.cache_store(tmp_path, key(), basis)
    path = cache.record_path(tmp_path, key())
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    assert cache.cache_load(tmp_path, key()) is None
    assert not path.exists() and path.with_suffix(".corrupt").exists()
    assert cache.cache_store(tmp_path, key(), basis)  # slot is free again
    assert cache.cache_load(tmp_path, key()) is not None


def test_truncated_record_is_a_miss(tmp_path, basis):
    cache.cache_store(tmp_path, key(), basis)
    path = cache.record_path(tmp_path, key())
    path.write_bytes(path.read_bytes()[:50])
    assert cache.cache_load(tmp_path, key()) is None


def test_record_header_layout():
    arrays = {"x": np.arange(3.0)}
    blob = cache.encode({"k": 1}, arrays)
    assert blob[:4] == b"MSFB"
    assert int.from_bytes(blob[4:6], "little") == cache.VERSION
    back, meta = cache.decode(blob, {"k": 1})
    assert back["x"].tobytes() == np.arange(3.0).astype("<f8").tobytes()
    with pytest.raises(ValueError):
        cache.decode(blob, {"k": 2})


def _writer(args):
    root, seed = args
    arrays = {"v": np.full(20000, 1.5)}
    return cache.store(root, {"race": True}, arrays, {"writer": "same"})


def test_concurrent_writers_single_winner(tmp_path):
    ctx = mp.get_context("spawn" if os.name == "nt" else "fork")
    with ctx.Pool(8) as pool:
        results = pool.map(_writer, [(str(tmp_path), i) for i in range(32)])
    assert sum(results) == 1
    arrays, meta = cache.load(tmp_path, {"race": True})
    assert np.all(arrays["v"] == 1.5) and meta == {"writer": "same"}
    leftovers = [p for p in tmp_path.rglob("*") if p.is_file()]
    assert len(leftovers) == 1


def test_default_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cache.CACHE_ENV, str(tmp_path / "x"))
    assert cache.default_root() == tmp_path / "x"
    monkeypatch.delenv(cache.CACHE_ENV)
    assert cache.default_root() is None
