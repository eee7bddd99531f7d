import numpy as np
import pytest

from helpers import random_scene, unit_rows
from splatembed.errors import ConfigError, FormatError, LabelLookupError
from splatembed.pipeline import encode_scene
from splatembed.providers import synth_embedding
from splatembed.query import (DEFAULT_THRESHOLD, LookupTextEncoder, QueryMode, SyntheticTextEncoder,
                              export_matches_ply, run_query)
from splatembed.scene import load_scene
from splatembed.vecstore import VectorStore, build_store


def _store(rng, n=50, dim=8):
    s = random_scene(rng, n)
    return VectorStore(np.arange(n, dtype=np.int64), unit_rows(rng, n, dim).astype(np.float32),
                       s.means, s.scales, s.rotations, s.opacities, s.colors)


class _Fixed:
    def __init__(self, v):
        self.v = np.asarray(v, float)

    def encode(self, text):
        return self.v


def test_synthetic_encoder_matches_provider():
    np.testing.assert_array_equal(SyntheticTextEncoder(32).encode("chair"), synth_embedding("chair", 32))


def test_lookup_encoder(tmp_path):
    enc = LookupTextEncoder({"red cup": np.array([0.0, 1.0, 0.0]), "lamp": np.array([1.0, 0, 0])})
    enc.save(tmp_path / "l.tsv")
    back = LookupTextEncoder.from_file(tmp_path / "l.tsv")
    np.testing.assert_array_equal(back.encode("red cup"), [0, 1, 0])
    assert back.dim == 3
    with pytest.raises(LabelLookupError):
        back.encode("chair")
    loose = LookupTextEncoder.from_file(tmp_path / "l.tsv", strict=False)
    np.testing.assert_array_equal(loose.encode("chair"), synth_embedding("chair", 3))


def test_lookup_file_errors(tmp_path):
    (tmp_path / "a.tsv").write_text("no tab here\n")
    with pytest.raises(FormatError):
        LookupTextEncoder.from_file(tmp_path / "a.tsv")
    (tmp_path / "b.tsv").write_text("x\t1 2\ny\t1 2 3\n")
    with pytest.raises(FormatError):
        LookupTextEncoder.from_file(tmp_path / "b.tsv")
    (tmp_path / "c.tsv").write_text("x\t1 zz\n")
    with pytest.raises(FormatError):
        LookupTextEncoder.from_file(tmp_path / "c.tsv")


def test_run_query_modes(rng):
    store = _store(rng)
    q = rng.normal(size=8)
    top = run_query(store, "x", QueryMode.topk(5), _Fixed(q))
    assert len(top.matches) == 5
    sims = [m.similarity for m in top.matches]
    assert sims == sorted(sims, reverse=True)
    thr = run_query(store, "x", QueryMode.threshold(0.2), _Fixed(q))
    assert all(m.similarity >= 0.2 for m in thr.matches)
    assert QueryMode.threshold().value == DEFAULT_THRESHOLD
    m = top.matches[0]
    np.testing.assert_array_equal(m.payload["mean"], store.means[m.gaussian_id])
    assert run_query(store, "x", QueryMode.topk(0), _Fixed(q)).matches == []
    assert run_query(VectorStore.empty(8), "x", QueryMode.topk(3), _Fixed(q)).matches == []
    with pytest.raises(ConfigError):
        run_query(store, "x", QueryMode("nearest", 1), _Fixed(q))


def test_export_round_trip(tmp_path, rng):
    store = _store(rng)
    res = run_query(store, "x", QueryMode.topk(7), _Fixed(rng.normal(size=8)))
    export_matches_ply(res, tmp_path / "m.ply")
    back = load_scene(tmp_path / "m.ply")
    rows = res.ids
    np.testing.assert_allclose(back.means, store.means[rows], atol=1e-6)
    np.testing.assert_allclose(back.opacities, store.opacities[rows], atol=1e-6)
    np.testing.assert_allclose(back.colors, store.colors[rows], atol=1e-6)
    empty = run_query(store, "x", QueryMode.topk(0), _Fixed(rng.normal(size=8)))
    export_matches_ply(empty, tmp_path / "e.ply")
    assert len(load_scene(tmp_path / "e.ply")) == 0


def test_fixture_labels_retrieve_their_objects(tmp_path, fixture_small):
    fx = fixture_small
    table = encode_scene(fx.scene, fx.write(tmp_path))
    store = build_store(table, fx.scene)
    enc = SyntheticTextEncoder(fx.dim)
    for j, name in enumerate(fx.labels):
        res = run_query(store, name, QueryMode.threshold(0.9), enc)
        assert len(res.matches) > 0
        assert set(fx.object_of[res.ids].tolist()) == {j}
