import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from ambientcyclegan.clb import ClbParams, Normalization, calibrate_normalization, render, sample_clb
from ambientcyclegan.dataio import (
    BatchStream,
    DatasetManifest,
    ingest_directory,
    read_array,
    save_image,
    simulate_measurements,
    stream_batches,
    synthesize_corpus,
    write_array,
    write_corpus,
)
from ambientcyclegan.errors import DataError, ParameterDomainError
from ambientcyclegan.measurement import MeasurementConfig

P16 = ClbParams.preset("opex").scaled_to((16, 16))


def tree_digest(root):
    """Digest of every image file plus the manifest minus its directory-derived name."""
    h = hashlib.sha256()
    for p in sorted((root / "images").iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    doc = json.loads((root / "manifest.json").read_text())
    doc.pop("name")
    h.update(json.dumps(doc, sort_keys=True).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- container


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20),
                  elements=st.floats(-1e6, 1e6, width=32, allow_nan=False)))
@settings(max_examples=40, deadline=None)
def test_container_roundtrip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("c") / "a.f32"
    write_array(path, arr)
    back = read_array(path)
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_container_header_layout(tmp_path):
    write_array(tmp_path / "a.f32", np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = (tmp_path / "a.f32").read_bytes()
    assert struct.unpack("<4sIII", raw[:16]) == (b"ACGF", 1, 2, 3)
    assert len(raw) == 16 + 6 * 4
    assert np.frombuffer(raw[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_container_rejects_bad_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world, not an image")
    with pytest.raises(DataError):
        read_array(tmp_path / "junk")
    write_array(tmp_path / "a.f32", np.zeros((2, 2)))
    raw = (tmp_path / "a.f32").read_bytes()
    (tmp_path / "short.f32").write_bytes(raw[:-2])
    with pytest.raises(DataError):
        read_array(tmp_path / "short.f32")
    with pytest.raises(DataError):
        read_array(tmp_path / "missing.f32")
    with pytest.raises(ParameterDomainError):
        write_array(tmp_path / "b.f32", np.zeros(3))


def test_save_image_sidecar(tmp_path):
    save_image(tmp_path / "img.f32", np.ones((4, 4)), {"scale": 2.0, "offset": -1.0})
    assert json.loads((tmp_path / "img.json").read_text()) == {"scale": 2.0, "offset": -1.0}
    assert np.array_equal(read_array(tmp_path / "img.f32"), np.ones((4, 4), np.float32))


# ---------------------------------------------------------------- synthesis


def test_single_clean_image(tmp_path):
    m = synthesize_corpus(P16, 1, 0, tmp_path / "c")
    assert m.count == 1 and m.domain_tag == "X" and len(list((tmp_path / "c" / "images").iterdir())) == 1
    img = m.load_array()[0]
    norm = calibrate_normalization(P16)
    assert np.array_equal(img, norm.apply(render(sample_clb(P16, 0))).astype(np.float32))
    reloaded = DatasetManifest.load(tmp_path / "c" / "manifest.json")
    assert reloaded.to_dict() == m.to_dict()


def test_synthesis_byte_identical(tmp_path):
    mc = MeasurementConfig()
    synthesize_corpus(P16, 4, 7, tmp_path / "a", measurement=mc)
    synthesize_corpus(P16, 4, 7, tmp_path / "b", measurement=mc)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_measured_corpus_is_y_and_noisy(tmp_path):
    clean = synthesize_corpus(P16, 3, 5, tmp_path / "x")
    noisy = synthesize_corpus(P16, 3, 5, tmp_path / "y", measurement=MeasurementConfig())
    assert noisy.domain_tag == "Y"
    assert noisy.provenance["measurement"]["noise_std"] == 0.04
    d = noisy.load_array() - clean.load_array()
    assert 0.02 < d.std() < 0.06
    assert [e["seed"] for e in noisy.entries] == [5, 6, 7]


def test_synthesis_validation_and_overwrite(tmp_path):
    with pytest.raises(ParameterDomainError):
        synthesize_corpus(P16, 0, 0, tmp_path / "z")
    synthesize_corpus(P16, 1, 0, tmp_path / "c")
    with pytest.raises(DataError):
        synthesize_corpus(P16, 1, 0, tmp_path / "c")
    synthesize_corpus(P16, 2, 0, tmp_path / "c", overwrite=True)
    assert DatasetManifest.load(tmp_path / "c").count == 2


def test_failed_write_leaves_no_partial(tmp_path, monkeypatch):
    import ambientcyclegan.dataio as dio

    calls = {"n": 0}
    real = dio.write_array

    def flaky(path, arr):
        calls["n"] += 1
        if calls["n"] == 2:
            raise OSError("disk full")
        real(path, arr)

    monkeypatch.setattr(dio, "write_array", flaky)
    with pytest.raises(OSError):
        synthesize_corpus(P16, 3, 0, tmp_path / "c")
    assert list(tmp_path.iterdir()) == []


def test_simulate_measurements_zero_std_copies(tmp_path):
    clean = synthesize_corpus(P16, 3, 0, tmp_path / "x")
    copy = simulate_measurements(clean, MeasurementConfig(noise_std=0.0), tmp_path / "y")
    assert copy.count == clean.count and copy.domain_tag == "Y"
    assert np.array_equal(copy.load_array(), clean.load_array())


def test_simulate_matches_direct_synthesis(tmp_path):
    # measuring a clean corpus reproduces a corpus synthesized with the measurement
    clean = synthesize_corpus(P16, 3, 9, tmp_path / "x")
    a = simulate_measurements(clean, MeasurementConfig(), tmp_path / "y1")
    b = synthesize_corpus(P16, 3, 9, tmp_path / "y2", measurement=MeasurementConfig())
    assert np.array_equal(a.load_array(), b.load_array())


def test_write_corpus(tmp_path):
    imgs = np.random.default_rng(0).uniform(-1, 1, (5, 8, 6)).astype(np.float32)
    m = write_corpus(imgs, tmp_path / "g", "Y", {"scale": 1.0, "offset": 0.0}, {"source": "test"})
    assert m.image_size == (8, 6) and np.array_equal(m.load_array(), imgs)
    with pytest.raises(DataError):
        write_corpus(imgs[0], tmp_path / "h", "Y", {}, {})


def test_manifest_invariants(tmp_path):
    with pytest.raises(DataError):
        DatasetManifest("n", "Z", [], (4, 4), {}, 0)
    with pytest.raises(DataError):
        DatasetManifest("n", "X", [{"path": "a"}], (4, 4), {}, 2)
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path)


def test_manifest_detects_size_mismatch(tmp_path):
    m = synthesize_corpus(P16, 2, 0, tmp_path / "c")
    write_array(m.image_path(1), np.zeros((4, 4)))
    with pytest.raises(DataError):
        m.load_array()


# ---------------------------------------------------------------- ingestion


def _write_png(path, arr, mode="L"):
    Image.fromarray(arr, mode=mode).save(path)


def test_ingest_resizes_mixed_sizes(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i, shape in enumerate([(40, 30), (64, 64), (17, 90)]):
        _write_png(src / f"im{i}.png", rng.integers(0, 255, shape, dtype=np.uint8))
    rgb = rng.integers(0, 255, (20, 20, 3), dtype=np.uint8)
    Image.fromarray(rgb, "RGB").save(src / "rgb.png")
    m = ingest_directory(src, (32, 32), tmp_path / "out")
    assert m.count == 4 and m.domain_tag == "Y"
    arr = m.load_array()
    assert arr.shape == (4, 32, 32) and arr.dtype == np.float32
    assert arr.min() >= -1 and arr.max() <= 1
    assert sorted(e["source_id"] for e in m.entries) == ["im0.png", "im1.png", "im2.png", "rgb.png"]


def test_ingest_at_target_size_unchanged_up_to_normalization(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    img = np.random.default_rng(1).uniform(0, 1000, (256, 256)).astype(np.float32)
    Image.fromarray(img, mode="F").save(src / "a.tiff")
    m = ingest_directory(src, (256, 256), tmp_path / "out", normalization="minmax")
    norm = Normalization.from_dict(m.normalization)
    assert np.allclose(m.load_array()[0], norm.apply(img.astype(np.float64)), atol=1e-6)
    lo, hi = img.min(), img.max()
    assert np.isclose(norm.scale, 2 / (hi - lo))


def test_ingest_percentile_policy(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    img = np.random.default_rng(2).uniform(0, 1, (64, 64)).astype(np.float32)
    img[0, 0] = 1e6  # saturated outlier must not drive the scale
    Image.fromarray(img, mode="F").save(src / "a.tiff")
    m = ingest_directory(src, (64, 64), tmp_path / "out")
    lo, hi = np.percentile(img.astype(np.float64), [0.5, 99.5])
    assert np.isclose(m.normalization["scale"], 2 / (hi - lo))
    assert m.normalization["policy"] == "percentile"


def test_ingest_skips_and_counts_undecodable(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    for i in range(10):
        _write_png(src / f"im{i}.png", np.full((8, 8), i * 10, np.uint8))
    (src / "notes.txt").write_text("not an image")
    m = ingest_directory(src, (8, 8), tmp_path / "out")
    assert m.count == 10 and m.skipped == ["notes.txt"]


def test_ingest_errors(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        ingest_directory(tmp_path / "empty", (8, 8), tmp_path / "o1")
    bad = tmp_path / "bad"
    bad.mkdir()
    _write_png(bad / "a.png", np.zeros((8, 8), np.uint8))
    for i in range(3):
        (bad / f"x{i}.bin").write_bytes(b"\0\1\2")
    with pytest.raises(DataError):
        ingest_directory(bad, (8, 8), tmp_path / "o2")
    with pytest.raises(DataError):
        ingest_directory(tmp_path / "nope", (8, 8), tmp_path / "o3")


def test_ingest_paper_corpus_count(tmp_path):
    # the mammogram set size; images kept tiny so the test is about the bookkeeping
    src = tmp_path / "src"
    src.mkdir()
    tile = np.arange(16, dtype=np.uint8).reshape(4, 4)
    buf = src / "proto.png"
    _write_png(buf, tile)
    data = buf.read_bytes()
    buf.unlink()
    for i in range(13190):
        (src / f"m{i:05d}.png").write_bytes(data)
    m = ingest_directory(src, (4, 4), tmp_path / "out", normalization="none")
    assert m.count == 13190


# ---------------------------------------------------------------- batching


def _manifest(n, root):
    return write_corpus(np.zeros((n, 4, 4), np.float32) + np.arange(n)[:, None, None], root, "X", {}, {})


def test_batches_per_epoch_and_drop_last(tmp_path):
    m = _manifest(100, tmp_path / "a")
    b = BatchStream(m, 10, shuffle_seed=3)
    batches = list(stream_batches(b))
    assert len(batches) == 10 and all(x.shape == (10, 4, 4) for x in batches)
    m2 = _manifest(25, tmp_path / "b")
    batches = list(stream_batches(BatchStream(m2, 10, 0)))
    assert len(batches) == 2
    seen = np.concatenate([x[:, 0, 0] for x in batches])
    assert len(set(seen.tolist())) == 20


def test_batch_order_deterministic_and_epoch_dependent(tmp_path):
    m = _manifest(100, tmp_path / "a")
    p0 = BatchStream(m, 10, 3, epoch=0).permutation()
    assert np.array_equal(p0, BatchStream(m, 10, 3, epoch=0).permutation())
    assert not np.array_equal(p0, BatchStream(m, 10, 3, epoch=1).permutation())
    assert sorted(p0.tolist()) == list(range(100))


def test_x_and_y_streams_unpaired(tmp_path):
    m = _manifest(100, tmp_path / "a")
    px = BatchStream(m, 10, 3, stream_key=0).permutation()
    py = BatchStream(m, 10, 3, stream_key=1).permutation()
    assert not np.array_equal(px, py)


def test_batch_size_bounds(tmp_path):
    m = _manifest(5, tmp_path / "a")
    with pytest.raises(ParameterDomainError):
        BatchStream(m, 6, 0)
    with pytest.raises(ParameterDomainError):
        BatchStream(m, 0, 0)
