import json
import struct

import numpy as np
import pytest

from topodiff.cubical import sublevel_pd
from topodiff.errors import ConfigError, DataError
from topodiff.metrics import dice
from topodiff.phantom import (
    BANDS,
    TEXTURE_CLIP,
    AnatomySet,
    generate_dataset,
    generate_phantom,
    load_dataset,
    render_image,
    save_dataset,
    stack_samples,
    tumor_betti,
)


@pytest.fixture(scope="module")
def sweep():
    return [generate_phantom(seed, 32) for seed in range(1000)]


def assert_same(a, b):
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.tumor, b.tumor)
    np.testing.assert_array_equal(a.anatomy.stack(), b.anatomy.stack())
    assert a.seed == b.seed and a.has_hole == b.has_hole


@pytest.mark.parametrize("size", [32, 64, 128])
def test_deterministic(size):
    assert_same(generate_phantom(5, size), generate_phantom(5, size))
    assert generate_phantom(5, size).image.shape == (size, size)


def test_different_seeds_differ():
    assert not np.array_equal(generate_phantom(1).image, generate_phantom(2).image)


@pytest.mark.parametrize("size", [0, 16, 48, 256])
def test_unsupported_size(size):
    with pytest.raises(ConfigError):
        generate_phantom(0, size)


def test_invariant_sweep(sweep):
    for s in sweep:
        assert s.anatomy.check() == [], s.seed
        assert s.tumor.any()
        assert not np.any(s.tumor & ~s.anatomy.bm)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_hole_frequency(sweep):
    frac = np.mean([s.has_hole for s in sweep])
    assert 0.25 < frac < 0.35


def test_hole_tumors_have_one_loop(sweep):
    holes = [s for s in sweep if s.has_hole][:40]
    solid = [s for s in sweep if not s.has_hole][:40]
    for s in holes + solid:
        f = 1.0 - np.pad(s.tumor, 1).astype(float)
        d = sublevel_pd(f)
        loops = sum(1 for p in d.points if p.dim == 1 and p.birth <= 0.5 < p.death)
        comps = sum(1 for p in d.points if p.dim == 0 and p.birth <= 0.5 < p.death)
        assert loops == int(s.has_hole)
        assert comps == 1
        assert tumor_betti(s.tumor) == (1, int(s.has_hole))


def test_band_separation(sweep):
    for s in sweep[:200]:
        cgm = s.anatomy.cgm & ~s.tumor
        assert s.image[s.tumor].mean() > s.image[cgm].mean()


def test_empty_tumor_has_no_bright_pixels(sweep):
    for s in sweep[:100]:
        img = render_image(s.anatomy, np.zeros_like(s.tumor), s.seed)
        assert img.max() <= 0.75
        top = max(c + hw for k, (c, hw) in BANDS.items() if k != "tumor") + TEXTURE_CLIP
        assert img.max() <= top + 1e-6


def test_all_zero_masks_render_background():
    z = np.zeros((32, 32), dtype=bool)
    img = render_image(AnatomySet(z, z, z, z), z, 3)
    assert not img.any()


def test_self_dice_is_one(sweep):
    for s in sweep[:20]:
        assert dice(s.tumor, s.tumor) == 1.0
        assert dice(s.anatomy.bm, s.anatomy.bm) == 1.0


def test_round_trip(tmp_path):
    data = generate_dataset(6, 32, seed=2)
    save_dataset(tmp_path / "d.tdph", data)
    back = load_dataset(tmp_path / "d.tdph")
    assert len(back) == 6
    for a, b in zip(data, back):
        assert_same(a, b)


def test_round_trip_large(tmp_path):
    data = [generate_phantom(9, 128)]
    save_dataset(tmp_path / "d.tdph", data)
    assert_same(data[0], load_dataset(tmp_path / "d.tdph")[0])


def test_truncated_file_names_record(tmp_path):
    path = tmp_path / "d.tdph"
    save_dataset(path, generate_dataset(4, 32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(DataError, match="record 3"):
        load_dataset(path)


def _rewrite_header(path, **changes):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    header.update(changes)
    new = json.dumps(header).encode()
    path.write_bytes(raw[:4] + struct.pack("<Q", len(new)) + new + raw[12 + hlen:])


def test_header_count_mismatch(tmp_path):
    path = tmp_path / "d.tdph"
    save_dataset(path, generate_dataset(3, 32))
    _rewrite_header(path, count=2, seeds=[0, 1], has_hole=[False, False])
    with pytest.raises(DataError):
        load_dataset(path)
    _rewrite_header(path, count=5, seeds=list(range(5)), has_hole=[False] * 5)
    with pytest.raises(DataError):
        load_dataset(path)
    _rewrite_header(path, count=3)
    with pytest.raises(DataError):
        load_dataset(path)


def test_corrupt_header_and_magic(tmp_path):
    path = tmp_path / "d.tdph"
    save_dataset(path, generate_dataset(1, 32))
    raw = path.read_bytes()
    path.write_bytes(raw[:12] + b"{not json" + raw[21:])
    with pytest.raises(DataError):
        load_dataset(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        load_dataset(path)


def test_stack_samples_shapes():
    images, tumors, anatomy = stack_samples(generate_dataset(3, 32))
    assert images.shape == (3, 32, 32) and images.dtype == np.float32
    assert tumors.shape == (3, 32, 32) and tumors.dtype == bool
    assert anatomy.shape == (3, 4, 32, 32)
