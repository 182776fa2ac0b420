import numpy as np
import pytest
from scipy import ndimage

from mrdenoise.data import (
    DatasetSplit,
    PhantomSpec,
    VolumePairs,
    build_patch_dataset,
    decode_volume,
    encode_volume,
    epoch_permutation,
    generate_phantom,
    generate_phantom_set,
    lesion_shell,
    list_volumes,
    load_volume,
    make_pairs,
    prepare_dataset,
    save_volume,
)
from mrdenoise.errors import (
    BadMagicError,
    ConfigError,
    DimensionError,
    FormatError,
    PayloadLengthError,
    PlacementError,
    TruncatedPayloadError,
)


def test_vol_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vol = rng.random((7, 5, 3)).astype(np.float32)
    vol[0, 0, 0] = np.float32(1e-38)  # keep a subnormal-adjacent value
    path = tmp_path / "a.vol"
    save_volume(vol, path)
    back = load_volume(path)
    assert back.dtype == np.float32 and back.shape == vol.shape
    assert back.tobytes() == vol.tobytes()
    save_volume(back, tmp_path / "b.vol")
    assert (tmp_path / "a.vol").read_bytes() == (tmp_path / "b.vol").read_bytes()


def test_vol_file_size(tmp_path):
    path = tmp_path / "a.vol"
    save_volume(np.zeros((4, 6, 2), np.float32), path)
    buf = path.read_bytes()
    n = int.from_bytes(buf[4:8], "little")
    assert len(buf) == 8 + n + 4 * 4 * 6 * 2
    assert buf[8:8 + n] == b'{"dtype":"f32","shape":[4,6,2],"order":"row-major-HWC"}'


def test_vol_bad_magic():
    buf = bytearray(encode_volume(np.ones((2, 2, 2), np.float32)))
    buf[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        decode_volume(bytes(buf))


def test_vol_truncated():
    buf = encode_volume(np.ones((2, 2, 2), np.float32))
    with pytest.raises(TruncatedPayloadError):
        decode_volume(buf[:-1])
    with pytest.raises(TruncatedPayloadError):
        decode_volume(buf[:6])


def test_vol_trailing_bytes():
    buf = encode_volume(np.ones((2, 2, 2), np.float32))
    with pytest.raises(PayloadLengthError):
        decode_volume(buf + b"\0")


def test_vol_errors_are_distinct_format_errors():
    kinds = {BadMagicError, TruncatedPayloadError, PayloadLengthError}
    assert len(kinds) == 3 and all(issubclass(k, FormatError) for k in kinds)


def test_phantom_deterministic():
    a = generate_phantom(PhantomSpec(seed=3))
    b = generate_phantom(PhantomSpec(seed=3))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c = generate_phantom(PhantomSpec(seed=4))
    assert a[0].tobytes() != c[0].tobytes()


def test_no_lesions_empty_mask():
    _, mask = generate_phantom(PhantomSpec(n_lesions=0, seed=1))
    assert not mask.any()


@pytest.mark.parametrize("seed", range(6))
def test_phantom_ranges_and_lesion_contrast(seed):
    spec = PhantomSpec(seed=seed)
    vol, mask = generate_phantom(spec)
    assert vol.min() >= 0 and vol.max() == pytest.approx(1.0)
    tissue = vol > 0
    assert np.all(tissue[mask > 0])
    labels, n = ndimage.label(mask > 0)
    assert n == spec.n_lesions
    for k in range(1, n + 1):
        blob = labels == k
        shell = lesion_shell(blob)
        assert vol[blob].mean() >= spec.contrast * vol[shell].mean() * (1 - 1e-6)


def test_phantom_placement_error():
    with pytest.raises(PlacementError):
        generate_phantom(PhantomSpec(shape=(12, 12, 3), n_lesions=20, radius_range=(3, 3), max_tries=5))


def test_phantom_spec_validation():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomSpec(radius_range=(0, 2)))


def test_phantom_set_ids():
    s = generate_phantom_set(3, seed=0, shape=(24, 24, 4), n_lesions=1)
    assert list(s) == ["phantom_000", "phantom_001", "phantom_002"]


def test_split_disjoint():
    ids = [f"v{i:02d}" for i in range(30)]
    split = DatasetSplit.partition(ids, 20, 5, 5)
    assert not (set(split.train) & set(split.val) or set(split.train) & set(split.test)
                or set(split.val) & set(split.test))
    assert len(split.train) == 20
    with pytest.raises(ConfigError):
        DatasetSplit(["a"], ["a"], [])
    with pytest.raises(ConfigError):
        DatasetSplit.partition(ids[:10], 8, 2, 1)


def test_prepare_dataset_splits_by_volume():
    clean = {k: v[0] for k, v in generate_phantom_set(5, shape=(20, 20, 3), n_lesions=1).items()}
    split, data = prepare_dataset(clean, 3, 1, 1, 0.15, seed=1)
    assert data["train"].ids == split.train and len(data["test"]) == 1
    for vid, c in zip(data["val"].ids, data["val"].clean):
        assert np.array_equal(c, clean[vid])


def test_patch_dataset_counts_and_slabs():
    rng = np.random.default_rng(0)
    clean = [rng.random((36, 26, 6)).astype(np.float32) for _ in range(2)]
    pairs = make_pairs(["a", "b"], clean, 0.09, seed=4)
    ds = build_patch_dataset(pairs, 16, 10)
    assert len(ds) == 2 * (3 * 2)
    for (nz, cl), v, (r, c) in zip(zip(ds.noisy, ds.clean), ds.volume_index, ds.origins):
        np.testing.assert_array_equal(cl, clean[v][r:r + 16, c:c + 16].reshape(-1))
        np.testing.assert_array_equal(nz, pairs.noisy[v][r:r + 16, c:c + 16].reshape(-1))


def test_patch_dataset_single_patch():
    v = np.ones((16, 16, 6), np.float32)
    assert len(build_patch_dataset(VolumePairs(["x"], [v], [v]), 16, 10)) == 1


def test_patch_dataset_shape_mismatch():
    with pytest.raises(DimensionError):
        build_patch_dataset(VolumePairs(["x"], [np.ones((16, 16, 6))], [np.ones((16, 17, 6))]), 16, 10)


def test_epoch_permutation_reproducible():
    a = epoch_permutation(100, 7, 3)
    assert np.array_equal(a, epoch_permutation(100, 7, 3))
    assert sorted(a.tolist()) == list(range(100))
    assert not np.array_equal(a, epoch_permutation(100, 7, 4))


def test_mixed_level_pairs():
    clean = [np.ones((4, 4, 2), np.float32)] * 3
    pairs = make_pairs(["a", "b", "c"], clean, 0.15, seed=0, levels=[0.0, 0.5])
    assert np.array_equal(pairs.noisy[0], clean[0])
    assert not np.array_equal(pairs.noisy[1], clean[1])


def test_list_volumes_skips_masks(tmp_path):
    for name in ("b", "a", "a_mask"):
        save_volume(np.ones((2, 2, 2), np.float32), tmp_path / f"{name}.vol")
    assert list(list_volumes(tmp_path)) == ["a", "b"]
    with pytest.raises(FileNotFoundError):
        list_volumes(tmp_path / "missing")
