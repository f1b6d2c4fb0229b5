import numpy as np
import pytest

from skillforge import checkpoint, nn


def _sample_state(seed=0):
    rng = np.random.default_rng(seed)
    spec = nn.MlpSpec(4, (6,), 2)
    params = {"net": nn.init_params(spec, rng)}
    adam = {"net": nn.AdamState.for_params(params["net"], lr=1e-3)}
    adam["net"].first_moment.values[...] = rng.normal(size=params["net"].values.size)
    adam["net"].step_count = 17
    return spec, params, adam, rng


def test_round_trip_bit_identical_forward(tmp_path):
    spec, params, adam, rng = _sample_state()
    path = tmp_path / "ck.bin"
    checkpoint.save_checkpoint(path, params, adam, checkpoint.rng_state(rng))
    loaded_params, loaded_adam, rng_st, _ = checkpoint.load_checkpoint(path)

    assert np.array_equal(loaded_params["net"].values, params["net"].values)
    assert loaded_params["net"].layout == params["net"].layout
    assert loaded_adam["net"].step_count == 17
    assert np.array_equal(
        loaded_adam["net"].first_moment.values, adam["net"].first_moment.values
    )

    rng2 = checkpoint.restore_rng(rng_st)
    for _ in range(100):
        x = rng2.normal(size=4)
        a = nn.forward(spec, params["net"], x)
        b = nn.forward(spec, loaded_params["net"], x)
        assert np.array_equal(a, b)


def test_wrong_version_raises_versioned_error(tmp_path):
    spec, params, adam, _ = _sample_state()
    path = tmp_path / "ck.bin"
    checkpoint.save_checkpoint(path, params, adam)
    raw = path.read_bytes().replace(b"SKILLFORGE-CKPT 1", b"SKILLFORGE-CKPT 9", 1)
    path.write_bytes(raw)
    with pytest.raises(checkpoint.CheckpointVersionError, match="version 9"):
        checkpoint.load_checkpoint(path)


def test_truncated_file_is_corrupt_not_partial(tmp_path):
    spec, params, adam, _ = _sample_state()
    path = tmp_path / "ck.bin"
    checkpoint.save_checkpoint(path, params, adam)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 16])
    with pytest.raises(checkpoint.CheckpointCorruptError, match="truncated"):
        checkpoint.load_checkpoint(path)


def test_not_a_checkpoint_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"hello world\nnot a checkpoint")
    with pytest.raises(checkpoint.CheckpointCorruptError):
        checkpoint.load_checkpoint(path)


def test_kind_mismatch(tmp_path):
    _, params, adam, _ = _sample_state()
    path = tmp_path / "ck.bin"
    checkpoint.save_checkpoint(path, params, adam, kind="primitives")
    with pytest.raises(checkpoint.CheckpointLayoutError, match="kind"):
        checkpoint.load_checkpoint(path, expect_kind="full")
    params2, _, _, _ = checkpoint.load_checkpoint(path, expect_kind="primitives")
    assert "net" in params2


def test_layout_check_helper(tmp_path):
    _, params, adam, _ = _sample_state()
    path = tmp_path / "ck.bin"
    checkpoint.save_checkpoint(path, params, adam)
    loaded, _, _, _ = checkpoint.load_checkpoint(path)
    checkpoint.check_layouts(loaded, {"net": params["net"].layout})
    with pytest.raises(checkpoint.CheckpointLayoutError, match="missing"):
        checkpoint.check_layouts(loaded, {"other": params["net"].layout})
    with pytest.raises(checkpoint.CheckpointLayoutError, match="mismatch"):
        checkpoint.check_layouts(loaded, {"net": (("w0", (1, 1)),)})


def test_meta_and_rng_round_trip(tmp_path):
    _, params, adam, rng = _sample_state(3)
    path = tmp_path / "ck.bin"
    meta = {"budget": 123, "note": "stage"}
    checkpoint.save_checkpoint(path, params, adam, checkpoint.rng_state(rng), meta=meta)
    _, _, rng_st, got_meta = checkpoint.load_checkpoint(path)
    assert got_meta == meta
    a = checkpoint.restore_rng(rng_st).normal(size=5)
    b = rng.normal(size=5)
    assert np.array_equal(a, b)
