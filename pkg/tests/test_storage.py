"""Binary container and dataset file round-trips."""

import numpy as np
import pytest

from compwm.datagen import (GenerativeSpec, build_dataset, build_ground_truth,
                            export_trajectory_csv, load_dataset, save_dataset)
from compwm.storage import (CorruptFileError, MissingArrayError,
                            VersionMismatchError, read_container, write_container)


@pytest.fixture(scope="module")
def dataset():
    model = build_ground_truth(GenerativeSpec(), seed=2, n_check_probes=5)
    return build_dataset(model, n_holdout=3, n_per_task=2, seed=2, length=8)


def test_container_roundtrip_bit_exact(tmp_path):
    arrays = {
        "a/x": np.linspace(-1, 1, 7),
        "a/y": np.arange(12, dtype=np.int64).reshape(3, 4),
        "b": np.array([[1e-300, 1e300], [np.pi, -0.0]]),
    }
    path = tmp_path / "t.cwm"
    write_container(path, {"kind": "test", "note": "hi"}, arrays)
    manifest, loaded = read_container(path)
    assert manifest["note"] == "hi"
    for k, v in arrays.items():
        assert loaded[k].dtype == v.dtype
        assert np.array_equal(loaded[k], v, equal_nan=False)
        assert loaded[k].tobytes() == v.tobytes()


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.cwm"
    write_container(path, {}, {"x": np.arange(100.0)})
    data = path.read_bytes()
    path.write_bytes(data[:-40])
    with pytest.raises(CorruptFileError):
        read_container(path)


def test_corrupted_payload_rejected(tmp_path):
    path = tmp_path / "t.cwm"
    write_container(path, {}, {"x": np.arange(100.0)})
    data = bytearray(path.read_bytes())
    data[-8] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptFileError) as e:
        read_container(path)
    assert "x" in str(e.value)


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "t.cwm"
    write_container(path, {}, {"x": np.zeros(2)})
    text = path.read_bytes()
    path.write_bytes(text.replace(b'"format_version": 1', b'"format_version": 9'))
    with pytest.raises(VersionMismatchError):
        read_container(path)


def test_missing_required_array(tmp_path):
    path = tmp_path / "t.cwm"
    write_container(path, {}, {"x": np.zeros(2)})
    with pytest.raises(MissingArrayError) as e:
        read_container(path, require=["x", "masks/obs"])
    assert "masks/obs" in str(e.value)


def test_not_a_container(tmp_path):
    path = tmp_path / "t.cwm"
    path.write_bytes(b"something else entirely")
    with pytest.raises(CorruptFileError):
        read_container(path)


def test_dataset_roundtrip_bit_exact(tmp_path, dataset):
    path = tmp_path / "d.cwm"
    save_dataset(dataset, path)
    loaded = load_dataset(path)
    assert loaded.spec == dataset.spec
    assert loaded.train_tasks == dataset.train_tasks
    assert loaded.test_tasks == dataset.test_tasks
    assert loaded.generator_seed == dataset.generator_seed
    for task, trajs in dataset.trajectories.items():
        for a, b in zip(trajs, loaded.trajectories[task]):
            assert a.observations.tobytes() == b.observations.tobytes()
            assert a.rewards.tobytes() == b.rewards.tobytes()
            assert a.actions.tobytes() == b.actions.tobytes()
            assert a.true_latents.tobytes() == b.true_latents.tobytes()


def test_dataset_roundtrip_twice_identical_files(tmp_path, dataset):
    p1, p2 = tmp_path / "a.cwm", tmp_path / "b.cwm"
    save_dataset(dataset, p1)
    save_dataset(load_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_csv_export(tmp_path, dataset):
    written = export_trajectory_csv(dataset, tmp_path / "csv")
    assert len(written) == 27 * 2
    header = written[0].read_text().splitlines()[0]
    spec = dataset.spec
    assert header.count("obs_") == spec.obs_dim
    assert header.count("latent_") == spec.latent_dim
    body = written[0].read_text().splitlines()
    assert len(body) == 1 + 8
