import json

import numpy as np
import pytest

from hitgeo.cmp import TabularPolicy, make_random_digraph_cmp, one_way_door_grid, sample_trajectories
from hitgeo.errors import FormatError, ShapeMismatch
from hitgeo.io import load_dataset, load_env, save_dataset, save_env


@pytest.fixture
def env():
    return one_way_door_grid(4, 0.1)


@pytest.fixture
def data(env):
    return sample_trajectories(env, TabularPolicy.uniform(env.n_states, env.n_actions), 5, 12, seed=3)


@pytest.mark.parametrize("name", ["d.bin", "d.txt"])
def test_dataset_round_trip(tmp_path, env, data, name):
    path = save_dataset(data, tmp_path / name)
    back = load_dataset(path, env=env)
    assert back == data
    assert back.seed == 3


def test_layouts_agree(tmp_path, data):
    a = load_dataset(save_dataset(data, tmp_path / "d.bin"))
    b = load_dataset(save_dataset(data, tmp_path / "d.txt"))
    assert a == b


def test_binary_is_byte_stable(tmp_path, data):
    save_dataset(data, tmp_path / "a.bin")
    save_dataset(load_dataset(tmp_path / "a.bin"), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_wrong_env_rejected(tmp_path, data):
    path = save_dataset(data, tmp_path / "d.bin")
    with pytest.raises(ShapeMismatch):
        load_dataset(path, env=make_random_digraph_cmp(16, 4, 3, seed=0))


@pytest.mark.parametrize(
    "name,payload",
    [
        ("x.bin", b"nope"),
        ("x.bin", b"HITGEO-DS\n\x01\x00"),
        ("x.txt", b"OTHER 1\n"),
        ("x.txt", b"HITGEO-DS 9\n"),
        ("x.txt", b"HITGEO-DS 1\nfingerprint ab\nseed 0\ntrajectories 2\n0 1\n0\n"),
    ],
)
def test_malformed_dataset(tmp_path, name, payload):
    (tmp_path / name).write_bytes(payload)
    with pytest.raises(FormatError):
        load_dataset(tmp_path / name)


def test_truncated_binary(tmp_path, data):
    raw = save_dataset(data, tmp_path / "d.bin").read_bytes()
    (tmp_path / "d.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d.bin")


def test_env_round_trip(tmp_path, env):
    back = load_env(save_env(env, tmp_path / "e.json"))
    assert back.fingerprint == env.fingerprint
    np.testing.assert_array_equal(back.kernel, env.kernel)
    np.testing.assert_array_equal(back.coords, env.coords)
    assert back.tag == env.tag


def test_env_without_coords(tmp_path):
    env = make_random_digraph_cmp(6, 2, 2, seed=1)
    assert load_env(save_env(env, tmp_path / "e.json")).coords is None


def test_env_errors(tmp_path, env):
    path = save_env(env, tmp_path / "e.json")
    doc = json.loads(path.read_text())
    doc["fingerprint"] = "0" * 16
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_env(path)
    path.write_text("{not json")
    with pytest.raises(FormatError):
        load_env(path)
    path.write_text(json.dumps({"format": "OTHER"}))
    with pytest.raises(FormatError):
        load_env(path)
