"""On-disk formats for environments and datasets.

Datasets come in two layouts that carry the same content:

* binary (any extension except ``.txt``)::

      b"HITGEO-DS\\n" | uint32 version | uint32 header_len | header JSON |
      int64 lengths[n_traj] | int64 states[...] | int64 actions[...]

* text (``.txt``)::

      HITGEO-DS <version>
      fingerprint <hex>
      seed <int>
      trajectories <n>
      <states, space separated>
      <actions, space separated>      (one pair of lines per trajectory)

Environments are stored as JSON with ``"format": "HITGEO-ENV"``.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .cmp import Dataset, FiniteCMP, Trajectory
from .errors import FormatError

DS_MAGIC = b"HITGEO-DS\n"
DS_VERSION = 1
ENV_MAGIC = "HITGEO-ENV"
ENV_VERSION = 1


def save_dataset(data, path):
    path = Path(path)
    if path.suffix == ".txt":
        lines = [
            f"HITGEO-DS {DS_VERSION}",
            f"fingerprint {data.env_fingerprint}",
            f"seed {data.seed}",
            f"trajectories {len(data.trajectories)}",
        ]
        for t in data.trajectories:
            lines.append(" ".join(map(str, t.states.tolist())))
            lines.append(" ".join(map(str, t.actions.tolist())))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path
    header = json.dumps(
        {"fingerprint": data.env_fingerprint, "seed": data.seed, "n": len(data.trajectories)},
        sort_keys=True,
    ).encode("utf-8")
    lengths = data.lengths
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<II", DS_VERSION, len(header)))
        fh.write(header)
        fh.write(lengths.astype("<i8").tobytes())
        fh.write(np.concatenate([t.states for t in data.trajectories]).astype("<i8").tobytes())
        fh.write(np.concatenate([t.actions for t in data.trajectories]).astype("<i8").tobytes())
    return path


def _load_text(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        magic, version = lines[0].split()
        if magic != "HITGEO-DS":
            raise FormatError(f"{path}: bad magic {magic!r}")
        if int(version) != DS_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        fingerprint = lines[1].split()[1]
        seed = int(lines[2].split()[1])
        n = int(lines[3].split()[1])
        trajs = []
        for i in range(n):
            states = [int(v) for v in lines[4 + 2 * i].split()]
            actions = [int(v) for v in lines[5 + 2 * i].split()]
            trajs.append(Trajectory(states, actions))
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed dataset text ({exc})") from exc
    return Dataset(tuple(trajs), fingerprint, seed)


def _load_binary(path):
    raw = path.read_bytes()
    if not raw.startswith(DS_MAGIC):
        raise FormatError(f"{path}: not a HITGEO-DS file")
    try:
        pos = len(DS_MAGIC)
        version, hlen = struct.unpack_from("<II", raw, pos)
        if version != DS_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        pos += 8
        header = json.loads(raw[pos : pos + hlen])
        pos += hlen
        n = header["n"]
        lengths = np.frombuffer(raw, dtype="<i8", count=n, offset=pos).astype(np.int64)
        pos += 8 * n
        n_states = int(np.sum(lengths + 1))
        n_actions = int(np.sum(lengths))
        states = np.frombuffer(raw, dtype="<i8", count=n_states, offset=pos).astype(np.int64)
        pos += 8 * n_states
        actions = np.frombuffer(raw, dtype="<i8", count=n_actions, offset=pos).astype(np.int64)
        if pos + 8 * n_actions != len(raw):
            raise FormatError(f"{path}: trailing or missing bytes")
        s_split = np.split(states, np.cumsum(lengths + 1)[:-1])
        a_split = np.split(actions, np.cumsum(lengths)[:-1])
        return Dataset(
            tuple(Trajectory(s, a) for s, a in zip(s_split, a_split)),
            header["fingerprint"],
            int(header["seed"]),
        )
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed dataset ({exc})") from exc


def load_dataset(path, env=None):
    """Read a dataset; if ``env`` is given every trajectory is validated against it."""
    path = Path(path)
    if path.suffix == ".txt":
        data = _load_text(path)
    else:
        data = _load_binary(path)
    if env is not None:
        data.validate(env)
    return data


def save_env(env, path):
    doc = {
        "format": ENV_MAGIC,
        "version": ENV_VERSION,
        "tag": env.tag,
        "fingerprint": env.fingerprint,
        "kernel": env.kernel.tolist(),
        "coords": None if env.coords is None else env.coords.tolist(),
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")
    return Path(path)


def load_env(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != ENV_MAGIC:
        raise FormatError(f"{path}: not a HITGEO-ENV file")
    if doc.get("version") != ENV_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')}")
    env = FiniteCMP(np.array(doc["kernel"]), coords=doc["coords"], tag=doc["tag"])
    if env.fingerprint != doc["fingerprint"]:
        raise FormatError(f"{path}: fingerprint mismatch")
    return env
