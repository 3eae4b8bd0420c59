import json
import zipfile

import numpy as np
import pytest

from maxvit_unet import ConfigError
from maxvit_unet.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from maxvit_unet.config import TINY
from maxvit_unet.model import build


def test_roundtrip_is_bitwise(tmp_path):
    model = build(TINY, seed=5)
    for _, buf in model.named_buffers():
        buf += np.random.default_rng(0).normal(size=buf.shape).astype(buf.dtype)
    state = {"step": 7, "m": {"stem.conv1.weight": np.ones((16, 3, 3, 3), np.float32)},
             "v": {"stem.conv1.weight": np.full((16, 3, 3, 3), 2.0, np.float32)}}
    path = save_checkpoint(tmp_path / "c.npz", model, {"iteration": 7}, state)
    loaded, header, optim = load_checkpoint(path)
    original = model.state_dict()
    restored = loaded.state_dict()
    assert original.keys() == restored.keys()
    for k in original:
        assert original[k].tobytes() == restored[k].tobytes(), k
    assert header["extra"] == {"iteration": 7}
    assert optim["step"] == 7
    assert np.array_equal(optim["v"]["stem.conv1.weight"], state["v"]["stem.conv1.weight"])


def test_arrays_are_little_endian_with_header(tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", build(TINY))
    with np.load(path) as data:
        for name in data.files:
            assert data[name].dtype.byteorder in ("<", "|", "=")
    header, state, optim = read_checkpoint(path)
    assert header["format_version"] == 1
    assert len(header["config_digest"]) == 64
    assert optim is None
    assert "stem.conv1.weight" in state


def test_tampered_config_is_rejected(tmp_path):
    path = save_checkpoint(tmp_path / "c.npz", build(TINY))
    header, state, _ = read_checkpoint(path)
    header["model"]["num_classes"] = 3
    bad = tmp_path / "bad.npz"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(bad, "w") as dst:
        for item in src.namelist():
            if item == "__header__.npy":
                buf = tmp_path / "h.npy"
                np.save(buf, np.frombuffer(json.dumps(header).encode(), dtype=np.uint8))
                dst.write(buf, item)
            else:
                dst.writestr(item, src.read(item))
    with pytest.raises(ConfigError):
        load_checkpoint(bad)


def test_garbage_file_is_a_config_error(tmp_path):
    path = tmp_path / "x.npz"
    path.write_bytes(b"not a zip")
    with pytest.raises(ConfigError):
        read_checkpoint(path)
