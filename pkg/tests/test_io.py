import json
import struct

import numpy as np
import pytest

from virnet.config import ConfigError, config_from_dict, load_config
from virnet.data import SynthConfig, load_dataset, load_manifest, procedural_image, synth_sample, synthesize
from virnet.degradation import DegradationSpec
from virnet.errors import ContractError
from virnet.io import (decode_virt, encode_virt, load_checkpoint, read_image, read_pnm, read_virt,
                       save_checkpoint, write_pnm, write_virt)


def test_virt_layout_and_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7
    buf = encode_virt(a)
    assert buf[:4] == b"VIRT"
    assert struct.unpack_from("<5I", buf, 4) == (1, 3, 2, 3, 4)
    assert len(buf) == 4 + 4 * 5 + 24 * 4
    back, end = decode_virt(buf)
    assert end == len(buf)
    np.testing.assert_array_equal(back, a.astype(np.float32))
    write_virt(tmp_path / "a.virt", a, version=2)
    np.testing.assert_array_equal(read_virt(tmp_path / "a.virt"), a)
    np.testing.assert_array_equal(read_image(tmp_path / "a.virt"), a)


def test_virt_errors():
    with pytest.raises(ContractError):
        decode_virt(b"NOPE" + bytes(16))
    with pytest.raises(ContractError):
        decode_virt(encode_virt(np.zeros((4, 4)))[:-3])
    with pytest.raises(ContractError):
        encode_virt(np.zeros(3), version=7)


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gray = np.round(rng.uniform(size=(5, 7)) * 255) / 255
    rgb = np.round(rng.uniform(size=(3, 4, 6)) * 255) / 255
    write_pnm(tmp_path / "g.pgm", gray)
    write_pnm(tmp_path / "c.ppm", rgb)
    np.testing.assert_allclose(read_pnm(tmp_path / "g.pgm"), gray, atol=1e-12)
    np.testing.assert_allclose(read_image(tmp_path / "c.ppm"), rgb, atol=1e-12)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    with pytest.raises(ContractError):
        write_pnm(tmp_path / "bad.pgm", np.zeros((2, 3, 3)))


def test_pnm_comment_and_clipping(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# note\n2 1\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.pgm"), [[0.0, 1.0]])
    write_pnm(tmp_path / "clip.pgm", np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(read_pnm(tmp_path / "clip.pgm"), [[0.0, 1.0]])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {"w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3), "s": np.array(2.5)}
    save_checkpoint(tmp_path / "m.ckpt", arrays, {"step": 4})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"step": 4}
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)


def test_config_validation(tmp_path):
    cfg = config_from_dict({"task": "sr", "synth": {"size": 24, "scale": 3}, "seed": 3})
    assert cfg.synth.task == "sr" and cfg.hyperparams.eps0_sq > 0
    for bad in ({"tsk": "denoise"}, {"task": "inpaint"}, {"train": {"iterations": 5}},
                {"train": {"lr_init": 1e-7}}, {"network": []}, {"task": "sr", "synth": {"task": "denoise"}}):
        with pytest.raises(ConfigError):
            config_from_dict(bad)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_procedural_images_in_range():
    rng = np.random.default_rng(2)
    img = procedural_image(rng, 32, 24)
    assert img.shape == (32, 24)
    assert img.min() >= 0 and img.max() <= 1 and img.std() > 0.01


def test_manifest_reproduces_files(tmp_path):
    cfg = SynthConfig(count=5, size=16, noise_map="peaks:max=0.1", map_size=32)
    path = synthesize(cfg, tmp_path / "d", seed=9)
    manifest = load_manifest(path)
    assert manifest["seed"] == 9 and manifest["task"] == "denoise"
    for idx, entry in enumerate(manifest["samples"]):
        s = synth_sample(cfg, manifest["seed"], idx)
        assert DegradationSpec.from_dict(entry["degradation"]) == s["degradation"]
        np.testing.assert_array_equal(read_virt(path.parent / entry["corrupted"]), s["corrupted"])
        np.testing.assert_array_equal(read_virt(path.parent / entry["clean"]), s["clean"])
    ds = load_dataset(path)
    assert ds.x.shape == (5, 1, 16, 16) and ds.noise_maps.shape == (5, 1, 16, 16)


def test_manifest_with_missing_file(tmp_path):
    path = synthesize(SynthConfig(count=2, size=8), tmp_path, seed=0)
    (tmp_path / json.loads(path.read_text())["samples"][1]["corrupted"]).unlink()
    with pytest.raises(ContractError):
        load_manifest(path)


def test_synthesis_is_thread_count_independent(tmp_path, monkeypatch):
    cfg = SynthConfig(task="deblock", count=6, size=16)
    monkeypatch.setenv("VIRNET_THREADS", "1")
    a = synthesize(cfg, tmp_path / "a", seed=1)
    monkeypatch.setenv("VIRNET_THREADS", "4")
    b = synthesize(cfg, tmp_path / "b", seed=1)
    for f in sorted(a.parent.iterdir()):
        assert f.read_bytes() == (b.parent / f.name).read_bytes()


def test_sr_sizes_round_up():
    s = synth_sample(SynthConfig(task="sr", size=16, scale=3, kernel_support=7), 0, 0)
    assert s["corrupted"].shape == (6, 6)
    assert s["clean"].shape == (18, 18)
