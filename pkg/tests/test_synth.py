import json
import time
from pathlib import Path

import numpy as np
import pytest

from splat4d import synth
from splat4d.camera import CameraIntrinsics, OrbitRig, orbit_poses
from splat4d.rasterizer.io import to_uint8

GOLDEN = Path(__file__).parent / "golden" / "manifest_keys.json"


@pytest.fixture(scope="module")
def full_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    spec = synth.CorruptionSpec(noise_views=synth.default_noise_views(21))
    synth.generate(synth.default_script(), OrbitRig(), 25, spec, out, seed=0)
    return out


def small(out, spec=None, seed=0, frames=3, views=4, script=None):
    return synth.generate(script or synth.default_script(), OrbitRig(n_azimuths=views), frames,
                          spec or synth.CorruptionSpec(noise_views=(1,), defect_prob=0.5), out,
                          size=32, seed=seed, held_out=(1,))


def test_manifest_keys_match_golden(full_dataset):
    golden = json.loads(GOLDEN.read_text())
    m = json.loads((full_dataset / synth.MANIFEST_NAME).read_text())
    assert sorted(m) == golden["top"]
    assert sorted(m["images"][0]) == golden["image_entry"]
    assert sorted(m["corruption"]) == golden["corruption"]
    assert sorted(m["corruption"]["spec"]) == golden["corruption_spec"]
    assert sorted(m["corruption"]["jitter"][0]) == golden["jitter_entry"]
    assert sorted(m["corruption"]["noise"][0]) == golden["noise_entry"]
    assert sorted(m["corruption"]["defects"][0]) == golden["defect_entry"]
    assert sorted(m["rig"]) == golden["rig"]
    assert sorted(m["intrinsics"]) == golden["intrinsics"]
    assert sorted(m["poses"][0]) == golden["pose"]
    assert m["timestamps"] == 25 and m["views"] == 21 and len(m["images"]) == 525


def test_full_load_is_fast_and_complete(full_dataset):
    t0 = time.perf_counter()
    ds = synth.load(full_dataset)
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0
    assert ds.n_frames == 25 and ds.n_views == 21
    assert ds.image(24, 20).shape == (128, 128, 3)
    assert ds.held_out == [5, 10, 15]
    assert len(ds.train_keys()) == 25 * 18 and len(ds.test_keys()) == 25 * 3


def test_zero_corruption_frames_equal_clean(tmp_path):
    small(tmp_path, synth.CorruptionSpec.none())
    ds = synth.load(tmp_path)
    for t in range(ds.n_frames):
        for v in range(ds.n_views):
            np.testing.assert_array_equal(ds.image(t, v), ds.clean(t, v))


def test_same_seed_is_byte_identical(tmp_path):
    small(tmp_path / "a", seed=3)
    small(tmp_path / "b", seed=3)
    small(tmp_path / "c", seed=4)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 1 + 3 * 12
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    frames_a = [(tmp_path / "a" / f).read_bytes() for f in files if f.parts[0] == "frames"]
    frames_c = [(tmp_path / "c" / f).read_bytes() for f in files if f.parts[0] == "frames"]
    assert frames_a != frames_c


def test_corruption_replays_from_manifest(tmp_path):
    small(tmp_path, synth.CorruptionSpec(noise_views=(1, 2), defect_prob=0.7), frames=4)
    ds = synth.load(tmp_path)
    c = ds.manifest["corruption"]
    assert c["noise"] and c["defects"]
    for t in range(ds.n_frames):
        for v in range(ds.n_views):
            rec = ds.corruption_record(t, v)
            redo = synth.apply_corruption(ds.clean(t, v), ds.alpha(t, v), ds.background, rec)
            np.testing.assert_array_equal(redo, ds.image(t, v))


def test_first_frame_has_identity_jitter(tmp_path):
    m = small(tmp_path)
    assert m["corruption"]["jitter"][0]["gain"] == [1.0, 1.0, 1.0]
    assert m["corruption"]["jitter"][0]["bias"] == [0.0, 0.0, 0.0]
    g = np.array([j["gain"] for j in m["corruption"]["jitter"][1:]])
    assert np.all((g >= 0.85) & (g <= 1.15))


def test_noise_only_on_listed_views(tmp_path):
    small(tmp_path, synth.CorruptionSpec(gain=0, bias=0, noise_views=(2,), defect_prob=0))
    ds = synth.load(tmp_path)
    for t in range(ds.n_frames):
        for v in range(ds.n_views):
            diff = np.abs(ds.image(t, v) - ds.clean(t, v)).max()
            assert (diff > 0) == (v == 2)


def test_clean_matches_direct_render(tmp_path):
    script = synth.default_script(seed=2)
    m = small(tmp_path, script=script)
    ds = synth.load(tmp_path)
    scene = synth.ScriptedScene(script)
    intr = CameraIntrinsics.from_fov(32, 32, 49.0)
    poses = orbit_poses(OrbitRig(n_azimuths=4))
    for t_idx, v in [(0, 0), (2, 3), (1, 2)]:
        img, alpha = scene.render(m["times"][t_idx], poses[v], intr)
        np.testing.assert_array_equal(to_uint8(img).astype(np.float32) / 255.0, ds.clean(t_idx, v))
        np.testing.assert_array_equal(to_uint8(alpha).astype(np.float32) / 255.0, ds.alpha(t_idx, v))


def test_static_script_does_not_move():
    scene = synth.ScriptedScene(synth.default_script(static=True))
    a, _ = scene.cloud_at(0.0)
    b, _ = scene.cloud_at(0.7)
    np.testing.assert_array_equal(a.positions, b.positions)
    moving = synth.ScriptedScene(synth.default_script())
    assert not np.allclose(moving.cloud_at(0.0)[0].positions, moving.cloud_at(0.5)[0].positions)


def test_script_roundtrip_and_unknown_keys(tmp_path):
    s = synth.default_script(seed=5)
    assert synth.SceneScript.from_dict(s.to_dict()).to_dict() == s.to_dict()
    bad = s.to_dict()
    bad["gravity"] = 9.8
    with pytest.raises(ValueError):
        synth.SceneScript.from_dict(bad)
    p = tmp_path / "script.json"
    p.write_text(json.dumps(s.to_dict()))
    assert synth.SceneScript.load(p).to_dict() == s.to_dict()


def test_missing_file_is_named(tmp_path):
    small(tmp_path)
    victim = tmp_path / "frames" / "t001_v002.png"
    victim.unlink()
    with pytest.raises(synth.DatasetError, match="t001_v002"):
        synth.load(tmp_path)


def test_missing_and_malformed_manifest(tmp_path):
    with pytest.raises(synth.DatasetError, match="manifest"):
        synth.load(tmp_path)
    (tmp_path / synth.MANIFEST_NAME).write_text("{not json")
    with pytest.raises(synth.DatasetError, match="malformed"):
        synth.load(tmp_path)


@pytest.mark.parametrize("kw", [dict(gain=1.2), dict(bias=-0.1), dict(noise_sigma=-1), dict(defect_prob=2)])
def test_corruption_spec_validation(kw):
    with pytest.raises(ValueError):
        synth.CorruptionSpec(**kw)


def test_default_noise_views():
    assert synth.default_noise_views(7) == (1, 4)
