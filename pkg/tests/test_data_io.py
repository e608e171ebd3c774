import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atpn import data, io, synth
from atpn.config import ATPN_DESK, ATPN_SMALL, ATPN_TINY, ConfigError, dump_config, parse_config, resolve_config
from atpn.model import AtpnNet
from atpn.tracking import Box, iou
from atpn.training import Adam, stage_parameters

angles = st.tuples(
    st.floats(-synth.YAW_RANGE, synth.YAW_RANGE),
    st.floats(-synth.PITCH_RANGE, synth.PITCH_RANGE),
    st.floats(-synth.ROLL_RANGE, synth.ROLL_RANGE),
)


def test_template_layout():
    assert synth.TEMPLATE.shape == (12, 3)
    np.testing.assert_allclose(synth.TEMPLATE.mean(axis=0), 0, atol=1e-15)
    perm = np.array(synth.FLIP_PERMUTATION)
    mirrored = synth.TEMPLATE[perm] * [-1, 1, 1]
    np.testing.assert_allclose(mirrored, synth.TEMPLATE, atol=1e-12)


def test_frontal_projection_is_scaled_template():
    pts = synth.project((0.0, 0.0, 0.0), 60.0, (96, 90))
    np.testing.assert_array_equal(pts, 60.0 * synth.TEMPLATE[:, :2] + [96, 90])


def test_pure_roll_rotates_frontal_projection():
    theta = 0.4
    front = synth.project((0, 0, 0), 50.0, (0, 0))
    rolled = synth.project((0, 0, theta), 50.0, (0, 0))
    c, s = math.cos(theta), math.sin(theta)
    np.testing.assert_allclose(rolled, front @ np.array([[c, -s], [s, c]]).T, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(angles, st.floats(40, 80))
def test_pose_recovered_from_landmarks(pose, scale):
    pts = synth.project(pose, scale, (90, 100))
    got = synth.recover_pose(pts)
    assert max(abs(a - b) for a, b in zip(got, pose)) < math.radians(1)


def test_euler_round_trip():
    r = synth.rotation_matrix(0.3, -0.2, 0.5)
    np.testing.assert_allclose(synth.euler_from_matrix(r), (0.3, -0.2, 0.5), atol=1e-12)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)


def test_positive_labels_match_generator():
    rec = data.synth_positive(3, 7)
    assert rec.frame.shape == (synth.FRAME_SIZE, synth.FRAME_SIZE, 3) and rec.frame.dtype == np.uint8
    np.testing.assert_allclose(synth.recover_pose(rec.landmarks), rec.pose, atol=1e-9)
    assert rec.roi.contains(Box(*rec.landmarks.min(0), *rec.landmarks.max(0)))
    assert np.all(np.abs(rec.pose) <= [synth.YAW_RANGE, synth.PITCH_RANGE, synth.ROLL_RANGE])


def test_negatives_have_low_overlap():
    for rec in data.synth_negatives(10, seed=4):
        assert rec.label == 0 and rec.landmarks is None
        assert rec.roi.width > 0


def test_video_vanishes_on_schedule():
    v = data.synth_video(8, seed=2, vanish_at=5)
    assert v.landmarks[5] is None and v.detector(5) is None
    assert all(p is not None for i, p in enumerate(v.landmarks) if i != 5)
    step = np.abs(np.diff(np.stack([v.poses[i] for i in range(5)]), axis=0)).max()
    assert step < math.radians(10)


def test_generation_is_deterministic(tmp_path):
    a = data.generate(tmp_path / "a", "positives", 3, seed=9)
    b = data.generate(tmp_path / "b", "positives", 3, seed=9)
    assert a.read_bytes() == b.read_bytes()
    for name in sorted(p.name for p in (tmp_path / "a" / "images").iterdir()):
        assert (tmp_path / "a" / "images" / name).read_bytes() == (tmp_path / "b" / "images" / name).read_bytes()


def test_generate_rejects_bad_requests(tmp_path):
    with pytest.raises(ValueError):
        data.generate(tmp_path, "positives", 0, 0)
    with pytest.raises(ValueError):
        data.generate(tmp_path, "cats", 2, 0)


def test_ppm_round_trip_and_errors(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    io.write_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(io.read_ppm(tmp_path / "x.ppm"), img)
    raw = (tmp_path / "x.ppm").read_bytes()
    (tmp_path / "short.ppm").write_bytes(raw[:-4])
    with pytest.raises(io.ParseError):
        io.read_ppm(tmp_path / "short.ppm")
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(io.ParseError):
        io.read_ppm(tmp_path / "bad.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n1 1\n255\n" + bytes([1, 2, 3]))
    np.testing.assert_array_equal(io.read_ppm(tmp_path / "c.ppm"), [[[1, 2, 3]]])


def test_manifest_round_trip_bytes(tmp_path):
    path = data.generate(tmp_path, "video", 4, seed=1)
    text = path.read_text()
    m = io.load_manifest(path, check_images=True)
    assert io.manifest_text(m) == text
    io.save_manifest(m, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()
    assert m.records[2].label == 0 and m.records[2].landmarks is None
    assert [r.frame for r in m.records] == [0, 1, 2, 3]


def test_manifest_parse_errors_carry_line_numbers(tmp_path):
    path = data.generate(tmp_path, "positives", 2, seed=1)
    lines = path.read_text().splitlines()
    cells = lines[2].split(",")
    cells[2] = "wide"
    broken = "\n".join(lines[:2] + [",".join(cells)]) + "\n"
    with pytest.raises(io.ParseError, match="line 3"):
        io.parse_manifest(broken, tmp_path)
    (tmp_path / "images" / "pos_00001.ppm").unlink()
    with pytest.raises((io.ParseError, FileNotFoundError)):
        io.load_manifest(path, check_images=True)


def test_manifest_filter_and_records(tmp_path):
    path = data.generate(tmp_path, "positives", 6, seed=11)
    m = io.load_manifest(path)
    recs = data.records_from_manifest(path)
    assert len(recs) == 6
    big = m.filter(tag="large-pose")
    assert all("large-pose" in r.tags for r in big.records)
    fresh = data.synth_positives(6, 11)
    for a, b in zip(recs, fresh):
        np.testing.assert_array_equal(a.frame, b.frame)
        np.testing.assert_array_equal(a.landmarks, b.landmarks)
        assert a.roi == b.roi


def _outputs(model, images):
    return model.predict(images)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = AtpnNet(ATPN_TINY, seed=3)
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data[...] = rng.normal(size=p.shape)
    net.backbone.stem.bn.running_mean[...] = rng.normal(size=net.backbone.stem.bn.running_mean.shape)
    opt = Adam(stage_parameters(net, 1))
    opt.t = 7
    io.save_checkpoint(tmp_path / "a.ckpt", net, 1, opt.state())
    loaded, stage, opt_state = io.load_checkpoint(tmp_path / "a.ckpt")
    assert stage == 1 and loaded.trained_stage == 1 and opt_state["step"] == 7
    images = rng.random((10, 3, 32, 32)).astype(np.float32)
    a, b = net.predict(images), loaded.predict(images)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    io.save_checkpoint(tmp_path / "b.ckpt", loaded, 1, opt_state)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption_is_reported(tmp_path):
    net = AtpnNet(ATPN_TINY)
    io.save_checkpoint(tmp_path / "a.ckpt", net, 1)
    raw = (tmp_path / "a.ckpt").read_bytes()
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(io.ParseError):
            io.parse_checkpoint(raw[:cut])
    with pytest.raises(io.ParseError):
        io.parse_checkpoint(raw + b"\0")
    text = io.parse_checkpoint(raw).config_text
    i = text.index("grid = 8")
    edited = raw.replace(text.encode(), (text[:i] + "grid = 9" + text[i + 8:]).encode())
    (tmp_path / "edit.ckpt").write_bytes(edited)
    with pytest.raises(io.IncompatibleCheckpointError):
        io.load_checkpoint(tmp_path / "edit.ckpt", AtpnNet(ATPN_TINY))


def test_checkpoint_rejects_other_architecture(tmp_path):
    io.save_checkpoint(tmp_path / "a.ckpt", AtpnNet(ATPN_TINY), 1)
    with pytest.raises(io.IncompatibleCheckpointError):
        io.load_checkpoint(tmp_path / "a.ckpt", AtpnNet(ATPN_TINY.with_landmarks(12)))


@pytest.mark.parametrize("cfg", [ATPN_SMALL, ATPN_DESK, ATPN_TINY])
def test_config_text_round_trip(cfg):
    assert parse_config(dump_config(cfg)) == cfg


def test_config_errors():
    text = dump_config(ATPN_TINY)
    with pytest.raises(ConfigError):
        parse_config(text.replace("[heatmap]", "[heat]"))
    with pytest.raises(ConfigError, match="line"):
        parse_config(text.replace("size = 32", "size = big"))
    with pytest.raises(ConfigError):
        parse_config("size = 3\n")
    assert resolve_config(None) is ATPN_DESK
    assert resolve_config("atpn-small") is ATPN_SMALL


def test_config_file_resolves(tmp_path):
    (tmp_path / "c.cfg").write_text(dump_config(ATPN_TINY))
    assert resolve_config(str(tmp_path / "c.cfg")) == ATPN_TINY


def test_default_config_geometry():
    assert ATPN_SMALL.input_size == 112
    assert ATPN_SMALL.landmarks == 98 and ATPN_DESK.landmarks == 12
    assert ATPN_SMALL.pyramid() == (28, 14, 7)
    assert ATPN_SMALL.heatmap_grid == 28
    assert ATPN_SMALL.alignment.branch_kernels == (3, 5, 7)


def test_sample_negative_box_respects_iou():
    rng = np.random.default_rng(0)
    face = Box(50, 50, 110, 110)
    for _ in range(20):
        box = synth.sample_negative_box([face], (192, 192), face, rng)
        assert iou(box, face) < 0.3


def test_manifest_carries_fractional_scores(tmp_path):
    path = data.generate(tmp_path, "negatives", 3, seed=2)
    m = io.load_manifest(path)
    m.records[0].label = 0.8125
    m.records[1].label = 1e-7
    text = io.manifest_text(m)
    again = io.parse_manifest(text, tmp_path)
    assert [r.label for r in again.records] == [0.8125, 1e-7, 0]
    assert io.manifest_text(again) == text
