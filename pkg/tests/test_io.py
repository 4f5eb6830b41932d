import os

import numpy as np
import pytest

from hsfm import cli, engine, fileio, geometry as geo, synthetic
from hsfm.tracks import TrackSet


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_default_config_matches_golden_fixture():
    golden = os.path.join(os.path.dirname(__file__), "data", "default_config.txt")
    with open(golden) as f:
        assert fileio.PipelineConfig().serialize() == f.read()


def test_config_round_trip(tmp_path):
    cfg = fileio.PipelineConfig(mode="autocalibrated", ell=5, reproj_divisor=1234.5)
    path = tmp_path / "config.txt"
    fileio.write_config(cfg, path)
    assert fileio.read_config(path) == cfg


def test_config_rejects_unknown_key():
    with pytest.raises(fileio.ParseError):
        fileio.PipelineConfig.parse("no_such_thing = 3")


def test_config_env_override():
    cfg = fileio.PipelineConfig().apply_env({"HSFM_ELL": "7", "HSFM_LOCAL_BA": "false"})
    assert cfg.ell == 7
    assert cfg.local_ba is False


# ---------------------------------------------------------------------------
# keypoints / matches / intrinsics
# ---------------------------------------------------------------------------


def test_keypoints_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    kps = rng.uniform(0, 1000, (25, 4))
    desc = rng.normal(0, 1, (25, 8))
    path = tmp_path / "keypoints_0000.txt"
    fileio.write_keypoints(path, 3, (1600, 1200), kps, desc)
    img, size, kps2, desc2 = fileio.read_keypoints(path)
    assert img == 3
    assert size == (1600.0, 1200.0)
    assert np.array_equal(kps, kps2)
    assert np.array_equal(desc, desc2)


def test_matches_round_trip(tmp_path):
    matches = {(0, 1): np.array([[1, 2], [3, 4]]), (1, 2): np.array([[5, 6]])}
    path = tmp_path / "matches.txt"
    fileio.write_matches(path, matches)
    out = fileio.read_matches(path)
    assert set(out) == set(matches)
    for k in matches:
        assert np.array_equal(out[k], matches[k])


def test_truncated_matches_name_the_line(tmp_path):
    path = tmp_path / "matches.txt"
    path.write_text("pair 0 1 3\n1 2\n")
    with pytest.raises(fileio.ParseError) as err:
        fileio.read_matches(path)
    assert err.value.line_no == 3


def test_intrinsics_round_trip(tmp_path):
    intr = {
        0: geo.Intrinsics(1250.0, 1251.5, 0.1, 800.0, 600.0),
        2: geo.Intrinsics(900.0, 900.0, 0.0, 500.0, 400.0),
    }
    path = tmp_path / "intrinsics.txt"
    fileio.write_intrinsics(path, intr)
    out = fileio.read_intrinsics(path)
    assert out == intr


# ---------------------------------------------------------------------------
# model round trip
# ---------------------------------------------------------------------------


def small_model():
    scene = synthetic.generate("ring", 3, 30, seed=1)
    tps = []
    for t_idx, track in enumerate(scene.tracks):
        p = scene.track_point_ids[t_idx]
        tps.append(
            geo.TiePoint(
                track={img: scene.observations[img][p] for img in track.members},
                position=scene.points[p].copy(),
                status=geo.TRIANGULATED,
                track_index=t_idx,
            )
        )
    return geo.Model(cameras=dict(scene.cameras), tie_points=tps, frame=geo.EUCLIDEAN), scene


def test_model_round_trip_bit_equal(tmp_path):
    model, scene = small_model()
    fileio.write_model(model, tmp_path, stem="m", tracks=scene.tracks)
    again = fileio.read_model(tmp_path, stem="m")
    fileio.write_model(again, tmp_path / "second", stem="m")
    for name in ("m_cameras.txt", "m_points.ply"):
        with open(tmp_path / name) as f1, open(tmp_path / "second" / name) as f2:
            assert f1.read() == f2.read()


def test_point_cloud_is_valid_ply(tmp_path):
    model, scene = small_model()
    fileio.write_point_cloud(tmp_path / "pts.ply", model)
    text = (tmp_path / "pts.ply").read_text().splitlines()
    # conformance with the ASCII polygon-format header structure
    assert text[0] == "ply"
    assert text[1] == "format ascii 1.0"
    assert text[2].startswith("element vertex ")
    n = int(text[2].split()[2])
    props = [l for l in text[3:8] if l.startswith("property")]
    assert len(props) == 4
    assert "end_header" in text
    body_start = text.index("end_header") + 1
    assert len(text) - body_start == n
    pts, lengths = fileio.read_point_cloud(tmp_path / "pts.ply")
    assert len(pts) == n
    assert (lengths >= 2).all()


def test_truncated_cameras_error(tmp_path):
    path = tmp_path / "m_cameras.txt"
    path.write_text("frame euclidean\n0 euclidean 1 2 3\n")
    with pytest.raises(fileio.ParseError) as err:
        fileio.read_cameras(path)
    assert err.value.line_no == 2


# ---------------------------------------------------------------------------
# scene directories + CLI
# ---------------------------------------------------------------------------


def test_scene_write_read_regenerates_identical(tmp_path):
    scene = synthetic.generate("ring", 4, 60, seed=9, noise_sigma=0.3)
    fileio.write_scene(scene, tmp_path)
    again = fileio.read_scene(tmp_path)
    assert np.array_equal(again.points, scene.points)
    for img in scene.cameras:
        assert np.array_equal(again.keypoints[img], scene.keypoints[img])


def test_synth_twice_identical_files(tmp_path):
    for sub in ("a", "b"):
        assert (
            cli.main(
                [
                    "synth", "--kind", "ring", "--cameras", "3", "--points", "40",
                    "--seed", "5", "--out", str(tmp_path / sub),
                ]
            )
            == 0
        )
    for name in sorted(os.listdir(tmp_path / "a")):
        with open(tmp_path / "a" / name) as f1, open(tmp_path / "b" / name) as f2:
            assert f1.read() == f2.read(), name


def test_cli_missing_input_path(tmp_path, capsys):
    code = cli.main(["sam", "--input", str(tmp_path / "void"), "--out", str(tmp_path / "o")])
    assert code != 0
    err = capsys.readouterr().err
    assert "void" in err and "error" in err


def test_cli_calibrated_without_intrinsics(tmp_path, capsys):
    scene = synthetic.generate("ring", 3, 60, seed=2)
    fileio.write_scene(scene, tmp_path / "in")
    os.remove(tmp_path / "in" / "intrinsics.txt")
    code = cli.main(
        ["sam", "--input", str(tmp_path / "in"), "--out", str(tmp_path / "out"),
         "--mode", "calibrated"]
    )
    assert code == 2
    assert "intrinsics" in capsys.readouterr().err


def test_cli_synth_sam_eval_round_trip(tmp_path, capsys):
    scene_dir = str(tmp_path / "scene")
    out_dir = str(tmp_path / "out")
    assert cli.main(
        ["synth", "--kind", "ring", "--cameras", "6", "--points", "200",
         "--seed", "11", "--noise", "0.3", "--out", scene_dir]
    ) == 0
    assert cli.main(["match", "--input", scene_dir]) == 0
    assert cli.main(["sam", "--input", scene_dir, "--out", out_dir]) == 0
    assert os.path.isfile(os.path.join(out_dir, "model_0_cameras.txt"))
    assert os.path.isfile(os.path.join(out_dir, "model_0_points.ply"))
    assert cli.main(
        ["eval", "--model", out_dir, "--truth", scene_dir, "--rms-threshold", "0.05"]
    ) == 0
    out = capsys.readouterr().out
    assert "RMS" in out


def test_cli_cluster_report(tmp_path, capsys):
    scene_dir = str(tmp_path / "scene")
    cli.main(
        ["synth", "--kind", "ring", "--cameras", "5", "--points", "150",
         "--seed", "3", "--out", scene_dir]
    )
    assert cli.main(["cluster", "--input", scene_dir]) == 0
    out = capsys.readouterr().out
    assert "height" in out
    assert "image" in out
