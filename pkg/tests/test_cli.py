import numpy as np
import pytest

from cdsmvs.cli import main
from cdsmvs.pipeline.io import read_pfm, read_ply, read_png, read_scene_dir, scene_dirs, write_pfm
from cdsmvs.synthdata import SceneSpec, generate_scene


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "data", "--scenes", 2, "--resolution", "32x32", "--seed", 3) == 0
    (root / "cfg.txt").write_text("epochs = 1\n")
    assert run("train", "--config", root / "cfg.txt", "--data", root / "data", "--out", root / "run") == 0
    return root


def test_synth_matches_generator(tmp_path):
    assert run("synth", "--out", tmp_path, "--scenes", 1, "--resolution", "32x32", "--layout", "plane",
               "--seed", 5, "--baseline", 1.5) == 0
    data = read_scene_dir(scene_dirs(tmp_path)[0])
    scene = generate_scene(SceneSpec(layout="plane", seed=5, resolution=(32, 32), baseline=1.5, texture_freq=1.5,
                                     octaves=4))
    np.testing.assert_allclose(data.cams[1].t, scene.cams[1].t, atol=1e-11)
    assert np.abs(data.images[0] - scene.views[0].image).max() <= 0.5 / 255 + 1e-12


def test_train_writes_checkpoints(trained):
    for name in ("final.ckpt", "best.ckpt", "metrics.csv", "config.txt"):
        assert (trained / "run" / name).exists()


def test_depth_is_deterministic(trained, tmp_path):
    scene = trained / "data" / "scene_0000"
    for out in ("a", "b"):
        assert run("depth", "--ckpt", trained / "run" / "final.ckpt", "--scene", scene, "--ref", 1,
                   "--out", tmp_path / out) == 0
    for name in ("depth_0001.pfm", "conf_0001.pfm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    d = read_pfm(tmp_path / "a" / "depth_0001.pfm")
    assert d.shape == (32, 32) and np.isfinite(d).all()


def test_fuse_gt_depths_and_eval(trained, tmp_path, capsys):
    scene = trained / "data" / "scene_0001"
    assert run("fuse", "--depths", scene / "depths", "--scene", scene, "--out", tmp_path / "gt.ply",
               "--merge", "reference") == 0
    cloud = read_ply(tmp_path / "gt.ply")
    assert len(cloud) > 0
    assert run("eval-cloud", "--est", tmp_path / "gt.ply", "--gt", tmp_path / "gt.ply") == 0
    assert "overall\t0" in capsys.readouterr().out


def test_eval_depth_prints_metrics(tmp_path, capsys):
    gt = np.full((4, 4), 3.0, np.float32)
    est = gt.copy()
    est[:2] += 0.5
    write_pfm(tmp_path / "gt.pfm", gt)
    write_pfm(tmp_path / "est.pfm", est)
    assert run("eval-depth", "--est", tmp_path / "est.pfm", "--gt", tmp_path / "gt.pfm", "--thresholds",
               "0.25,1") == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    assert float(out["prec@0.25"]) == 0.5 and float(out["prec@1"]) == 1.0
    assert float(out["mae"]) == pytest.approx(0.25)


def test_curvature_and_scalemap_dumps(trained, tmp_path):
    image = trained / "data" / "scene_0000" / "images" / "0000.png"
    assert run("curvature", "--image", image, "--epipole", "100,16,1", "--sigma", 1.5,
               "--out", tmp_path / "c.pfm") == 0
    assert read_pfm(tmp_path / "c.pfm").shape == (32, 32)
    assert run("scalemap", "--ckpt", trained / "run" / "final.ckpt", "--image", image, "--epipole", "100,16,1",
               "--out", tmp_path / "s.png") == 0
    s = read_png(tmp_path / "s.png")
    assert s.shape[-2:] == (32, 32)


def test_usage_errors_exit_2(capsys):
    for argv in (["depth", "--bogus"], ["frobnicate"], ["curvature", "--image", "x.png", "--epipole", "1,2",
                                                       "--out", "y.pfm"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_operational_errors_exit_1(tmp_path, capsys):
    assert run("depth", "--ckpt", tmp_path / "none.ckpt", "--scene", tmp_path, "--out", tmp_path / "o") == 1
    assert run("train", "--data", tmp_path, "--out", tmp_path / "run") == 1
    (tmp_path / "bad.pfm").write_bytes(b"xx")
    assert run("eval-depth", "--est", tmp_path / "bad.pfm", "--gt", tmp_path / "bad.pfm") == 1
    assert "error:" in capsys.readouterr().err
