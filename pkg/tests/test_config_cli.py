import json
import os

import numpy as np
import pytest

from stpd import config as cfgmod
from stpd import recon, simulate, tensorio
from stpd.cli import run


class TestConfig:
    def test_fully_defaulted_reproduces_full_scale_shapes(self, tmp_path):
        p = tmp_path / "empty.toml"
        p.write_text("")
        cfg = cfgmod.load_config(p)
        assert cfg.geometry.sinogram_shape == (160, 128)
        assert cfg.geometry.image_shape == (128, 128)
        assert cfg.schedule.n_frames == 18
        assert cfg.schedule.total_duration == 3600.0
        assert cfg.network.n_blocks == 10
        assert cfg.network.n_primal == 3 and cfg.network.n_dual == 3
        assert cfg.train.base_lr == 8e-4 and cfg.train.lr_decay == 0.99
        assert cfg.train.epochs == 200 and cfg.train.batch_size == 2
        assert cfg.kemst.window == 15 and cfg.kemst.k_neighbors == 48
        assert cfg.scan_model().frame_targets[0] == 5000.0
        assert cfg.scan_model().frame_targets[-1] == 20000.0

    def test_unknown_keys_rejected(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[geometry]\nn_veiws = 10\n")
        with pytest.raises(cfgmod.ConfigError, match="unknown key.*n_veiws"):
            cfgmod.load_config(p)
        p.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(cfgmod.ConfigError, match="unknown key"):
            cfgmod.load_config(p)

    def test_explicit_regions_parsed(self, tmp_path):
        p = tmp_path / "regions.toml"
        p.write_text("""
[geometry]
image_size = 32
n_views = 24
n_bins = 32

[[phantom.regions]]
name = "background"
center = [0.0, 0.0]
radii = [14.0, 14.0]
kinetics = { K1 = 0.1, k2 = 0.3 }

[[phantom.regions]]
name = "tumor"
center = [3.0, 2.0]
radii = [2.0, 2.0]
angle_deg = 15.0
kinetics = { K1 = 0.3, k2 = 0.4, k3 = 0.1 }
""")
        cfg = cfgmod.load_config(p)
        spec = cfg.phantom_spec(seed=0)
        assert [r.name for r in spec.regions] == ["background", "tumor"]
        assert spec.regions[1].kinetics.k3 == 0.1
        series, rmap = simulate.make_phantom(spec, cfg.schedule)
        assert series.shape == (18, 32, 32)

    def test_bad_region_kinetics_rejected(self, tmp_path):
        p = tmp_path / "neg.toml"
        p.write_text("""
[[phantom.regions]]
name = "x"
center = [0.0, 0.0]
radii = [4.0, 4.0]
kinetics = { K1 = -0.5, k2 = 0.3 }
""")
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load_config(p)


DESK_TOML = """
[geometry]
n_views = 24
n_bins = 16
image_size = 16

[schedule]
durations = [600.0, 600.0, 600.0, 600.0]

[network]
n_blocks = 2
hidden_channels = 4

[train]
epochs = 2
batch_size = 2
seed = 3

[kemst]
k_neighbors = 8
window = 3
"""


@pytest.fixture
def desk_config(tmp_path):
    p = tmp_path / "desk.toml"
    p.write_text(DESK_TOML)
    return str(p)


class TestCli:
    def test_usage_errors_exit_1(self, capsys):
        assert run(["--bogus"]) == 1
        assert run(["reconstruct", "--method", "sorcery", "--input", "x",
                    "--geom-config", "y", "--out", "z"]) == 1

    def test_runtime_errors_exit_2(self, desk_config, tmp_path, capsys):
        rc = run(["reconstruct", "--method", "mlem", "--input",
                  str(tmp_path / "missing"), "--geom-config", desk_config,
                  "--out", str(tmp_path / "o.stp")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_simulate_deterministic(self, desk_config, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert run(["simulate", "--config", desk_config, "--out", a,
                    "--seed", "7", "--threads", "1"]) == 0
        assert run(["simulate", "--config", desk_config, "--out", b,
                    "--seed", "7", "--threads", "1"]) == 0
        for f in ["truth.stp", "counts.stp", "background.stp",
                  "region_map.stp", "meta.json"]:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_pipeline_artifacts_compose(self, desk_config, tmp_path):
        scan = str(tmp_path / "scan")
        assert run(["simulate", "--config", desk_config, "--out", scan,
                    "--seed", "5"]) == 0

        # mlem with explicit iteration count matches the library call
        out_mlem = str(tmp_path / "mlem.stp")
        assert run(["reconstruct", "--method", "mlem", "--input", scan,
                    "--geom-config", desk_config, "--iters", "8",
                    "--out", out_mlem]) == 0
        counts = tensorio.read_tensor(os.path.join(scan, "counts.stp"))
        background = tensorio.read_tensor(os.path.join(scan, "background.stp"))
        meta = json.loads((tmp_path / "scan" / "meta.json").read_text())
        g = cfgmod.load_config(desk_config).geometry
        expected = recon.mlem(counts, g, background, n_iter=8)
        expected /= np.asarray(meta["count_scales"])[:, None, None]
        assert np.allclose(tensorio.read_tensor(out_mlem), expected, rtol=1e-12)

        out_kem = str(tmp_path / "kem.stp")
        assert run(["reconstruct", "--method", "kemst", "--input", scan,
                    "--geom-config", desk_config, "--out", out_kem]) == 0

        report = str(tmp_path / "report")
        assert run(["evaluate", "--truth", os.path.join(scan, "truth.stp"),
                    "--recon", f"{out_mlem},{out_kem}", "--labels", "mlem,kemst",
                    "--roi", os.path.join(scan, "tumor_roi.stp"),
                    "--report", report]) == 0
        for f in ["metrics.csv", "summary.csv", "tacs.csv"]:
            assert os.path.isfile(os.path.join(report, f))
        lines = open(os.path.join(report, "metrics.csv")).read().strip().split("\n")
        assert len(lines) == 1 + 2 * 4

    def test_train_and_network_reconstruct(self, desk_config, tmp_path):
        data = tmp_path / "data"
        for seed, name in [(1, "s1"), (2, "s2")]:
            assert run(["simulate", "--config", desk_config,
                        "--out", str(data / name), "--seed", str(seed)]) == 0
        out = str(tmp_path / "run")
        assert run(["train", "--config", desk_config, "--data", str(data),
                    "--out", out, "--threads", "1"]) == 0
        assert os.path.isdir(os.path.join(out, "final"))
        assert os.path.isfile(os.path.join(out, "loss_history.csv"))

        rec = str(tmp_path / "net.stp")
        assert run(["reconstruct", "--method", "stpdnet", "--input",
                    str(data / "s1"), "--geom-config", desk_config,
                    "--model", os.path.join(out, "final"), "--out", rec]) == 0
        arr = tensorio.read_tensor(rec)
        assert arr.shape == (4, 16, 16)

        # lpd method must refuse a temporal-extent-3 checkpoint
        rc = run(["reconstruct", "--method", "lpd", "--input", str(data / "s1"),
                  "--geom-config", desk_config,
                  "--model", os.path.join(out, "final"),
                  "--out", str(tmp_path / "l.stp")])
        assert rc == 2

    def test_resume_continues_from_recorded_epoch(self, desk_config, tmp_path):
        data = tmp_path / "data"
        for seed, name in [(1, "s1"), (2, "s2")]:
            assert run(["simulate", "--config", desk_config,
                        "--out", str(data / name), "--seed", str(seed)]) == 0
        first = str(tmp_path / "first")
        assert run(["train", "--config", desk_config, "--data", str(data),
                    "--out", first]) == 0
        assert json.loads(open(os.path.join(first, "state.json")).read()) == \
            {"epochs_completed": 2}

        cfg4 = tmp_path / "desk4.toml"
        cfg4.write_text(DESK_TOML.replace("epochs = 2", "epochs = 4"))
        resumed = str(tmp_path / "resumed")
        assert run(["train", "--config", str(cfg4), "--data", str(data),
                    "--out", resumed, "--resume", first]) == 0
        lines = open(os.path.join(resumed, "loss_history.csv")).read().strip().split("\n")
        epochs = {line.split(",")[1] for line in lines[1:]}
        assert epochs == {"2", "3"}

    def test_model_required_for_network_methods(self, desk_config, tmp_path):
        rc = run(["reconstruct", "--method", "stpdnet", "--input", str(tmp_path),
                  "--geom-config", desk_config, "--out", str(tmp_path / "x.stp")])
        assert rc == 2

    def test_env_threads_respected(self, desk_config, tmp_path, monkeypatch):
        monkeypatch.setenv("STPD_THREADS", "1")
        assert run(["simulate", "--config", desk_config,
                    "--out", str(tmp_path / "s"), "--seed", "1"]) == 0
        monkeypatch.setenv("STPD_THREADS", "0")
        assert run(["simulate", "--config", desk_config,
                    "--out", str(tmp_path / "s2"), "--seed", "1"]) == 1
