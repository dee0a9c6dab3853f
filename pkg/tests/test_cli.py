import json

import numpy as np
import pytest
import yaml

from scaled.cli import EXIT_JOB, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from scaled.frame import FramePlanar
from scaled.media import write_frames


@pytest.fixture(scope="module")
def clip(tmp_path_factory, natural_frames):
    """A 256x256, 10-frame 4:2:0 clip made of shifted natural frames."""
    base = natural_frames[0]
    frames = [FramePlanar(*(np.roll(p, 3 * i, axis=1) for p in base.planes)) for i in range(10)]
    return write_frames(frames, tmp_path_factory.mktemp("media") / "clip.y4m", layout="420")


@pytest.fixture(scope="module")
def small_clip(tmp_path_factory, natural_frames):
    frames = [FramePlanar(*(p[40:104, 60:124] for p in natural_frames[i].planes)) for i in range(2)]
    return write_frames(frames, tmp_path_factory.mktemp("media") / "small.y4m", layout="420")


def config(tmp_path, **sections):
    data = {"seed": 0, "out": str(tmp_path / "out"), "codec": {"backend": "toy"}}
    data.update(sections)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return str(path)


class TestCommon:
    def test_print_config(self, tmp_path, capsys):
        assert main(["train", "--config", config(tmp_path), "--seed", "9", "--print-config"]) == EXIT_OK
        printed = yaml.safe_load(capsys.readouterr().out)
        assert printed["seed"] == 9

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("trian: {}\n")
        assert main(["prepare", "--config", str(path)]) == EXIT_USAGE

    def test_usage_error(self):
        assert main(["frobnicate"]) == EXIT_USAGE


class TestPrepare:
    def test_patch_count_and_manifest(self, tmp_path, clip):
        cfg = config(tmp_path, dataset={"sources": [{"path": str(clip)}], "patch": 64, "stride": 64})
        assert main(["prepare", "--config", cfg]) == EXIT_OK
        manifest = json.loads((tmp_path / "out" / "dataset" / "manifest.json").read_text())
        assert manifest["patches"] == 160
        assert manifest["train"]["count"] + manifest["holdout"]["count"] == 160
        assert main(["prepare", "--config", cfg]) == EXIT_OK
        again = json.loads((tmp_path / "out" / "dataset" / "manifest.json").read_text())
        assert again == manifest

    def test_missing_source_named(self, tmp_path, caplog):
        cfg = config(tmp_path, dataset={"sources": [{"path": "missing.y4m"}]})
        assert main(["prepare", "--config", cfg]) == EXIT_USAGE
        assert "missing.y4m" in caplog.text

    def test_provenance_written(self, tmp_path, clip):
        cfg = config(tmp_path, dataset={"sources": [{"path": str(clip)}]})
        main(["prepare", "--config", cfg])
        prov = json.loads((tmp_path / "out" / "prepare.provenance.json").read_text())
        assert prov["codec"]["backend"] == "toy"


class TestTrain:
    def prepared(self, tmp_path, clip, **train):
        t = {"strategies": ["d-only", "scaled-d"], "scales": ["1/2"], "qps": [30, 40], "steps": 2,
             "hidden_channels": 2}
        t.update(train)
        cfg = config(tmp_path, dataset={"sources": [{"path": str(clip)}], "patch": 64, "stride": 64}, train=t)
        assert main(["prepare", "--config", cfg]) == EXIT_OK
        return cfg

    def test_grid_and_resume(self, tmp_path, clip):
        cfg = self.prepared(tmp_path, clip)
        assert main(["train", "--config", cfg]) == EXIT_OK
        ckpts = sorted(p.name for p in (tmp_path / "out" / "checkpoints").iterdir())
        assert ckpts == ["d-only_s1-2_qp30.ckpt", "d-only_s1-2_qp40.ckpt",
                         "scaled-d_s1-2_qp30.ckpt", "scaled-d_s1-2_qp40.ckpt"]
        stamp = {p: p.stat().st_mtime_ns for p in (tmp_path / "out" / "checkpoints").iterdir()}
        assert main(["train", "--config", cfg]) == EXIT_OK
        assert {p: p.stat().st_mtime_ns for p in stamp} == stamp

    def test_codec_cells_refuse_without_codec(self, tmp_path, clip):
        cfg = self.prepared(tmp_path, clip)
        data = yaml.safe_load(open(cfg))
        del data["codec"]
        open(cfg, "w").write(yaml.safe_dump(data))
        assert main(["train", "--config", cfg]) == EXIT_JOB
        names = sorted(p.name for p in (tmp_path / "out" / "checkpoints").iterdir())
        assert names == ["d-only_s1-2_qp30.ckpt", "d-only_s1-2_qp40.ckpt"]

    def test_needs_prepare(self, tmp_path):
        assert main(["train", "--config", config(tmp_path)]) == EXIT_USAGE


class TestSweepReport:
    def test_baseline_sweep_and_report(self, tmp_path, small_clip, capsys):
        seq = [{"path": str(small_clip), "name": "small", "dataset": "mini"}]
        cfg = config(tmp_path, sweep={"sequences": seq, "filters": ["lanczos", "bicubic"],
                                      "scales": ["1/1", "1/2"], "qps": [17, 23, 29, 35]},
                     report={"reference": "lanczos", "metrics": ["psnr_y"]})
        assert main(["sweep", "--config", cfg]) == EXIT_OK
        csv_path = tmp_path / "out" / "sweep" / "rd_results.csv"
        first = csv_path.read_text()
        assert len(first.strip().splitlines()) == 1 + 2 * 2 * 4
        assert main(["sweep", "--config", cfg]) == EXIT_OK
        assert csv_path.read_text() == first
        assert main(["report", "--config", cfg]) == EXIT_OK
        out = capsys.readouterr().out
        assert "bicubic" in out
        table = (tmp_path / "out" / "report" / "bd_br.csv").read_text()
        assert main(["report", "--config", cfg]) == EXIT_OK
        assert (tmp_path / "out" / "report" / "bd_br.csv").read_text() == table
        assert (tmp_path / "out" / "report" / "curves" / "small.psnr_y.csv").exists()

    def test_report_identical_sweeps_zero(self, tmp_path, small_clip):
        from scaled import evaluate as ev
        from scaled.verify import synthetic_curve

        pts = []
        for filt, factor in (("lanczos", 1.0), ("same", 1.0), ("worse", 1.1)):
            for p in synthetic_curve(factor):
                p.sequence, p.filter = "small", filt
                pts.append(p)
        (tmp_path / "out" / "sweep").mkdir(parents=True)
        (tmp_path / "out" / "sweep" / "rd_results.csv").write_text(ev.rd_csv_text(pts))
        cfg = config(tmp_path, report={"metrics": ["psnr_y"]})
        assert main(["report", "--config", cfg]) == EXIT_OK
        rows = (tmp_path / "out" / "report" / "bd_br.csv").read_text().splitlines()[1:]
        values = {r.split(",")[1]: float(r.split(",")[4]) for r in rows}
        assert values["same"] == 0.0
        assert values["worse"] == pytest.approx(10.0, abs=0.1)

    def test_report_without_reference(self, tmp_path):
        from scaled import evaluate as ev
        from scaled.verify import synthetic_curve

        pts = synthetic_curve()
        for p in pts:
            p.sequence, p.filter = "s", "bicubic"
        (tmp_path / "out" / "sweep").mkdir(parents=True)
        (tmp_path / "out" / "sweep" / "rd_results.csv").write_text(ev.rd_csv_text(pts))
        assert main(["report", "--config", config(tmp_path)]) == EXIT_JOB

    def test_learned_needs_checkpoints(self, tmp_path, small_clip):
        cfg = config(tmp_path, sweep={"sequences": [{"path": str(small_clip)}], "filters": ["learned"],
                                      "scales": ["1/2"], "qps": [20]})
        assert main(["sweep", "--config", cfg]) == EXIT_USAGE


class TestVerify:
    def test_passes(self, capsys):
        assert main(["verify", "--quick"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "5/5 suites passed" in out

    def test_perturbed_jacobian_sign_fails(self, monkeypatch, capsys):
        from scaled import verify
        from scaled.surrogate import closed_form_vjp

        def flipped(eps, g):
            # I + eps (eps - mean)^T / (N sigma^2) instead of I - ...
            return 2 * np.ravel(g) - closed_form_vjp(eps, g)

        ok, _ = verify.jacobian_suite(20, closed_form=flipped)
        assert not ok
        monkeypatch.setattr(verify, "closed_form_vjp", flipped)
        monkeypatch.setattr(verify.jacobian_suite, "__defaults__", (100, flipped, 0))
        assert main(["verify", "--quick"]) == EXIT_VERIFY
        assert "[FAIL] jacobian" in capsys.readouterr().out
