import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from noiseopt import cli, noisefile
from noiseopt.errors import ConfigError


def minimal_config(out_dir, **overrides) -> dict:
    doc = {
        "run": {"seed": 3, "out_dir": str(out_dir), "snapshot_every": 5},
        "noise": {"batch": 4, "channels": 1, "height": 8, "width": 8, "alpha": 0.0},
        "generator": {"kind": "linear", "template": "gray"},
        "objective": {
            "metric": "pairwise_cosine",
            "extractor": "pixel_patches",
            "extractor_params": {"grid": 2},
            "lambda_div": 1.0,
            "lambda_reg": 0.01,
            "tau_s": 1e9,
            "tau_d": 2.0,
        },
        "optimizer": {"learning_rate": 1.0, "clip_norm": 0.5, "max_iters": 10},
    }
    for section, values in overrides.items():
        doc.setdefault(section, {}).update(values)
    return doc


def write_config(tmp_path, doc, name="run.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


class TestConfigRoundTrip:
    def test_parse_serialize_parse_is_fixed_point(self, tmp_path):
        path = write_config(tmp_path, minimal_config(tmp_path / "out"))
        spec = cli.load_config(path)
        dumped = cli.dump_config(spec)
        spec2 = cli.RunSpec.from_dict(yaml.safe_load(dumped))
        assert spec == spec2
        assert cli.dump_config(spec2) == dumped

    def test_unknown_section_named_in_error(self, tmp_path):
        doc = minimal_config(tmp_path / "out")
        doc["extras"] = {"x": 1}
        with pytest.raises(ConfigError, match="extras"):
            cli.RunSpec.from_dict(doc)

    def test_unknown_field_named_in_error(self, tmp_path):
        doc = minimal_config(tmp_path / "out")
        doc["optimizer"]["momentum"] = 0.9
        with pytest.raises(ConfigError, match="optimizer.momentum"):
            cli.RunSpec.from_dict(doc)

    def test_bad_value_rejected(self, tmp_path):
        doc = minimal_config(tmp_path / "out")
        doc["optimizer"]["learning_rate"] = -1.0
        with pytest.raises(ConfigError):
            cli.RunSpec.from_dict(doc)

    def test_yaml_float_strings_coerced(self, tmp_path):
        # pyyaml reads "1.0e9" (no sign) as a string; the parser must cope
        doc = minimal_config(tmp_path / "out")
        doc["objective"]["tau_s"] = "1.0e9"
        spec = cli.RunSpec.from_dict(doc)
        assert spec.tau_s == 1.0e9

    def test_unparseable_number_names_field(self, tmp_path):
        doc = minimal_config(tmp_path / "out")
        doc["objective"]["tau_s"] = "huge"
        with pytest.raises(ConfigError, match="objective.tau_s"):
            cli.RunSpec.from_dict(doc)


class TestRun:
    def test_minimal_run_artifact_cardinality(self, tmp_path):
        spec = cli.RunSpec.from_dict(minimal_config(tmp_path / "out"))
        out = cli.run_spec(spec)
        with open(out / cli.METRICS_NAME, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10  # one row per iteration
        assert (out / "noise_final.dnz").exists()
        assert (out / "noise_init.dnz").exists()
        assert (out / cli.SUMMARY_NAME).exists()
        manifest = json.loads((out / cli.MANIFEST_NAME).read_text())
        assert cli.METRICS_NAME in manifest["files"]
        assert "noise_final.dnz" in manifest["files"]

    def test_rerun_is_byte_identical_excluding_wall_time(self, tmp_path):
        spec = cli.RunSpec.from_dict(minimal_config(tmp_path / "out"))
        out = cli.run_spec(spec)
        names = ("noise_init.dnz", "noise_final.dnz", "noise_snapshot_00005.dnz",
                 cli.SUMMARY_NAME, cli.MANIFEST_NAME, cli.CONFIG_ECHO_NAME)
        first = {n: (out / n).read_bytes() for n in names}
        first_metrics_hash = json.loads(first[cli.MANIFEST_NAME])["files"][cli.METRICS_NAME]

        out2 = cli.run_spec(spec)  # rerun in place
        assert out2 == out
        for n in names:
            assert (out / n).read_bytes() == first[n], n
        # metrics hash agrees because hashing strips the wall_time column
        rerun_manifest = json.loads((out / cli.MANIFEST_NAME).read_text())
        assert rerun_manifest["files"][cli.METRICS_NAME] == first_metrics_hash

    def test_breakdown_reconstruction_on_every_row(self, tmp_path):
        spec = cli.RunSpec.from_dict(minimal_config(tmp_path / "out"))
        out = cli.run_spec(spec)
        with open(out / cli.METRICS_NAME, newline="") as fh:
            for row in csv.DictReader(fh):
                total = (
                    -spec.lambda_q * float(row["reward_mean"])
                    + spec.lambda_min * float(row["quality_hinge"])
                    + spec.lambda_div * float(row["diversity_hinge"])
                    + spec.lambda_reg * float(row["reg_term"])
                )
                assert abs(float(row["total"]) - total) < 1e-10

    def test_sequential_mode_writes_per_image_rows(self, tmp_path):
        doc = minimal_config(
            tmp_path / "out",
            optimizer={"mode": "sequential", "max_iters": 4},
            noise={"batch": 3},
            generator={"kind": "lowpass_painter"},
        )
        spec = cli.RunSpec.from_dict(doc)
        out = cli.run_spec(spec)
        with open(out / cli.METRICS_NAME, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["image_index"] for r in rows} == {"1", "2"}
        values, meta = noisefile.read_noise(out / "noise_final.dnz")
        assert values.shape == (3, 1, 8, 8)

    def test_alpha_sweep_reproduces_diversity_ordering(self, tmp_path):
        """Three-config sweep: final v_B non-decreasing in alpha on the
        low-pass painter for most seeds."""
        ordered = 0
        seeds = range(5)
        for seed in seeds:
            finals = {}
            for alpha in (0.0, 0.2, 0.5):
                doc = minimal_config(
                    tmp_path / f"s{seed}a{alpha}",
                    run={"seed": seed, "snapshot_every": 0},
                    noise={"height": 16, "width": 16, "alpha": alpha},
                    generator={"kind": "lowpass_painter"},
                    optimizer={"learning_rate": 10.0, "clip_norm": 0.1, "max_iters": 30},
                )
                out = cli.run_spec(cli.RunSpec.from_dict(doc))
                with open(out / cli.METRICS_NAME, newline="") as fh:
                    finals[alpha] = float(list(csv.DictReader(fh))[-1]["v_b"])
            ordered += bool(finals[0.5] >= finals[0.2] >= finals[0.0])
        assert ordered >= 0.8 * len(seeds)

    def test_extra_logged_metrics_column(self, tmp_path):
        doc = minimal_config(tmp_path / "out")
        doc["log_metrics"] = ["vendi"]
        spec = cli.RunSpec.from_dict(doc)
        out = cli.run_spec(spec)
        with open(out / cli.METRICS_NAME, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert all(1.0 <= float(r["vb_vendi"]) <= 4.0 for r in rows)


class TestAnalyzeAndPlot:
    @pytest.fixture()
    def run_dir(self, tmp_path):
        doc = minimal_config(
            tmp_path / "out",
            generator={"kind": "lowpass_painter"},
            noise={"height": 16, "width": 16},
            optimizer={"learning_rate": 10.0, "clip_norm": 0.1, "max_iters": 12},
            run={"snapshot_every": 3},
        )
        return cli.run_spec(cli.RunSpec.from_dict(doc))

    def test_analyze_writes_bands_and_spectrum(self, run_dir):
        cli.analyze(run_dir, n_bins=8)
        bands = (run_dir / "bands.csv").read_text().splitlines()
        assert bands[0] == "iteration,band_low,band_mid,band_high"
        assert len(bands) >= 4
        spectrum = (run_dir / "spectrum.csv").read_text().splitlines()
        assert spectrum[0] == "bin_center,power_init,power_final,cells"

    def test_scaling_plot_sidecar_round_trip(self, run_dir):
        out = cli.plot(run_dir / cli.METRICS_NAME, "scaling")
        sidecar = out.with_suffix(out.suffix + ".data.csv")
        assert out.exists() and sidecar.exists()
        with open(run_dir / cli.METRICS_NAME, newline="") as fh:
            metrics = list(csv.DictReader(fh))
        with open(sidecar, newline="") as fh:
            data = list(csv.DictReader(fh))
        assert len(data) == len(metrics)
        for m, d in zip(metrics, data):
            assert d["v_b"] == m["v_b"]
            assert d["iteration"] == m["iteration"]

    def test_bands_plot_has_three_series(self, run_dir):
        cli.analyze(run_dir, n_bins=8)
        out = cli.plot(run_dir / "bands.csv", "bands")
        with open(out.with_suffix(out.suffix + ".data.csv"), newline="") as fh:
            header = next(csv.reader(fh))
        assert header == ["iteration", "band_low", "band_mid", "band_high"]

    def test_spectrum_plot(self, run_dir):
        cli.analyze(run_dir, n_bins=8)
        out = cli.plot(run_dir / "spectrum.csv", "spectrum")
        assert out.exists()

    def test_missing_columns_named(self, run_dir):
        with pytest.raises(ConfigError, match="bin_center"):
            cli.plot(run_dir / cli.METRICS_NAME, "spectrum")


class TestMainEntryPoint:
    def test_run_and_determinism_via_subprocess(self, tmp_path):
        doc = minimal_config(tmp_path / "ignored")
        cfg = write_config(tmp_path, doc)
        for sub in ("a", "b"):
            code = subprocess.run(
                [sys.executable, "-m", "noiseopt.cli", "run", str(cfg), "--out", str(tmp_path / sub)],
                capture_output=True,
                text=True,
            )
            assert code.returncode == 0, code.stderr
        fa = (tmp_path / "a" / "run" / "noise_final.dnz").read_bytes()
        fb = (tmp_path / "b" / "run" / "noise_final.dnz").read_bytes()
        assert fa == fb

    def test_invalid_config_exits_nonzero_with_field(self, tmp_path, capsys):
        doc = minimal_config(tmp_path / "out")
        doc["optimizer"]["momentum"] = 1
        cfg = write_config(tmp_path, doc)
        code = cli.main(["run", str(cfg)])
        assert code == 2
        assert "optimizer.momentum" in capsys.readouterr().err

    def test_seed_override_changes_artifacts(self, tmp_path):
        doc = minimal_config(tmp_path / "out")
        cfg = write_config(tmp_path, doc)
        assert cli.main(["run", str(cfg), "--seed", "3", "--out", str(tmp_path / "s3")]) == 0
        assert cli.main(["run", str(cfg), "--seed", "4", "--out", str(tmp_path / "s4")]) == 0
        a = (tmp_path / "s3" / "run" / "noise_init.dnz").read_bytes()
        b = (tmp_path / "s4" / "run" / "noise_init.dnz").read_bytes()
        assert a != b

    def test_jobs_fan_out(self, tmp_path):
        cfgs = []
        for i in range(2):
            doc = minimal_config(tmp_path / f"out{i}")
            doc["run"]["seed"] = i
            cfgs.append(str(write_config(tmp_path, doc, name=f"cfg{i}.yaml")))
        assert cli.main(["run", *cfgs, "--jobs", "2", "--out", str(tmp_path / "fan")]) == 0
        assert (tmp_path / "fan" / "cfg0" / "noise_final.dnz").exists()
        assert (tmp_path / "fan" / "cfg1" / "noise_final.dnz").exists()


class TestNoiseFile:
    def test_round_trip_bit_exact(self, tmp_path):
        values = np.random.default_rng(0).normal(size=(2, 1, 4, 4)).astype(np.float32)
        path = tmp_path / "x.dnz"
        noisefile.write_noise(path, values, seed=9, alpha=0.2, iteration=7)
        back, meta = noisefile.read_noise(path)
        assert back.tobytes() == values.tobytes()
        assert meta == {
            "alpha": 0.2, "dtype": "f32", "iteration": 7, "seed": 9, "shape": [2, 1, 4, 4]
        }

    def test_magic_bytes(self, tmp_path):
        path = tmp_path / "x.dnz"
        noisefile.write_noise(path, np.zeros((1, 1, 2, 2)), 0, 0.0, 0)
        assert path.read_bytes()[:4] == b"DNZ1"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.dnz"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(Exception, match="magic"):
            noisefile.read_noise(path)
