"""Configuration-driven experiment runner.

``noiseopt run <config.yaml>`` executes one optimization run per config and
persists: a metrics table (CSV, one row per iteration), noise tensors at the
snapshot cadence plus initial/final, a machine-readable summary, and a
manifest with content hashes. ``analyze`` recomputes band-energy series and
radial power spectra from the snapshots; ``plot`` renders a metrics or
analysis file with a sidecar data file so no consumer ever parses pixels.

Identical config and seed reproduce every artifact byte for byte; the only
exception is the metrics table's wall_time column, which the manifest hash
strips before digesting.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import multiprocessing
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import generator as gen_mod
from . import noise_init, noisefile, numerics, objective, optimizer, spectra
from .errors import ConfigError, NoiseOptError

METRICS_NAME = "metrics.csv"
SUMMARY_NAME = "summary.json"
MANIFEST_NAME = "manifest.json"
CONFIG_ECHO_NAME = "config_resolved.yaml"


@dataclass
class RunSpec:
    """One experiment: noise source, generator, objective, optimizer."""

    seed: int = 0
    out_dir: str = "runs/run"
    snapshot_every: int = 0  # 0 disables snapshots beyond init/final
    batch: int = 4
    channels: int = 1
    height: int = 16
    width: int = 16
    alpha: float = 0.0
    generator_kind: str = "lowpass_painter"
    generator_height: int | None = None
    generator_width: int | None = None
    template: str = "gray"
    generator_params: dict = field(default_factory=dict)
    metric: str = "pairwise_cosine"
    extractor: str = "pixel_patches"
    extractor_params: dict = field(default_factory=lambda: {"grid": 2})
    reward: str = "template_mse"
    lambda_q: float = 1.0
    lambda_min: float = 0.0
    lambda_div: float = 1.0
    lambda_reg: float = 0.01
    tau_s: float = 1e9
    tau_d: float = 1e9
    mode: str = "batch"
    learning_rate: float = 10.0
    clip_norm: float = 0.1
    max_iters: int = 100
    revert_threshold: float | None = None
    stop_rule: str = "thresholds"
    stop_value: float | None = None
    log_metrics: list = field(default_factory=list)

    _SECTIONS = {
        "run": ("seed", "out_dir", "snapshot_every"),
        "noise": ("batch", "channels", "height", "width", "alpha"),
        "generator": ("generator_kind", "generator_height", "generator_width",
                      "template", "generator_params"),
        "objective": ("metric", "extractor", "extractor_params", "reward",
                      "lambda_q", "lambda_min", "lambda_div", "lambda_reg",
                      "tau_s", "tau_d"),
        "optimizer": ("mode", "learning_rate", "clip_norm", "max_iters",
                      "revert_threshold", "stop_rule", "stop_value"),
    }
    _SECTION_KEYS = {
        "generator_kind": "kind",
        "generator_height": "height",
        "generator_width": "width",
        "generator_params": "params",
    }

    _FLOAT_FIELDS = ("alpha", "lambda_q", "lambda_min", "lambda_div", "lambda_reg",
                     "tau_s", "tau_d", "learning_rate", "clip_norm")
    _OPT_FLOAT_FIELDS = ("revert_threshold", "stop_value")
    _INT_FIELDS = ("seed", "snapshot_every", "batch", "channels", "height", "width",
                   "max_iters")
    _OPT_INT_FIELDS = ("generator_height", "generator_width")

    @staticmethod
    def _cast(field_name: str, section: str, value, caster, optional: bool):
        if value is None and optional:
            return None
        try:
            return caster(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(
                f"{section}.{field_name}: expected a {caster.__name__}, got {value!r} "
                f"(YAML floats need e.g. 1.0e+9, not 1.0e9)"
            ) from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunSpec":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
        kwargs = {}
        known_sections = set(cls._SECTIONS) | {"log_metrics"}
        for section in doc:
            if section not in known_sections:
                raise ConfigError(f"unknown config section {section!r}")
        for section, fields in cls._SECTIONS.items():
            sub = doc.get(section, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            reverse = {cls._SECTION_KEYS.get(f, f): f for f in fields}
            for key, value in sub.items():
                if key not in reverse:
                    raise ConfigError(f"unknown field {section}.{key}")
                name = reverse[key]
                if name in cls._FLOAT_FIELDS:
                    value = cls._cast(key, section, value, float, False)
                elif name in cls._OPT_FLOAT_FIELDS:
                    value = cls._cast(key, section, value, float, True)
                elif name in cls._INT_FIELDS:
                    value = cls._cast(key, section, value, int, False)
                elif name in cls._OPT_INT_FIELDS:
                    value = cls._cast(key, section, value, int, True)
                kwargs[name] = value
        if "log_metrics" in doc:
            kwargs["log_metrics"] = list(doc["log_metrics"])
        try:
            spec = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        doc = {}
        for section, fields in self._SECTIONS.items():
            doc[section] = {
                self._SECTION_KEYS.get(f, f): getattr(self, f) for f in fields
            }
        doc["log_metrics"] = list(self.log_metrics)
        return doc

    def validate(self) -> None:
        if self.batch < 1:
            raise ConfigError("noise.batch must be >= 1")
        if self.mode == "batch" and self.batch < 2:
            raise ConfigError("noise.batch must be >= 2 in batch mode")
        if self.mode == "sequential" and self.batch < 2:
            raise ConfigError("noise.batch (the set size) must be >= 2 in sequential mode")
        for name in ("channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"noise.{name} must be >= 1")
        if self.alpha < 0:
            raise ConfigError("noise.alpha must be >= 0")
        if self.snapshot_every < 0:
            raise ConfigError("run.snapshot_every must be >= 0")
        # constructing the component specs performs their own validation
        self.objective_spec()
        self.generator_spec()
        self.optimizer_config()

    def generator_spec(self) -> gen_mod.GeneratorSpec:
        return gen_mod.GeneratorSpec(
            kind=self.generator_kind,
            height=self.generator_height or self.height,
            width=self.generator_width or self.width,
            template=self.template,
            params=dict(self.generator_params),
        )

    def objective_spec(self) -> objective.ObjectiveSpec:
        return objective.ObjectiveSpec(
            lambda_div=self.lambda_div,
            lambda_min=self.lambda_min,
            lambda_reg=self.lambda_reg,
            lambda_q=self.lambda_q,
            tau_s=self.tau_s,
            tau_d=self.tau_d,
            metric=self.metric,
            reward=gen_mod.RewardSpec(self.reward),
            extractor=self.extractor,
            extractor_params=dict(self.extractor_params),
        )

    def optimizer_config(self) -> optimizer.OptimizerConfig:
        return optimizer.OptimizerConfig(
            learning_rate=self.learning_rate,
            clip_norm=self.clip_norm,
            max_iters=self.max_iters,
            revert_threshold=self.revert_threshold,
            seed=self.seed,
            mode=self.mode,
            stop_rule=self.stop_rule,
            stop_value=self.stop_value,
        )


def load_config(path) -> RunSpec:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return RunSpec.from_dict(doc or {})


def dump_config(spec: RunSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _metric_columns(spec: RunSpec) -> list:
    return [m for m in spec.log_metrics if m != spec.metric]


def _write_metrics(path, spec: RunSpec, rows, image_index=None) -> None:
    extra = _metric_columns(spec)
    header = [
        "iteration", "total", "reward_mean", "quality_hinge", "diversity_hinge",
        "reg_term", "v_b", "min_reward",
        *[f"vb_{m}" for m in extra],
        "grad_norm_pre", "grad_norm_post", "noise_delta_l2",
        "delta_energy_increment", "band_low", "band_mid", "band_high",
        "reverted", "wall_time",
    ]
    if image_index is not None:
        header.insert(0, "image_index")
    new_file = not Path(path).exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(header)
        for row in rows:
            b = row.breakdown
            record = [
                row.iteration, _fmt(b.total), _fmt(b.reward_mean), _fmt(b.quality_hinge),
                _fmt(b.diversity_hinge), _fmt(b.reg_term), _fmt(b.v_b), _fmt(b.min_reward),
                *[_fmt(b.extra.get(m, float("nan"))) for m in extra],
                _fmt(row.grad_norm_pre), _fmt(row.grad_norm_post),
                _fmt(row.noise_delta_l2), _fmt(row.delta_energy_increment),
                _fmt(row.band_energies[0]), _fmt(row.band_energies[1]),
                _fmt(row.band_energies[2]), int(row.reverted), _fmt(row.wall_time),
            ]
            if image_index is not None:
                record.insert(0, image_index)
            writer.writerow(record)


def _strip_wall_time(raw: bytes) -> bytes:
    """Metrics canonicalization for hashing: drop the wall_time column."""
    text = raw.decode("utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or "wall_time" not in rows[0]:
        return raw
    drop = rows[0].index("wall_time")
    out = io.StringIO()
    writer = csv.writer(out)
    for row in rows:
        writer.writerow(row[:drop] + row[drop + 1 :])
    return out.getvalue().encode("utf-8")


def _write_manifest(out: Path) -> None:
    entries = {}
    for p in sorted(out.iterdir()):
        if p.name == MANIFEST_NAME or not p.is_file():
            continue
        raw = p.read_bytes()
        canon = "raw"
        if p.name == METRICS_NAME:
            raw = _strip_wall_time(raw)
            canon = "drop-column:wall_time"
        entries[p.name] = {"sha256": hashlib.sha256(raw).hexdigest(), "canonicalization": canon}
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump({"files": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_spec(spec: RunSpec, out_dir=None) -> Path:
    """Execute one run and write its artifacts; returns the run directory."""
    out = Path(out_dir or spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("*.dnz"):
        stale.unlink()
    (out / METRICS_NAME).unlink(missing_ok=True)

    gen = spec.generator_spec()
    ospec = spec.objective_spec()
    cfg = spec.optimizer_config()

    white = noise_init.sample_white(
        numerics.SeededRng(spec.seed), spec.batch, spec.channels, spec.height, spec.width
    )
    z0 = (
        noise_init.colorize(white, noise_init.SpectralProfile(spec.alpha))
        if spec.alpha > 0
        else white
    )
    noisefile.write_noise(out / "noise_init.dnz", z0.values, spec.seed, spec.alpha, 0)

    summary: dict = {"config": spec.to_dict()}
    if spec.mode == "batch":
        final, record = optimizer.optimize_batch(
            z0, ospec, cfg, gen,
            snapshot_every=spec.snapshot_every or None,
            extra_metrics=tuple(_metric_columns(spec)),
        )
        _write_metrics(out / METRICS_NAME, spec, record.rows)
        for it, values in sorted(record.snapshots.items()):
            noisefile.write_noise(
                out / f"noise_snapshot_{it:05d}.dnz", values, spec.seed, spec.alpha, it
            )
        records = [record]
    else:
        build = optimizer.sequential_build(
            spec.batch, ospec, cfg, gen,
            (spec.channels, spec.height, spec.width),
            alpha=spec.alpha,
        )
        final = build.noise
        for idx, rec in enumerate(build.records, start=1):
            _write_metrics(out / METRICS_NAME, spec, rec.rows, image_index=idx)
        records = build.records

    noisefile.write_noise(
        out / "noise_final.dnz", final.values, spec.seed, spec.alpha,
        sum(r.iterations for r in records),
    )

    last_rows = records[-1].rows
    summary.update(
        {
            "iterations": sum(r.iterations for r in records),
            "stopped_early": records[-1].stopped_early,
            "error": records[-1].error,
            "final": dataclasses.asdict(last_rows[-1].breakdown) if last_rows else None,
        }
    )
    with open(out / SUMMARY_NAME, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / CONFIG_ECHO_NAME, "w", encoding="utf-8") as fh:
        fh.write(dump_config(spec))
    _write_manifest(out)
    return out


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


def analyze(run_dir, n_bins: int = 16) -> Path:
    """Band-energy series over snapshots plus radial spectra of init/final."""
    run = Path(run_dir)
    snaps = sorted(run.glob("noise_snapshot_*.dnz"))
    init_path = run / "noise_init.dnz"
    final_path = run / "noise_final.dnz"
    if not init_path.exists() or not final_path.exists():
        raise ConfigError(f"{run} does not look like a run directory (missing noise files)")

    if len(snaps) >= 2:
        arrays, iters = [], []
        for p in snaps:
            values, meta = noisefile.read_noise(p)
            arrays.append(values.astype(np.float64))
            iters.append(meta["iteration"])
        series = spectra.bin_energy_series(arrays)
        with open(run / "bands.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "band_low", "band_mid", "band_high"])
            for it, (lo, mi, hi) in zip(iters[1:], series):
                writer.writerow([it, _fmt(float(lo)), _fmt(float(mi)), _fmt(float(hi))])

    init_values, _ = noisefile.read_noise(init_path)
    final_values, _ = noisefile.read_noise(final_path)
    spec_init = spectra.radial_power_spectrum(init_values.astype(np.float64), n_bins)
    spec_final = spectra.radial_power_spectrum(final_values.astype(np.float64), n_bins)
    with open(run / "spectrum.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "power_init", "power_final", "cells"])
        for c, pi, pf, n in zip(
            spec_init.centers, spec_init.power, spec_final.power, spec_init.cells
        ):
            writer.writerow([_fmt(float(c)), _fmt(float(pi)), _fmt(float(pf)), int(n)])
    return run


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------

PLOT_KINDS = {
    "scaling": (["iteration"], ["v_b"]),
    "bands": (["iteration"], ["band_low", "band_mid", "band_high"]),
    "spectrum": (["bin_center"], ["power_init", "power_final"]),
}


def _read_table(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name, value in row.items():
                columns[name].append(value)
    return columns


def plot(metrics_path, kind: str, out_path=None) -> Path:
    """Render one figure; writes `<out>.data.csv` with the exact series."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; choose from {sorted(PLOT_KINDS)}")
    x_cols, y_cols = PLOT_KINDS[kind]
    table = _read_table(metrics_path)
    missing = [c for c in x_cols + y_cols if c not in table]
    if missing:
        raise ConfigError(f"{metrics_path} lacks required columns: {', '.join(missing)}")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if out_path is None:
        stem = Path(metrics_path).with_suffix("")
        out_path = f"{stem}_{kind}.png"
    out = Path(out_path)
    x = np.array([float(v) for v in table[x_cols[0]]])
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for col in y_cols:
        y = np.array([float(v) for v in table[col]])
        ax.plot(x, y, marker="o", markersize=2.5, label=col)
    ax.set_xlabel(x_cols[0])
    ax.legend()
    if kind == "spectrum":
        ax.set_xscale("log")
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)

    sidecar = out.with_suffix(out.suffix + ".data.csv")
    with open(sidecar, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(x_cols + y_cols)
        for i in range(len(x)):
            writer.writerow([table[c][i] for c in x_cols + y_cols])
    return out


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _run_one(args: tuple) -> str:
    path, seed, out = args
    spec = load_config(path)
    if seed is not None:
        spec.seed = seed
    if out is not None:
        stem = Path(path).stem
        spec.out_dir = str(Path(out) / stem)
    return str(run_spec(spec))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="noiseopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one or more run configs")
    p_run.add_argument("configs", nargs="+", help="YAML run configs")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_run.add_argument("--out", default=None, help="root directory for run outputs")

    p_plot = sub.add_parser("plot", help="plot a metrics or analysis table")
    p_plot.add_argument("metrics", help="CSV produced by run or analyze")
    p_plot.add_argument("--kind", required=True, choices=sorted(PLOT_KINDS))
    p_plot.add_argument("--out", default=None, help="output image path")

    p_an = sub.add_parser("analyze", help="frequency analysis of a run directory")
    p_an.add_argument("run_dir")
    p_an.add_argument("--bins", type=int, default=16)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            jobs = [(c, args.seed, args.out) for c in args.configs]
            if args.jobs > 1 and len(jobs) > 1:
                with multiprocessing.Pool(args.jobs) as pool:
                    for out in pool.map(_run_one, jobs):
                        print(out)
            else:
                for job in jobs:
                    print(_run_one(job))
        elif args.command == "plot":
            print(plot(args.metrics, args.kind, args.out))
        else:
            print(analyze(args.run_dir, args.bins))
    except NoiseOptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
