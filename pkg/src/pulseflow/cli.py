"""``pulseflow`` command line: generate | train | sample | evaluate | gauge | ablate."""
from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, signals, uq
from .errors import ArgumentError, ConfigError, IntegrityError, NumericError, PulseFlowError
from .gauge import gauge_rr, write_gauge_csv
from .pipeline import held_out_windows, run_ablation, write_ablation_csv
from .sampler import DRIFT_FORMS, NetworkFields, SamplerConfig, ensemble_windows
from .synth import SynthConfig, SynthDataset, make_dataset, read_dataset, write_dataset
from .training import TrainConfig, preprocess_track, train, write_curves
from .vectorfield import checkpoint as ckpt_io

log = logging.getLogger("pulseflow")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "PULSEFLOW_OUTPUT_ROOT"
MANIFEST = "manifest.json"


# ------------------------------------------------------------- plumbing


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    checkpoint_sha256: str | None = None
    tool_version: str = __version__
    wall_clock_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def verify_manifest(directory) -> dict:
    """Recompute every output hash listed in a run manifest."""
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise ArgumentError(f"no {MANIFEST} in {directory}")
    try:
        m = json.loads(path.read_text())
        outputs = m["outputs"]
    except (ValueError, KeyError) as exc:
        raise IntegrityError(f"{path}: unreadable manifest") from exc
    for rel, digest in outputs.items():
        f = Path(directory) / rel
        if not f.is_file() or sha256_file(f) != digest:
            raise IntegrityError(f"{rel}: missing or hash mismatch")
    return m


def resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


class StagedOutput:
    """Build outputs in a sibling temp dir, then move into place on success."""

    def __init__(self, target: Path):
        self.target = target
        if target.exists() and any(target.iterdir()) and not (target / MANIFEST).exists():
            raise ArgumentError(f"{target} exists and is not a pulseflow output directory")
        target.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))

    def commit(self, manifest: RunManifest, started: float) -> None:
        manifest.outputs = {
            str(p.relative_to(self.dir)): sha256_file(p)
            for p in sorted(self.dir.rglob("*")) if p.is_file()
        }
        manifest.wall_clock_s = round(time.time() - started, 3)
        (self.dir / MANIFEST).write_text(manifest.to_json())
        if self.target.exists():
            shutil.rmtree(self.target)
        os.replace(self.dir, self.target)

    def abort(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def load_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc


def section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def guarded(fn):
    """Map library errors to the exit-code contract."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ArgumentError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_INPUT)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except IntegrityError as exc:
            click.echo(f"integrity failure: {exc}", err=True)
            sys.exit(EXIT_INTEGRITY)
        except PulseFlowError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_INPUT)

    return wrapper


def run_staged(out: str, build):
    """Call ``build(stage_dir) -> RunManifest`` and commit atomically."""
    started = time.time()
    stage = StagedOutput(resolve_out(out))
    try:
        manifest = build(stage.dir)
        stage.commit(manifest, started)
    except BaseException:
        stage.abort()
        raise
    click.echo(str(stage.target))
    return stage.target


def parse_snapshots(spec: str | None) -> tuple[float, ...]:
    """``"0.1:1.0:0.1"`` (start:stop:step, inclusive) or ``"0.2,0.5"``."""
    if not spec:
        return ()
    try:
        if ":" in spec:
            a, b, c = (float(v) for v in spec.split(":"))
            if c <= 0:
                raise ValueError("step must be positive")
            n = int(np.floor((b - a) / c + 1e-9)) + 1
            return tuple(round(a + i * c, 10) for i in range(n))
        return tuple(float(v) for v in spec.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --snapshots value {spec!r}: {exc}") from exc


# --------------------------------------------------------------- commands


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Pulse reconstruction with stochastic interpolants."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML with [synth] and [dataset].")
@click.option("--out", required=True, help="Output dataset directory.")
@click.option("--seed", type=int, help="Override synth.seed.")
@guarded
def generate(config_path, out, seed):
    """Write a paired synthetic dataset."""
    cfg = load_toml(config_path)
    synth = section(cfg, "synth")
    if seed is not None:
        synth["seed"] = seed
    sc = SynthConfig.from_dict(synth)
    dataset = section(cfg, "dataset")
    unknown = set(dataset) - {"n_subjects", "duration", "fs"}
    if unknown:
        raise ConfigError(f"unknown dataset fields: {sorted(unknown)}")
    n = int(dataset.get("n_subjects", 3))
    duration = float(dataset.get("duration", 60.0))
    fs = float(dataset.get("fs", 25.0))
    ds = make_dataset(sc, n, duration, fs)

    def build(stage: Path):
        write_dataset(ds, stage, "dataset.json")
        return RunManifest("generate", {"synth": sc.to_dict(), "dataset": {"n_subjects": n, "duration": duration, "fs": fs}},
                           seeds={"synth": sc.seed})

    run_staged(out, build)


def _load_dataset(path) -> SynthDataset:
    p = Path(path)
    name = "dataset.json" if (p / "dataset.json").exists() else "manifest.json"
    return read_dataset(p, name)


def _train_config(cfg: dict, overrides: dict) -> TrainConfig:
    tr = section(cfg, "train")
    tr.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(tr)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML with [train].")
@click.option("--data", required=True, type=click.Path(file_okay=False), help="Dataset directory.")
@click.option("--out", required=True, help="Output run directory.")
@click.option("--lambda-rcl", type=float)
@click.option("--delta-shift", type=float, help="Seconds.")
@click.option("--epochs", type=int)
@click.option("--max-steps", type=int)
@click.option("--seed", type=int)
@click.option("--resume", type=click.Path(dir_okay=False), help="Checkpoint to continue from.")
@guarded
def train_cmd(config_path, data, out, lambda_rcl, delta_shift, epochs, max_steps, seed, resume):
    """Fit flow and denoiser networks."""
    cfg = _train_config(load_toml(config_path), {"lambda_rcl": lambda_rcl, "delta_shift": delta_shift,
                                                 "epochs": epochs, "max_steps": max_steps, "seed": seed})
    ds = _load_dataset(data)
    init = ckpt_io.load(resume) if resume else None
    result = train(ds, cfg, resume=init,
                   progress=lambda r: log.info("step %d total %.5g", r["step"], r["total"]))
    ck = result.checkpoint()
    ck.config["fs"] = ds.fs
    ck.config["region_labels"] = ds.region_labels

    def build(stage: Path):
        digest = ckpt_io.save(ck, stage / "checkpoint.json")
        write_curves(stage / "curves.csv", result.curves)
        inputs = {"data": str(Path(data).resolve())}
        if resume:
            inputs["resume"] = str(Path(resume).resolve())
            inputs["resume_sha256"] = sha256_file(resume)
        return RunManifest("train", cfg.to_dict(), seeds={"train": cfg.seed}, inputs=inputs,
                           checkpoint_sha256=digest)

    run_staged(out, build)


def split_color_columns(samples: np.ndarray, labels: list[str]):
    """``<region>_red`` / ``<region>_green`` column pairs, or None when absent."""
    reds = [lb[:-4] for lb in labels if lb.endswith("_red")]
    if not reds:
        return None
    try:
        ri = [labels.index(f"{r}_red") for r in reds]
        gi = [labels.index(f"{r}_green") for r in reds]
    except ValueError as exc:
        raise ArgumentError(f"colour input needs matching _red/_green columns ({exc})") from exc
    if len(ri) + len(gi) != len(labels):
        raise ArgumentError("colour input mixes colour and plain region columns")
    return samples[:, ri], samples[:, gi], reds


def _windows_from_csv(path, ck, ratio_order: str = "ratio_first"):
    times, samples, labels = signals.read_series_csv(path)
    fs = signals.sample_rate_from_times(times)
    trained_fs = ck.config.get("fs")
    if trained_fs is not None and abs(fs - trained_fs) > 1e-6 * trained_fs:
        raise ArgumentError(f"input rate {fs} Hz differs from training rate {trained_fs} Hz")
    tcfg = TrainConfig.from_dict({k: v for k, v in ck.config.items() if k in TrainConfig.__dataclass_fields__})
    color = split_color_columns(samples, labels)
    if color is not None:
        red, green, labels = color
        lo, hi = tcfg.passband
        x = signals.preprocess_color(signals.SignalWindow(red, fs), signals.SignalWindow(green, fs),
                                     ratio_order, lo, hi, tcfg.taps).samples
    else:
        x = preprocess_track(samples, fs, tcfg)
    if x.shape[1] != ck.arch.in_channels:
        raise ArgumentError(f"input has {x.shape[1]} regions, checkpoint expects {ck.arch.in_channels}")
    L = tcfg.window_length
    if x.shape[0] < L:
        raise ArgumentError(f"input has {x.shape[0]} samples, need at least {L}")
    starts = np.arange(0, x.shape[0] - L + 1, L)
    wins = np.stack([signals.standardize(x[s:s + L]) for s in starts])
    return wins, starts, labels, fs, L


def _write_ensemble_csv(path, terminals: np.ndarray, starts, fs: float, labels) -> None:
    W, N, L, _ = terminals.shape
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["window", "realization", "time", *labels])
        for w in range(W):
            for k in range(N):
                for i in range(L):
                    wr.writerow([w, k, repr(float((starts[w] + i) / fs)), *(repr(float(v)) for v in terminals[w, k, i])])


def read_ensemble_csv(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Return ``(terminals (W, N, L, R), window start times, labels)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[:3] != ["window", "realization", "time"]:
        raise ArgumentError(f"{path}: not an ensemble CSV")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r])
    except ValueError as exc:
        raise ArgumentError(f"{path}: non-numeric entry ({exc})") from exc
    W, N = int(data[:, 0].max()) + 1, int(data[:, 1].max()) + 1
    R = len(header) - 3
    if data.shape[0] % (W * N):
        raise ArgumentError(f"{path}: ragged ensemble")
    L = data.shape[0] // (W * N)
    vals = data[:, 3:].reshape(W, N, L, R)
    t0 = data[:, 2].reshape(W, N, L)[:, 0, 0]
    return vals, t0, header[3:]


@main.command()
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(dir_okay=False))
@click.option("--input", "input_csv", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML with [sampler].")
@click.option("--n", "n_realizations", type=int, help="Realizations per window.")
@click.option("--seed", type=int)
@click.option("--steps", type=int)
@click.option("--epsilon", type=float)
@click.option("--snapshots", help="t values, 'start:stop:step' or comma list.")
@click.option("--drift-form", type=click.Choice(DRIFT_FORMS))
@click.option("--ratio-order", type=click.Choice(signals.RATIO_ORDERS), default="ratio_first",
              show_default=True, help="For <region>_red/<region>_green input columns.")
@click.option("--jobs", type=int, default=1, show_default=True)
@guarded
def sample(ckpt_path, input_csv, out, config_path, n_realizations, seed, steps, epsilon, snapshots,
           drift_form, ratio_order, jobs):
    """Reverse-sample pulse estimates for every window of a measurement CSV."""
    sc = section(load_toml(config_path), "sampler")
    for k, v in {"n_realizations": n_realizations, "seed": seed, "steps": steps,
                 "epsilon": epsilon, "drift_form": drift_form}.items():
        if v is not None:
            sc[k] = v
    if snapshots is not None:
        sc["snapshot_times"] = parse_snapshots(snapshots)
    scfg = SamplerConfig.from_dict(sc)
    ck = ckpt_io.load(ckpt_path)
    wins, starts, labels, fs, L = _windows_from_csv(input_csv, ck, ratio_order)
    terminals, snaps = ensemble_windows(wins, NetworkFields.from_checkpoint(ck), scfg, scfg.seed, jobs)

    def build(stage: Path):
        _write_ensemble_csv(stage / "ensemble.csv", terminals, starts, fs, labels)
        for t in sorted(snaps):
            _write_ensemble_csv(stage / f"snapshot_t{t:.2f}.csv", snaps[t], starts, fs, labels)
        return RunManifest("sample", {"sampler": scfg.to_dict(), "fs": fs, "window_length": L,
                                      "ratio_order": ratio_order,
                                      "n_windows": int(wins.shape[0])},
                           seeds={"sampler": scfg.seed},
                           inputs={"checkpoint": str(Path(ckpt_path).resolve()),
                                   "input": str(Path(input_csv).resolve()),
                                   "input_sha256": sha256_file(input_csv)},
                           checkpoint_sha256=ckpt_io.file_sha256(ckpt_path))

    run_staged(out, build)


def _load_ensemble(ens_dir):
    ens_dir = Path(ens_dir)
    m = verify_manifest(ens_dir)
    if m.get("command") != "sample":
        raise ArgumentError(f"{ens_dir} is not a sample output")
    terminals, t0, labels = read_ensemble_csv(ens_dir / "ensemble.csv")
    return terminals, t0, labels, float(m["config"]["fs"])


def _region_spectra(terminals: np.ndarray, fs: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-region power (W, N, L, R) over bins <= 200 bpm, normalized per window."""
    W, N = terminals.shape[:2]
    rows, freqs = [], None
    for w in terminals.reshape(W * N, *terminals.shape[2:]):
        spec = signals.power_spectrum(signals.SignalWindow(w, fs))
        keep = spec.bin_freqs_bpm <= uq.SPECTRUM_MAX_BPM
        freqs = spec.bin_freqs_bpm[keep]
        rows.append(spec.power[keep])
    p = np.array(rows).reshape(W, N, len(freqs), -1)
    peak = p.max(axis=(1, 2, 3), keepdims=True)
    return freqs, np.divide(p, peak, out=np.zeros_like(p), where=peak > 0)


@main.command()
@click.option("--ensemble", "ens_dir", required=True, type=click.Path(file_okay=False))
@click.option("--gt", "gt_csv", required=True, type=click.Path(dir_okay=False),
              help="Ground-truth CSV 'time,pulse'.")
@click.option("--out", required=True)
@click.option("--band", nargs=2, type=float, default=signals.DEFAULT_BAND, show_default=True)
@guarded
def evaluate(ens_dir, gt_csv, out, band):
    """Pulse, spectrum and uncertainty metrics for a sampled ensemble."""
    lo, hi = band
    if not 0 < lo < hi:
        raise ArgumentError(f"invalid band {band}")
    terminals, t0, labels, fs = _load_ensemble(ens_dir)
    times, gt, _ = signals.read_series_csv(gt_csv)
    gt_fs = signals.sample_rate_from_times(times)
    if abs(gt_fs - fs) > 1e-6 * fs:
        raise ArgumentError(f"ground truth rate {gt_fs} Hz differs from ensemble rate {fs} Hz")
    W, N, L, R = terminals.shape
    if N < 2:
        raise ArgumentError("need at least two realizations for uncertainty metrics")
    starts = np.rint((t0 - times[0]) * fs).astype(int)
    if starts.max() + L > gt.shape[0]:
        raise ArgumentError("ground truth shorter than the sampled windows")
    gt_w = np.stack([signals.standardize(gt[s:s + L, :1]) for s in starts])

    pred_rates = np.array([signals.pulse_rate_of(terminals[w], fs, band=(lo, hi)) for w in range(W)])
    gt_rates = np.array([signals.pulse_rate_of(gt_w[w], fs, band=(lo, hi)) for w in range(W)])
    pulse = uq.pulse_metrics(pred_rates, gt_rates)

    freqs, ens_pow = uq.summed_spectrum(terminals, fs)          # (W, N, L)
    _, gt_pow = uq.summed_spectrum(gt_w, fs)                      # (W, L)
    spec = [uq.spectrum_metrics(ens_pow[w].mean(axis=0), gt_pow[w], normalize=True) for w in range(W)]
    spec_mean = {k: float(np.mean([s[k] for s in spec])) for k in ("mae", "rmse", "r2", "pcc")}
    report = uq.uncertainty_report(np.moveaxis(ens_pow, 1, 0), gt_pow, freqs)

    _, reg_pow = _region_spectra(terminals, fs)                   # (W, N, L, R)
    table = np.moveaxis(reg_pow, 1, 3).reshape(W * reg_pow.shape[2], R, N)
    gauge = gauge_rr(table)

    doc = {
        "band_bpm": [lo, hi],
        "n_windows": W, "n_realizations": N,
        "pulse": pulse,
        "pulse_rates": {"pred": pred_rates, "gt": gt_rates},
        "spectrum": spec_mean,
        "uq": report.to_dict(),
        "bland_altman": uq.bland_altman(pred_rates, gt_rates) if W >= 2 else None,
        "gauge": {name: {"variance": v, "percent": p} for name, v, p in gauge.rows()},
        "gauge_degenerate": gauge.degenerate,
    }

    def build(stage: Path):
        (stage / "report.json").write_text(uq.report_json(_nan_to_none(doc)))
        uq.write_calibration_csv(stage / "calibration.csv", report.calibration)
        uq.write_bland_altman_csv(stage / "bland_altman.csv", pred_rates, gt_rates)
        write_gauge_csv(stage / "gauge.csv", gauge)
        return RunManifest("evaluate", {"band": [lo, hi]},
                           inputs={"ensemble": str(Path(ens_dir).resolve()), "gt": str(Path(gt_csv).resolve()),
                                   "gt_sha256": sha256_file(gt_csv)})

    run_staged(out, build)


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _nan_to_none(obj.tolist())
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


@main.command()
@click.option("--ensemble", "ens_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True)
@guarded
def gauge(ens_dir, out):
    """Gauge R&R table: bins as parts, regions as operators, realizations as repeats."""
    terminals, _, _, fs = _load_ensemble(ens_dir)
    W, N, L, R = terminals.shape
    _, reg_pow = _region_spectra(terminals, fs)
    result = gauge_rr(np.moveaxis(reg_pow, 1, 3).reshape(W * reg_pow.shape[2], R, N))

    def build(stage: Path):
        write_gauge_csv(stage / "gauge.csv", result)
        return RunManifest("gauge", {"degenerate": result.degenerate},
                           inputs={"ensemble": str(Path(ens_dir).resolve())})

    run_staged(out, build)


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="TOML with [train], [sampler] and [ablate] (lambdas, deltas, seeds, test_fraction).")
@click.option("--data", required=True, type=click.Path(file_okay=False))
@click.option("--test-data", type=click.Path(file_okay=False), help="Held-out dataset; default splits --data.")
@click.option("--out", required=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@guarded
def ablate(config_path, data, test_data, out, jobs):
    """MAE over a (lambda, delta) grid."""
    cfg = load_toml(config_path)
    tcfg = _train_config(cfg, {})
    scfg = SamplerConfig.from_dict(section(cfg, "sampler"))
    ab = section(cfg, "ablate")
    unknown = set(ab) - {"lambdas", "deltas", "seeds", "test_fraction"}
    if unknown:
        raise ConfigError(f"unknown ablate fields: {sorted(unknown)}")
    lambdas = [float(v) for v in ab.get("lambdas", [round(0.1 * i, 1) for i in range(11)])]
    deltas = [float(v) for v in ab.get("deltas", list(range(1, 11)))]
    seeds = [int(v) for v in ab.get("seeds", [0])]
    ds = _load_dataset(data)
    if test_data:
        test = _load_dataset(test_data)
    else:
        frac = float(ab.get("test_fraction", 0.2))
        n_test = max(1, int(round(frac * len(ds.subjects))))
        if n_test >= len(ds.subjects):
            raise ConfigError("dataset too small to split off a test set")
        test = SynthDataset(ds.config, ds.fs, ds.duration, ds.subjects[-n_test:])
        ds = SynthDataset(ds.config, ds.fs, ds.duration, ds.subjects[:-n_test])
    windows = held_out_windows(test, tcfg)
    rows = run_ablation(ds, windows, tcfg, scfg, lambdas, deltas, seeds, jobs,
                        progress=lambda r: log.info("lambda %g delta %g mae %.3f", r["lambda"], r["delta"], r["mae_bpm"]))

    def build(stage: Path):
        write_ablation_csv(stage / "ablation.csv", rows)
        return RunManifest("ablate", {"train": tcfg.to_dict(), "sampler": scfg.to_dict(),
                                      "lambdas": lambdas, "deltas": deltas},
                           seeds={"train": seeds, "sampler": scfg.seed},
                           inputs={"data": str(Path(data).resolve())})

    run_staged(out, build)


if __name__ == "__main__":
    main()
