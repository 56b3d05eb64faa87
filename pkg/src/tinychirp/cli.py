"""Command-line front end.

Subcommands: preprocess, screen, eval, verify, quantize, budget.
Option precedence is flag > --config file (TOML or JSON) > environment
(TINYCHIRP_<OPTION>) > built-in default. Exit codes: 0 success, 1 data
errors, 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import audio_io, budget, dsp, metrics, nn_core, pipeline, quantization, streaming_conv, weights_io

ENV_PREFIX = "TINYCHIRP_"

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE = 2


def _load_config(path):
    if path is None:
        return {}
    text = Path(path).read_bytes()
    if str(path).endswith(".json"):
        return json.loads(text.decode("utf-8"))
    try:
        import tomllib  # py311+
    except ImportError:
        import tomli as tomllib
    return tomllib.loads(text.decode("utf-8"))


def _resolve(flag_value, key, config, cast, default):
    """flag > config file > TINYCHIRP_* env > default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return cast(config[key])
    env = os.environ.get(ENV_PREFIX + key.upper())
    if env is not None:
        return cast(env)
    return default


def _usage_error(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def cmd_preprocess(args) -> int:
    in_dir = Path(args.in_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _load_config(args.config)
    rate = _resolve(args.rate, "rate", config, int, dsp.ANALYSIS_RATE_HZ)
    duration = _resolve(args.duration, "duration", config, float, 3.0)

    files = sorted(in_dir.glob("*.wav"))
    if not files:
        print(f"warning: no .wav files under {in_dir}", file=sys.stderr)
        return EXIT_OK

    fb = dsp.mel_filterbank(sample_rate_hz=rate) if args.mel else None

    def process(path):
        try:
            signal = audio_io.read_wav(path).to_mono()
            if signal.sample_rate != rate:
                signal = dsp.downsample_zoh(signal, rate)
            written = []
            for seg in audio_io.segment(signal, duration, source_id=str(path)):
                stem = f"{path.stem}_{int(round(seg.offset_s * 1000))}"
                wav_path = out_dir / f"{stem}.wav"
                audio_io.write_segment_wav(seg, wav_path)
                written.append(str(wav_path))
                if fb is not None:
                    mel = dsp.log_mel(dsp.stft_magnitude(seg), fb)
                    if args.mel_format == "csv":
                        dsp.save_spectrogram_csv(mel.values, out_dir / f"{stem}.mel.csv")
                    else:
                        dsp.save_spectrogram_raw(mel.values, out_dir / f"{stem}.mel.tcsp")
            return path, written, None
        except Exception as exc:
            return path, [], f"{type(exc).__name__}: {exc}"

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(process, files))
    else:
        results = [process(p) for p in files]
    results.sort(key=lambda r: str(r[0]))

    failures = 0
    for path, written, err in results:
        if err:
            failures += 1
            print(f"error: {path}: {err}", file=sys.stderr)
        else:
            print(f"{path}: {len(written)} segment(s)")
    return EXIT_DATA_ERROR if failures else EXIT_OK


def cmd_screen(args) -> int:
    config = _load_config(args.config)
    t_low = _resolve(args.t_low, "t_low", config, float, pipeline.DEFAULT_T_LOW)
    t_high = _resolve(args.t_high, "t_high", config, float, pipeline.DEFAULT_T_HIGH)
    variant = _resolve(args.variant, "variant", config, str, budget.FULL)
    model = _resolve(args.model, "model", config, str,
                     pipeline.MODEL_NONE if variant == budget.BASELINE_ONLY
                     else pipeline.TRANSFORMER_TIME)
    t_model = _resolve(
        args.t_model, "t_model", config, float,
        pipeline.DEFAULT_MODEL_THRESHOLDS.get(model, 0.5),
    )

    if t_low > t_high:
        return _usage_error(f"t_low ({t_low}) must not exceed t_high ({t_high})")
    if variant not in budget.VARIANTS:
        return _usage_error(f"unknown variant {variant!r}")

    try:
        cfg = pipeline.ScreeningConfig(
            variant=variant, t_low=t_low, t_high=t_high,
            model_choice=model, t_model=t_model,
        )
    except ValueError as exc:
        return _usage_error(str(exc))

    bundle = None
    if cfg.model_choice != pipeline.MODEL_NONE:
        try:
            bundle = pipeline.load_bundle(
                cfg.model_choice, args.weights, seed=args.seed,
                quantized=args.quantized,
            )
        except Exception as exc:
            print(f"error: cannot load model: {exc}", file=sys.stderr)
            return EXIT_DATA_ERROR

    report = pipeline.run_pipeline(
        args.in_path, cfg, sink_dir=args.out, model_bundle=bundle, jobs=args.jobs
    )
    if bundle is not None:
        report.config["weights_dtype"] = "i8" if bundle.quantized else "f32"

    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_DATA_ERROR if report.errors else EXIT_OK


def _scores_from_csv(path):
    scores, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"score", "label"}:
            raise metrics.MetricsError("scores CSV needs 'score,label' columns")
        for row in reader:
            scores.append(float(row["score"]))
            labels.append(row["label"].strip())
    return scores, labels


def _scores_from_model(model_choice, weights_path, manifest_path, seed, quantized):
    bundle = pipeline.load_bundle(model_choice, weights_path, seed=seed, quantized=quantized)
    manifest = audio_io.load_manifest(manifest_path)
    scores, labels = [], []
    for entry in manifest:
        signal = audio_io.read_wav(entry.path).to_mono()
        if signal.sample_rate != dsp.ANALYSIS_RATE_HZ:
            signal = dsp.downsample_zoh(signal, dsp.ANALYSIS_RATE_HZ)
        for seg in audio_io.segment(signal, 3.0, source_id=entry.path):
            scores.append(bundle.score(seg))
            labels.append(entry.label)
    return scores, labels


def cmd_eval(args) -> int:
    if bool(args.scores) == bool(args.manifest):
        return _usage_error("need exactly one of --scores or --manifest")
    if args.manifest and not args.model:
        return _usage_error("--manifest requires --model")
    try:
        if args.scores:
            scores, labels = _scores_from_csv(args.scores)
        else:
            scores, labels = _scores_from_model(
                args.model, args.weights, args.manifest, args.seed, args.quantized
            )
        curve = metrics.roc_curve(scores, labels)
        best = metrics.optimize_threshold(scores, labels, beta=args.beta)
        sweep = metrics.threshold_sweep(scores, labels, beta=args.beta)
    except (metrics.MetricsError, audio_io.AudioIoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR

    result = {
        "n": len(scores),
        "beta": args.beta,
        "auc": metrics.auc(curve),
        "t_star": best.threshold,
        "metrics_at_t_star": {
            "accuracy": best.accuracy,
            "precision": best.precision,
            "recall": best.recall,
            "fbeta": best.fbeta,
            "confusion": asdict(best.confusion),
        },
        "per_threshold": sweep,
        "roc": [asdict(p) for p in curve.points],
    }
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.roc_csv:
        with open(args.roc_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr", "threshold"])
            for p in curve.points:
                writer.writerow([p.fpr, p.tpr, p.threshold])
    return EXIT_OK


def _random_prefix(rng):
    """One random streamable stack: 1-3 convs, optional ReLU/MaxPool."""
    layers = []
    weights = {}
    channels = 1
    for _ in range(int(rng.integers(1, 4))):
        out_c = int(rng.integers(1, 17))
        kernel = int(rng.choice([3, 5]))
        layer = nn_core.conv1d(channels, out_c, kernel)
        weights[len(layers)] = {
            "weights": rng.uniform(-0.5, 0.5, size=(out_c, channels, kernel))
        }
        layers.append(layer)
        channels = out_c
        if rng.random() < 0.5:
            layers.append(nn_core.relu())
        if rng.random() < 0.5:
            layers.append(nn_core.maxpool1d(2))
    return layers, weights


def cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for trial in range(args.trials):
        layers, weights = _random_prefix(rng)
        # keep the length long enough to survive the pooling stages
        n = int(rng.integers(64, 4097))
        x = rng.uniform(-1.0, 1.0, size=n)

        y_naive = streaming_conv.naive_conv_avgpool_oracle(layers, weights, x)
        y_stream, stats = streaming_conv.run_stream(layers, weights, x)

        abs_err = np.abs(y_stream - y_naive)
        rel_err = abs_err / np.maximum(np.abs(y_naive), 1e-12)
        ok = bool(
            np.all(
                (abs_err <= streaming_conv.EQUIV_ATOL)
                | (rel_err <= streaming_conv.EQUIV_RTOL)
            )
        )
        naive_live = streaming_conv.naive_live_values(layers, n)
        record = {
            "trial": trial,
            "config": {
                "layers": [layer.kind for layer in layers],
                "kernels": [l.kernel for l in layers if l.kind == nn_core.CONV1D],
                "channels": [l.out_channels for l in layers if l.kind == nn_core.CONV1D],
                "n": n,
            },
            "max_abs_err": float(abs_err.max()),
            "max_rel_err": float(rel_err.max()),
            "peak_values_stream": stats.peak_buffered_values,
            "peak_values_naive": naive_live,
            "ratio": naive_live / stats.peak_buffered_values,
            "pass": ok,
        }
        print(json.dumps(record))
        if not ok:
            failures += 1
    return EXIT_DATA_ERROR if failures else EXIT_OK


def cmd_quantize(args) -> int:
    try:
        graph = pipeline.build_model(args.model)
        if args.weights:
            weights = weights_io.load_weights(graph, args.weights)
        else:
            weights = nn_core.seeded_init(graph, args.seed)

        calib = Path(args.calib)
        inputs = []
        if calib.is_dir():
            entries = [(str(p), None) for p in sorted(calib.glob("*.wav"))]
        else:
            entries = [(e.path, e.label) for e in audio_io.load_manifest(calib)]
        for path, _label in entries[: args.max_calib]:
            signal = audio_io.read_wav(path).to_mono()
            if signal.sample_rate != dsp.ANALYSIS_RATE_HZ:
                signal = dsp.downsample_zoh(signal, dsp.ANALYSIS_RATE_HZ)
            for seg in audio_io.segment(signal, 3.0, source_id=path):
                inputs.append(pipeline.model_input(args.model, seg))

        qmodel = quantization.calibrate(graph, weights, inputs)
        quantization.save_quant_model(qmodel, args.out)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR

    print(
        json.dumps(
            {
                "model": args.model,
                "calibration_inputs": len(inputs),
                "out": str(args.out),
                "payload_bytes": weights_io.payload_nbytes(args.out),
                "dtype": "i8",
            }
        )
    )
    return EXIT_OK


def cmd_budget(args) -> int:
    config = _load_config(args.config)

    def opt(flag, key, cast, default):
        return _resolve(flag, key, config, cast, default)

    try:
        profile = budget.DeploymentProfile(
            battery_mwh=opt(args.battery_mwh, "battery_mwh", float, 40000.0),
            sd_bytes=opt(args.sd_gb, "sd_gb", float, 128.0) * 1e9,
            record_rate_bytes_per_s=opt(
                args.record_rate, "record_rate", float, 2 * 48000.0
            ),
            segment_s=opt(args.segment_s, "segment_s", float, 3.0),
            active_fraction=opt(args.active_fraction, "active_fraction", float, 0.1),
            store_fraction=opt(args.store_fraction, "store_fraction", float, 0.1),
            variant=opt(args.variant, "variant", str, budget.FULL),
            model=opt(args.model, "model", str, "transformer_time"),
            idle_power_mw=args.idle_mw,
            model_fraction=args.model_fraction,
        )
        estimate = budget.estimate_lifetime(profile)
    except (ValueError, budget.BudgetError) as exc:
        return _usage_error(str(exc))

    if args.table:
        print(f"{'storage days':>16}: {estimate.storage_days:.1f}")
        print(f"{'battery days':>16}: {estimate.battery_days:.1f}")
        print(f"{'daily energy mJ':>16}: {estimate.daily_energy_mj:.0f}")
        print(f"{'limiting factor':>16}: {estimate.limiting_factor}")
    else:
        print(json.dumps(asdict(estimate), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinychirp",
        description="Two-stage screening of field audio for a target bird song.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="cut WAVs into 3 s segments at 16 kHz")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--mel", action="store_true", help="also write log-mel matrices")
    p.add_argument("--mel-format", choices=["tcsp", "csv"], default="tcsp")
    p.add_argument("--rate", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("screen", help="run the decision strategy over a corpus")
    p.add_argument("in_path", help="directory of WAVs or a manifest CSV")
    p.add_argument("--variant", choices=list(budget.VARIANTS), default=None)
    p.add_argument("--model", choices=list(pipeline.MODEL_CHOICES), default=None)
    p.add_argument("--weights", default=None, help="TCHW container (default: seeded)")
    p.add_argument("--quantized", action="store_true", help="weights are int8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-low", dest="t_low", type=float, default=None)
    p.add_argument("--t-high", dest="t_high", type=float, default=None)
    p.add_argument("--t-model", dest="t_model", type=float, default=None)
    p.add_argument("--out", default=None, help="sink directory for stored segments")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("eval", help="classification metrics from scores or a model")
    p.add_argument("--scores", default=None, help="CSV with score,label columns")
    p.add_argument("--model", choices=list(pipeline.MODEL_CHOICES)[1:], default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--quantized", action="store_true")
    p.add_argument("--manifest", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--out", default=None)
    p.add_argument("--roc-csv", dest="roc_csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="streaming-vs-batch equivalence trials")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("quantize", help="calibrate and write an int8 container")
    p.add_argument("model", choices=list(pipeline.MODEL_CHOICES)[1:])
    p.add_argument("calib", help="manifest CSV or directory of WAVs")
    p.add_argument("out")
    p.add_argument("--weights", default=None, help="float TCHW container")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-calib", type=int, default=64)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("budget", help="battery/storage lifetime estimate")
    p.add_argument("--battery-mwh", dest="battery_mwh", type=float, default=None)
    p.add_argument("--sd-gb", dest="sd_gb", type=float, default=None)
    p.add_argument("--record-rate", dest="record_rate", type=float, default=None,
                   help="stored-audio data rate, bytes/s")
    p.add_argument("--segment-s", dest="segment_s", type=float, default=None)
    p.add_argument("--active-fraction", dest="active_fraction", type=float, default=None)
    p.add_argument("--store-fraction", dest="store_fraction", type=float, default=None)
    p.add_argument("--model-fraction", dest="model_fraction", type=float, default=None)
    p.add_argument("--variant", choices=list(budget.VARIANTS), default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--idle-mw", dest="idle_mw", type=float, default=None)
    p.add_argument("--table", action="store_true", help="human-readable output")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_budget)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
