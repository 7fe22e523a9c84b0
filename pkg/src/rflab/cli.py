"""Command-line surface: gen-data, train, quantize, infer, eval, estimate,
sweep.

Every run prints its full effective configuration first, so any output can be
reproduced from its own header. Option precedence is command line > --config
file (flat JSON, keys = option names with underscores) > built-in defaults;
RFLAB_SEED supplies the default seed. Exit codes: 0 ok, 2 validation error,
3 I/O or file-format error, 4 numeric failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, arch, dse, model_io, nn, siggen, trainer
from ._kernels import backend_name
from .fxp import FxpFormat, quantize_array

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_DEFAULT_CLASSES = "bpsk,qpsk,8psk,16qam,dqpsk"


def _env_seed():
    try:
        return int(os.environ.get("RFLAB_SEED", "0"))
    except ValueError:
        raise ValueError("RFLAB_SEED must be an integer")


def _resolve(args):
    """Apply CLI > config file > defaults; returns the effective dict."""
    eff = dict(vars(args))
    eff.pop("func", None)
    eff.pop("command", None)
    defaults = eff.pop("_defaults", None) or {}
    cfg_path = eff.pop("config", None)
    file_cfg = {}
    if cfg_path:
        with open(cfg_path) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as e:
                raise model_io.FormatError("%s: not valid JSON (%s)"
                                           % (cfg_path, e)) from e
        unknown = [k for k in file_cfg if k not in eff]
        if unknown:
            raise ValueError("config file sets unknown options: %s"
                             % sorted(unknown))
    for key, val in eff.items():
        if val is None:
            if key in file_cfg:
                eff[key] = file_cfg[key]
            elif key in defaults:
                eff[key] = defaults[key]
    if eff.get("seed") is None:
        eff["seed"] = _env_seed()
    return eff


def _print_config(cmd, eff):
    parts = ["%s=%s" % (k, eff[k]) for k in sorted(eff) if eff[k] is not None]
    print("# rflab %s %s" % (__version__, cmd))
    print("# config: " + " ".join(parts))


def _fmt_from(eff):
    return FxpFormat(eff["bits"], eff["frac"])


def _parse_schedule(text):
    parts = text.split(",")
    ii = 1
    unroll = 1
    for p in parts[1:]:
        if p.startswith("ii"):
            ii = int(p[2:])
        elif p.startswith("u"):
            unroll = int(p[1:])
        else:
            raise ValueError("cannot parse schedule option %r" % p)
    return dse.Schedule(parts[0], ii=ii, unroll=unroll)


def cmd_gen_data(args):
    eff = _resolve(args)
    _print_config("gen-data", eff)
    if eff["frames"] < 1:
        raise ValueError("need at least 1 frame per class")
    classes = [c.strip() for c in eff["classes"].split(",") if c.strip()]
    phase = None if eff["phase"] == "random" else float(eff["phase"])
    cfg = siggen.ChannelConfig(snr_db=eff["snr"], carrier_phase_offset=phase,
                               frequency_offset=eff["cfo"])
    ds = siggen.gen_dataset(classes, eff["frames"], eff["size"], cfg,
                            master_seed=eff["seed"], sps=eff["sps"],
                            payload_bits=eff["payload_bits"])
    model_io.save_dataset(eff["out"], ds)
    for name, cnt in zip(ds.labels, ds.class_counts()):
        print("%-8s %d" % (name, cnt))
    print("wrote %s (%d frames, %dx%d)"
          % (eff["out"], len(ds), eff["size"], eff["size"]))
    return 0


def cmd_train(args):
    eff = _resolve(args)
    _print_config("train", eff)
    ds = model_io.load_dataset(eff["data"], split_seed=eff["split_seed"])
    side = ds.x.shape[2]
    model = arch.build_from_string(eff["arch"], side, ds.labels,
                                   padding=eff["padding"])
    config = trainer.TrainConfig(epochs=eff["epochs"], batch=eff["batch"],
                                 lr=eff["lr"], optimizer=eff["optimizer"],
                                 seed=eff["seed"])
    log_lines = []

    def emit(rec):
        line = ("epoch %d loss %.4f train_acc %.4f test_acc %.4f"
                % (rec["epoch"], rec["loss"], rec["train_acc"],
                   rec["test_acc"]))
        log_lines.append(line)
        print(line)

    weights, _ = trainer.fit(model, config, ds, test_frac=eff["test_frac"],
                             log_fn=emit)
    provenance = {"arch": eff["arch"], "data": eff["data"],
                  "seed": eff["seed"], "epochs": eff["epochs"],
                  "batch": eff["batch"], "lr": eff["lr"],
                  "optimizer": eff["optimizer"],
                  "test_frac": eff["test_frac"],
                  "split_seed": eff["split_seed"], "backend": backend_name()}
    mpath, bpath = model_io.save_model(eff["out"], model, weights, provenance)
    with open(eff["out"] + ".log", "w") as fh:
        fh.write("\n".join(log_lines) + "\n")
    print("wrote %s %s %s" % (mpath, bpath, eff["out"] + ".log"))
    return 0


def _calibration_frames(path, count):
    """Load a dataset and stride-sample frames for range calibration."""
    ds = model_io.load_dataset(path)
    idx = np.unique(np.linspace(0, len(ds) - 1, count).astype(int))
    return ds.x[idx]


def _rescale(model, weights, eff):
    frames = _calibration_frames(eff["calibrate"], eff["calib_frames"])
    rescaled, report = trainer.rescale_for_fixed(model, weights, frames,
                                                 _fmt_from(eff),
                                                 eff["headroom"])
    for entry in report:
        print("layer %-2d out_scale %.4g act_max %.3f -> %.3f"
              % (entry["layer"], entry["out_scale"], entry["act_max"],
                 entry["fitted_max"]))
    return rescaled


def cmd_quantize(args):
    eff = _resolve(args)
    _print_config("quantize", eff)
    model, weights, manifest = model_io.load_model(eff["model"])
    if weights.fmt is not None:
        raise ValueError("model is already fixed-point (%s)" % weights.fmt)
    fmt = _fmt_from(eff)
    provenance = dict(manifest.get("provenance", {}))
    if eff["calibrate"]:
        weights = _rescale(model, weights, eff)
        provenance["calibrated_on"] = eff["calibrate"]
        provenance["headroom"] = eff["headroom"]
    wq, report = trainer.quantize_weights(weights, fmt)
    for entry in report:
        print("layer %-2d max_err %.3e saturated %d"
              % (entry["layer"], entry["max_err"], entry["saturated"]))
    provenance["quantized_from"] = eff["model"]
    mpath, bpath = model_io.save_model(eff["out"], model, wq, provenance)
    print("wrote %s %s (%s)" % (mpath, bpath, fmt))
    return 0


def cmd_infer(args):
    eff = _resolve(args)
    _print_config("infer", eff)
    model, weights, _ = model_io.load_model(eff["model"])
    ds = model_io.load_dataset(eff["data"])
    if not 0 <= eff["index"] < len(ds):
        raise ValueError("index %d outside dataset of %d frames"
                         % (eff["index"], len(ds)))
    x = ds.x[eff["index"]]
    if weights.fmt is not None:
        scores, label = nn.infer_fixed(model, weights,
                                       quantize_array(x, weights.fmt))
        scores = scores * weights.fmt.resolution
    else:
        scores, label = nn.infer(model, weights, x)
    for name, s in zip(model.labels, scores):
        print("%-8s %+.5f" % (name, s))
    truth = ds.labels[ds.y[eff["index"]]]
    print("predicted %s (true %s)" % (model.labels[label], truth))
    return 0


def _metrics_lines(metrics, machine):
    if machine:
        lines = ["metric,value", "accuracy,%.6f" % metrics.accuracy]
        for name, acc in zip(metrics.labels, metrics.per_class):
            lines.append("acc_%s,%.6f" % (name, acc))
        lines.append("truth/pred," + ",".join(metrics.labels))
        for name, row in zip(metrics.labels, metrics.confusion):
            lines.append(name + "," + ",".join(str(v) for v in row))
        return lines
    lines = ["accuracy %.4f" % metrics.accuracy]
    width = max(len(n) for n in metrics.labels)
    lines.append("confusion (rows = truth):")
    lines.append(" " * (width + 1) + " ".join(n.rjust(6) for n in metrics.labels))
    for name, row in zip(metrics.labels, metrics.confusion):
        lines.append(name.ljust(width + 1)
                     + " ".join(str(v).rjust(6) for v in row))
    for name, acc in zip(metrics.labels, metrics.per_class):
        lines.append("%-8s %.4f" % (name, acc))
    return lines


def cmd_eval(args):
    eff = _resolve(args)
    _print_config("eval", eff)
    model, weights, _ = model_io.load_model(eff["model"])
    ds = model_io.load_dataset(eff["data"], split_seed=eff["split_seed"])
    if eff["split"] == "all":
        x, y = ds.x, ds.y
    else:
        train_idx, test_idx = ds.split(eff["test_frac"])
        sel = test_idx if eff["split"] == "test" else train_idx
        x, y = ds.x[sel], ds.y[sel]
    metrics = trainer.evaluate(model, weights, x, y)
    for line in _metrics_lines(metrics, eff["machine"]):
        print(line)
    if eff["compare"]:
        if weights.fmt is not None:
            raise ValueError("--compare needs a float model; this one is %s"
                             % weights.fmt)
        fmt = _fmt_from(eff)
        to_quantize = weights
        if eff["calibrate"]:
            to_quantize = _rescale(model, weights, eff)
        wq, _ = trainer.quantize_weights(to_quantize, fmt)
        fixed = trainer.evaluate(model, wq, x, y)
        f_pred = trainer._predict(model, weights, x)
        q_pred = trainer._predict(model, wq, x, fmt)
        agree = float((f_pred == q_pred).mean())
        print("fixed(%s) accuracy %.4f delta %+.4f argmax agreement %.4f"
              % (fmt, fixed.accuracy, fixed.accuracy - metrics.accuracy,
                 agree))
    return 0


def _model_for_estimate(eff):
    if eff.get("model"):
        model, weights, _ = model_io.load_model(eff["model"])
        return model, weights.fmt or _fmt_from(eff)
    if not eff.get("arch"):
        raise ValueError("need --model or --arch")
    labels = ["c%d" % i for i in range(eff["classes"])]
    return arch.build_from_string(eff["arch"], eff["size"], labels), _fmt_from(eff)


def cmd_estimate(args):
    eff = _resolve(args)
    _print_config("estimate", eff)
    model, fmt = _model_for_estimate(eff)
    sched = _parse_schedule(eff["schedule"])
    params = dse.DEFAULT_PARAMS
    if eff["calibrate_to"] is not None:
        params = dse.calibrate(model, eff["calibrate_to"], eff["clock"])
        print("calibrated cycles_per_mac %.4f" % params.cycles_per_mac)
    dp = dse.DesignPoint(model, sched, fmt, eff["clock"], params, eff["power"])
    lat = dse.estimate_latency(dp)
    res = dse.estimate_resources(dp)
    if eff["machine"]:
        print("layer,label,cycles")
        for idx, label, cycles in lat.per_layer:
            print('%d,"%s",%d' % (idx, label, cycles))
        print("total_cycles,,%d" % lat.total_cycles)
        print("wall_ms,,%.6f" % lat.wall_ms)
        print("bram,,%d" % res.bram_blocks)
        print("dsp,,%d" % res.dsp_units)
        print("lut,,%d" % res.lut_estimate)
        if eff["power"] is not None:
            print("energy_mj,,%.6f"
                  % dse.estimate_energy(lat.wall_ms, eff["power"]))
        return 0
    print("schedule %s, %s, clock %.1f MHz"
          % (sched.describe(), fmt, eff["clock"]))
    for idx, label, cycles in lat.per_layer:
        print("  layer %-2d %-16s %12d cycles" % (idx, label, cycles))
    print("total %d cycles = %.4f ms" % (lat.total_cycles, lat.wall_ms))
    for note in lat.notes:
        print("note: " + note)
    print("BRAM %d blocks (%.1f%% of %d)  DSP %d (%.1f%% of %d)  LUT ~%d"
          % (res.bram_blocks, res.bram_pct, res.bram_budget, res.dsp_units,
             res.dsp_pct, res.dsp_budget, res.lut_estimate))
    if eff["power"] is not None:
        print("energy %.3f mJ at %.3f W"
              % (dse.estimate_energy(lat.wall_ms, eff["power"]), eff["power"]))
    return 0


def cmd_sweep(args):
    eff = _resolve(args)
    _print_config("sweep", eff)
    labels = ["c%d" % i for i in range(eff["classes"])]
    points = []
    for text in eff["archs"].split(","):
        text = text.strip()
        points.append((text, arch.build_from_string(text, eff["size"], labels)))
    schedules = [_parse_schedule(s.strip())
                 for s in eff["schedules"].split(";")]
    rows, front = dse.sweep(points, schedules, _fmt_from(eff), eff["clock"],
                            power_w=eff["power"])
    print(dse.format_sweep(rows, front, machine=eff["machine"]))
    if not eff["machine"]:
        print("pareto front: " + ", ".join(
            "%s/%s" % (rows[i]["arch"], rows[i]["schedule"]) for i in front))
    if eff["out"]:
        with open(eff["out"], "w") as fh:
            fh.write(dse.format_sweep(rows, front, machine=True) + "\n")
        print("wrote %s" % eff["out"])
    return 0


def _fmt_options(p):
    p.add_argument("--bits", type=int, default=None)
    p.add_argument("--frac", type=int, default=None)


def _calib_options(p):
    p.add_argument("--calibrate", default=None, metavar="DATA",
                   help="RFDS dataset; rescale layers so activations "
                        "measured on it fit the format before quantizing")
    p.add_argument("--calib-frames", type=int, default=None)
    p.add_argument("--headroom", type=float, default=None,
                   help="fraction of the format range to fill (0, 1]")


_FMT_DEFAULTS = {"bits": 16, "frac": 14}
_CALIB_DEFAULTS = {"calib_frames": 512, "headroom": 0.95}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rflab",
        description="Spectrum-sensing CNNs: synthesize I/Q data, train, "
                    "quantize, and estimate hardware latency/resources.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a labeled I/Q dataset")
    p.add_argument("--classes", default=None,
                   help="comma list: bpsk qpsk 8psk 16qam dqpsk ofdm64 "
                        "ofdm128 ofdm256")
    p.add_argument("--frames", type=int, default=None, help="frames per class")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--phase", default=None,
                   help="carrier phase in radians, or 'random'")
    p.add_argument("--cfo", type=float, default=None,
                   help="frequency offset, cycles/sample")
    p.add_argument("--sps", type=int, default=None,
                   help="samples per symbol for the PSK/QAM schemes")
    p.add_argument("--payload-bits", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data, _defaults={
        "classes": _DEFAULT_CLASSES, "frames": 100, "size": 32, "snr": 10.0,
        "phase": "random", "sps": siggen.DEFAULT_SPS,
        "payload_bits": siggen.PAYLOAD_BITS})

    p = sub.add_parser("train", help="train a model on an RFDS dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default=None,
                   help="e.g. conv16x3-pool3-fc16-out")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None)
    p.add_argument("--padding", choices=["same", "full"], default=None)
    p.add_argument("--test-frac", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train, _defaults={
        "arch": "conv16x3-pool3-fc16-out", "epochs": 20, "batch": 64,
        "lr": 1e-3, "optimizer": "adam", "padding": "same",
        "test_frac": 2.0 / 7.0, "split_seed": 0})

    p = sub.add_parser("quantize",
                       help="quantize a float model to fixed point")
    p.add_argument("--model", required=True)
    _fmt_options(p)
    _calib_options(p)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize,
                   _defaults={**_FMT_DEFAULTS, **_CALIB_DEFAULTS})

    p = sub.add_parser("infer", help="classify one frame from a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer, _defaults={"index": 0})

    p = sub.add_parser("eval", help="accuracy and confusion matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["all", "train", "test"], default=None)
    p.add_argument("--test-frac", type=float, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--compare", action="store_true", default=None,
                   help="also run fixed-point and report the delta")
    _fmt_options(p)
    _calib_options(p)
    p.add_argument("--machine", action="store_true", default=None,
                   help="CSV output")
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval, _defaults={
        "split": "all", "test_frac": 2.0 / 7.0, "split_seed": 0,
        "compare": False, "machine": False, **_FMT_DEFAULTS,
        **_CALIB_DEFAULTS})

    p = sub.add_parser("estimate", help="latency/resource/energy estimate")
    p.add_argument("--model")
    p.add_argument("--arch")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--schedule", default=None,
                   help="sequential | pipeline[,iiN][,uN]")
    p.add_argument("--clock", type=float, default=None)
    p.add_argument("--power", type=float, default=None, help="watts")
    p.add_argument("--calibrate-to", type=float, default=None,
                   help="fit cycles_per_mac so this model hits the given ms")
    _fmt_options(p)
    p.add_argument("--machine", action="store_true", default=None,
                   help="CSV output")
    p.add_argument("--config")
    p.set_defaults(func=cmd_estimate, _defaults={
        "classes": 5, "size": 32, "schedule": "sequential",
        "clock": dse.DEFAULT_CLOCK_MHZ, "machine": False, **_FMT_DEFAULTS})

    p = sub.add_parser("sweep", help="evaluate an arch x schedule grid")
    p.add_argument("--archs", required=True,
                   help="comma-separated arch strings")
    p.add_argument("--schedules", default=None,
                   help="semicolon-separated schedule specs")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--clock", type=float, default=None)
    p.add_argument("--power", type=float, default=None)
    _fmt_options(p)
    p.add_argument("--machine", action="store_true", default=None,
                   help="CSV output")
    p.add_argument("--out", default=None, help="also write the CSV here")
    p.add_argument("--config")
    p.set_defaults(func=cmd_sweep, _defaults={
        "schedules": "sequential;pipeline", "classes": 5, "size": 32,
        "clock": dse.DEFAULT_CLOCK_MHZ, "machine": False, **_FMT_DEFAULTS})

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except model_io.FormatError as e:
        print("file error: %s" % e, file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print("i/o error: %s" % e, file=sys.stderr)
        return EXIT_IO
    except (trainer.FitDiverged, FloatingPointError, OverflowError) as e:
        print("numeric error: %s" % e, file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
