"""Command-line entry point: datagen, train, render, eval, gradcheck, bench, ablate.

Every option can also be given in a TOML file passed with ``--config``; keys are
the option names with dashes replaced by underscores.  Command-line values win
over file values, which win over built-in defaults.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContractViolation, HDR4DGSError, ManifestError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("hdr4dgs")


class UsageError(Exception):
    pass


def _train_config_cls():
    from .trainer import TrainConfig
    return TrainConfig


# ---------------------------------------------------------------------------
# option tables: dest -> (flags, kwargs, default)


def _common(extra=None):
    opts = {
        "seed": (["--seed"], {"type": int, "help": "random seed"}, 0),
        "threads": (["--threads"], {"type": int, "help": "worker threads for the compositing kernels"}, None),
    }
    opts.update(extra or {})
    return opts


def _bool_flag(name, help_text):
    return ([f"--{name}"], {"action": argparse.BooleanOptionalAction, "help": help_text})


DATAGEN_OPTS = _common({
    "scene": (["--scene"], {"help": "scene name"}, "two-sphere"),
    "pattern": (["--pattern"], {"choices": ["stereo", "monocular"], "help": "capture pattern"}, "stereo"),
    "timesteps": (["--timesteps"], {"type": int, "help": "number of timestamps T"}, 20),
    "cameras": (["--cameras"], {"type": int, "help": "number of ring cameras Q"}, 5),
    "size": (["--size"], {"type": int, "help": "image width and height"}, 64),
    "exposures": (["--exposures"], {"type": float, "nargs": "+", "help": "exposure times in seconds"},
                  [0.125, 2.0, 32.0]),
    "supersample": (["--supersample"], {"type": int, "help": "ray-trace samples per pixel side"}, 2),
    "with_hdr": (*_bool_flag("with-hdr", "also write PFM HDR ground truth"), True),
    "split_policy": (["--split-policy"], {"choices": ["interleave", "time", "none"],
                                          "help": "train/test split rule"}, "interleave"),
    "out": (["--out"], {"help": "output directory"}, None),
})


def _train_opts():
    cls = _train_config_cls()
    opts = {}
    helps = {
        "dataset": "dataset directory or manifest.json",
        "out_dir": "output directory for logs and checkpoints",
        "pixel_level": "2D pixel-level tone-mapping supervision",
        "supervision": "ldr or ldr+hdr",
        "cell_kind": "context learner cell: gru or rnn",
        "k": "radiance-bank window length",
    }
    for f in dataclasses.fields(cls):
        if f.name == "seed":
            continue
        name = f.name.replace("_", "-")
        h = helps.get(f.name, f"training option {f.name}")
        if isinstance(f.default, bool):
            opts[f.name] = (*_bool_flag(name, h), f.default)
        else:
            flags = [f"--{name}"]
            if f.name == "out_dir":
                flags.append("--out")
            opts[f.name] = (flags, {"type": type(f.default), "help": h}, f.default)
    return _common(opts)


RENDER_OPTS = _common({
    "checkpoint": (["--checkpoint"], {"help": "checkpoint file"}, None),
    "dataset": (["--dataset"], {"help": "dataset directory (for --frame / --all-test)"}, None),
    "frame": (["--frame"], {"help": "manifest LDR frame path or index"}, None),
    "camera": (["--camera"], {"help": "camera JSON file or inline JSON object"}, None),
    "all_test": (*_bool_flag("all-test", "render every test frame of the dataset"), False),
    "t": (["--t"], {"type": float, "help": "time in [0, 1] (clamped)"}, None),
    "exposure": (["--exposure"], {"type": float, "help": "exposure time in seconds"}, None),
    "mode": (["--mode"], {"choices": ["hdr", "ldr", "both"], "help": "what to render"}, "both"),
    "mu": (["--mu"], {"type": float, "help": "mu-law factor for the HDR preview"}, 5000.0),
    "out": (["--out"], {"help": "output directory"}, None),
})

EVAL_OPTS = _common({
    "checkpoint": (["--checkpoint"], {"help": "checkpoint file"}, None),
    "dataset": (["--dataset"], {"help": "dataset directory or manifest.json"}, None),
    "split": (["--split"], {"choices": ["train", "test"], "help": "which frames"}, "test"),
    "out": (["--out"], {"help": "output directory for CSV and figure"}, None),
})

GRADCHECK_OPTS = _common({
    "preset": (["--preset"], {"choices": ["default", "quick"], "help": "problem size preset"}, "default"),
    "inject_wrong_sign": (["--inject-wrong-sign"], {"help": "self-test: negate one group's analytic gradient"},
                          None),
    "tolerance": (["--tolerance"], {"type": float, "help": "max relative error"}, 1e-3),
})

BENCH_OPTS = _common({
    "checkpoint": (["--checkpoint"], {"help": "checkpoint file"}, None),
    "dataset": (["--dataset"], {"help": "dataset directory for cameras (optional)"}, None),
    "frames": (["--frames"], {"type": int, "help": "timed renders per thread count (>= 20)"}, 20),
    "thread_counts": (["--thread-counts"], {"type": int, "nargs": "+", "help": "thread counts to time"}, [1, 8]),
    "out": (["--out"], {"help": "output directory for CSV and figure"}, None),
})


def _ablate_opts():
    opts = _train_opts()
    opts.update({
        "axis": (["--axis"], {"choices": ["cell_kind", "k", "pixel_level", "supervision"],
                              "help": "ablation axis"}, None),
        "values": (["--values"], {"nargs": "+", "help": "axis values (default: the full grid)"}, None),
    })
    return opts


COMMANDS = {
    "datagen": ("generate a synthetic multi-exposure dataset", lambda: DATAGEN_OPTS),
    "train": ("optimize a scene and tone mapper", _train_opts),
    "render": ("render HDR / LDR images from a checkpoint", lambda: RENDER_OPTS),
    "eval": ("PSNR/SSIM of a checkpoint on a dataset split", lambda: EVAL_OPTS),
    "gradcheck": ("finite-difference check of all analytic gradients", lambda: GRADCHECK_OPTS),
    "bench": ("render throughput per thread count", lambda: BENCH_OPTS),
    "ablate": ("train and evaluate one variant per ablation value", _ablate_opts),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdr4dgs", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="exit codes: 0 ok, 1 verification failure, 2 usage error, 3 I/O error")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (help_text, opts_fn) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML file with option values", default=argparse.SUPPRESS)
        for dest, (flags, kwargs, default) in opts_fn().items():
            kw = dict(kwargs)
            if default is not None:
                kw["help"] = f"{kw.get('help', '')} (default: {default})"
            p.add_argument(*flags, dest=dest, default=argparse.SUPPRESS, **kw)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, config-file values and explicit flags for one command."""
    opts = COMMANDS[command][1]()
    values = {dest: default for dest, (_, _, default) in opts.items()}
    cli = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "config")}
    if getattr(ns, "config", None):
        from .trainer import load_config_file
        try:
            file_values = load_config_file(ns.config)
        except OSError as exc:
            raise OSError(f"cannot read config {ns.config}: {exc}") from exc
        except ValueError as exc:
            raise UsageError(f"bad config file {ns.config}: {exc}") from exc
        unknown = sorted(set(file_values) - set(opts))
        if unknown:
            raise UsageError(f"unknown keys in {ns.config} for '{command}': {', '.join(unknown)}")
        for key, val in file_values.items():
            values[key] = _coerce(key, val, opts[key][1])
    values.update(cli)
    return values


def _coerce(key, value, kwargs):
    """Apply an option's argparse type and choices to a config-file value."""
    conv = kwargs.get("type")
    try:
        if kwargs.get("action") is argparse.BooleanOptionalAction:
            if not isinstance(value, bool):
                raise TypeError("expected true or false")
        elif kwargs.get("nargs") == "+":
            if not isinstance(value, list):
                value = [value]
            value = [conv(x) for x in value] if conv else [str(x) for x in value]
        elif conv is not None:
            if isinstance(value, bool) and conv is not bool:
                raise TypeError("expected a number or string")
            value = conv(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config key {key!r}: bad value {value!r} ({exc})") from exc
    choices = kwargs.get("choices")
    if choices is not None and value not in choices:
        raise UsageError(f"config key {key!r}: {value!r} is not one of {', '.join(map(str, choices))}")
    return value


def _need(values, *keys):
    missing = [k for k in keys if values.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _set_threads(n):
    if n is None:
        return None
    import numba
    if n < 1:
        raise UsageError("--threads must be >= 1")
    effective = min(n, numba.config.NUMBA_NUM_THREADS)
    if effective < n:
        log.warning("requested %d threads, only %d available", n, effective)
    numba.set_num_threads(effective)
    return effective


def _load_manifest(path):
    from .datagen import Manifest
    if path is None:
        raise UsageError("missing required option --dataset")
    return Manifest.load(path)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_datagen(v) -> int:
    from .datagen import SceneSpec, write_dataset
    _need(v, "out")
    spec = SceneSpec(name=v["scene"], timesteps=v["timesteps"], cameras=v["cameras"], size=v["size"],
                     exposures=tuple(v["exposures"]), supersample=v["supersample"])
    manifest = write_dataset(spec, v["out"], with_hdr=v["with_hdr"], pattern=v["pattern"],
                             split_policy=v["split_policy"])
    n_ldr = sum(e["kind"] == "ldr" for e in manifest.entries)
    n_hdr = sum(e["kind"] == "hdr" for e in manifest.entries)
    print(f"wrote {n_ldr} LDR and {n_hdr} HDR frames to {v['out']} (dataset hash {manifest.dataset_hash()})")
    return EXIT_OK


def _train_config(v):
    cls = _train_config_cls()
    names = {f.name for f in dataclasses.fields(cls)}
    return cls.from_dict({k: val for k, val in v.items() if k in names})


def cmd_train(v) -> int:
    from .plotting import plot_training_log
    from .trainer import train
    _need(v, "dataset", "out_dir")
    _set_threads(v["threads"])
    cfg = _train_config(v)
    manifest = _load_manifest(cfg.dataset)

    def progress(row):
        log.info("iter %d loss %.5f ldr %.5f hdr %.5f psnr %.2f", *row)

    result = train(manifest, cfg, out_dir=cfg.out_dir, progress=progress)
    plot_training_log(result.log_rows, Path(cfg.out_dir) / "train_log.png")
    print(f"trained {cfg.iterations} iterations in {result.seconds:.1f} s; "
          f"skipped steps {result.state.skipped}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def _parse_camera(text):
    from .camera import Camera
    p = Path(text)
    data = json.loads(p.read_text(encoding="utf-8")) if p.is_file() else json.loads(text)
    return Camera.from_dict(data)


def _pick_frame(manifest, frame):
    records = manifest.records()
    if frame.isdigit():
        idx = int(frame)
        if not 0 <= idx < len(records):
            raise UsageError(f"frame index {idx} out of range [0, {len(records)})")
        return records[idx]
    for rec in records:
        if rec.ldr_path.relative_to(manifest.root).as_posix() == frame or rec.ldr_path.name == frame:
            return rec
    raise UsageError(f"frame {frame!r} not in manifest")


def _render_one(state, camera, t, exposure, mode, mu, out: Path, stem: str) -> list[Path]:
    from .imageio import write_pfm, write_png
    from .losses import mu_law
    from .rasterizer import render_frame
    from .tonemap import ToneContext
    ctx = None
    if mode in ("ldr", "both"):
        if exposure is None:
            raise UsageError("--exposure is required for LDR rendering")
        ctx = ToneContext(state.tone, state.tone.bank.nearest_index(t), exposure)
    hdr, ldr, _ = render_frame(state.cloud, camera, t, mode in ("hdr", "both"), ctx)
    written = []
    if hdr is not None:
        written.append(out / f"{stem}_hdr.pfm")
        write_pfm(written[-1], hdr)
        written.append(out / f"{stem}_hdr_preview.png")
        write_png(written[-1], mu_law(hdr, mu))
    if ldr is not None:
        written.append(out / f"{stem}_ldr.png")
        write_png(written[-1], ldr)
    return written


def cmd_render(v) -> int:
    from .trainer import load_checkpoint
    _need(v, "checkpoint", "out")
    state = load_checkpoint(v["checkpoint"])
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if v["all_test"]:
        manifest = _load_manifest(v["dataset"])
        for rec in manifest.records("test"):
            stem = rec.ldr_path.stem
            written += _render_one(state, rec.camera, rec.time, rec.exposure, v["mode"], v["mu"], out, stem)
    else:
        if v["frame"] is not None:
            rec = _pick_frame(_load_manifest(v["dataset"]), v["frame"])
            camera = rec.camera
            t = rec.time if v["t"] is None else v["t"]
            exposure = rec.exposure if v["exposure"] is None else v["exposure"]
            stem = rec.ldr_path.stem
        elif v["camera"] is not None:
            camera = _parse_camera(v["camera"])
            _need(v, "t")
            t, exposure, stem = v["t"], v["exposure"], "render"
        else:
            raise UsageError("give --frame (with --dataset), --camera or --all-test")
        if not 0.0 <= t <= 1.0:
            clamped = min(max(t, 0.0), 1.0)
            log.warning("t=%g outside [0, 1], clamped to %g", t, clamped)
            t = clamped
        written = _render_one(state, camera, t, exposure, v["mode"], v["mu"], out, stem)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_eval(v) -> int:
    from .plotting import plot_eval
    from .trainer import evaluate, load_checkpoint, write_eval, write_summary
    _need(v, "checkpoint", "out")
    _set_threads(v["threads"])
    state = load_checkpoint(v["checkpoint"])
    manifest = _load_manifest(v["dataset"])
    result = evaluate(state, manifest, v["split"])
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_eval(out / "metrics.csv", result)
    write_summary(out / "summary.csv", result.summary)
    plot_eval(result.rows, out / "metrics.png")
    s = result.summary
    print(f"{s['frames']} frames: LDR PSNR {s['ldr_psnr']:.2f} dB SSIM {s['ldr_ssim']:.4f}; "
          f"HDR(mu) PSNR {s['hdr_mu_psnr']:.2f} dB SSIM {s['hdr_mu_ssim']:.4f}; {s['fps']:.1f} fps")
    return EXIT_OK


def cmd_gradcheck(v) -> int:
    from .gradcheck import GROUPS, run_gradcheck
    group = v["inject_wrong_sign"]
    if group is not None and group not in GROUPS:
        raise UsageError(f"--inject-wrong-sign must be one of {', '.join(GROUPS)}")
    report = run_gradcheck(v["preset"], seed=v["seed"], inject_wrong_sign=group, tolerance=v["tolerance"])
    print("\n".join(report.lines()))
    if report.passed:
        print("gradcheck passed")
        return EXIT_OK
    print("gradcheck FAILED: " + ", ".join(report.failed))
    return EXIT_VERIFY


def bench_render(state, cameras, times, exposure, frames):
    """Median seconds per LDR_3D render over ``frames`` timed renders (after one warm-up)."""
    from .rasterizer import render
    images = []
    render(state.cloud, cameras[0], times[0], "ldr3d", state.tone, exposure)
    durations = []
    for i in range(frames):
        cam = cameras[i % len(cameras)]
        t = times[i % len(times)]
        t0 = time.perf_counter()
        img = render(state.cloud, cam, t, "ldr3d", state.tone, exposure)
        durations.append(time.perf_counter() - t0)
        images.append(img)
    return float(np.median(durations)), images


def cmd_bench(v) -> int:
    import numba

    from .camera import orbit_cameras
    from .plotting import plot_bench
    from .trainer import load_checkpoint
    _need(v, "checkpoint")
    if v["frames"] < 20:
        raise UsageError("--frames must be at least 20")
    state = load_checkpoint(v["checkpoint"])
    if v["dataset"] is not None:
        recs = _load_manifest(v["dataset"]).records()
        cams = list({r.camera_id: r.camera for r in recs}.values())
        size = (cams[0].height, cams[0].width)
    else:
        cams = orbit_cameras(5, 4.0, 1.2, 64)
        size = (64, 64)
    times = list(np.linspace(0.0, 1.0, 7))
    rows = []
    reference = None
    identical = True
    max_threads = numba.config.NUMBA_NUM_THREADS
    for n in v["thread_counts"]:
        eff = min(n, max_threads)
        numba.set_num_threads(eff)
        med, images = bench_render(state, cams, times, 2.0, v["frames"])
        if reference is None:
            reference = images
        else:
            identical &= all(np.array_equal(a, b) for a, b in zip(reference, images))
        rows.append({"threads": n, "effective_threads": eff, "fps_median": 1.0 / med, "median_ms": 1e3 * med,
                     "frames": v["frames"], "width": size[1], "height": size[0], "gaussians": state.cloud.n})
    for r in rows:
        print(f"threads {r['threads']} (effective {r['effective_threads']}): {r['fps_median']:.1f} fps, "
              f"{r['median_ms']:.2f} ms median, {r['width']}x{r['height']}, {r['gaussians']} Gaussians")
    if v["out"] is not None:
        out = Path(v["out"])
        out.mkdir(parents=True, exist_ok=True)
        header = list(rows[0])
        _write_csv(out / "bench.csv", header, [[r[k] for k in header] for r in rows])
        plot_bench(rows, out / "bench.png")
    if not identical:
        print("bench FAILED: images differ between thread counts")
        return EXIT_VERIFY
    print("images identical across thread counts")
    return EXIT_OK


def cmd_ablate(v) -> int:
    from .plotting import plot_ablation
    from .trainer import ablate, write_ablation
    _need(v, "dataset", "axis", "out_dir")
    _set_threads(v["threads"])
    cfg = _train_config({k: val for k, val in v.items() if k not in ("axis", "values")})
    manifest = _load_manifest(cfg.dataset)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        log.info("%s=%s: LDR %.2f dB, HDR(mu) %.2f dB", row[0], row[1], row[7], row[9])

    rows = ablate(manifest, cfg, v["axis"], v["values"], progress=progress)
    write_ablation(out / f"ablation_{v['axis']}.csv", rows)
    plot_ablation(rows, v["axis"], out / f"ablation_{v['axis']}.png")
    for r in rows:
        print(f"{r[0]}={r[1]}: LDR PSNR {r[7]:.2f} dB, HDR(mu) PSNR {r[9]:.2f} dB")
    return EXIT_OK


HANDLERS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(ns.command, ns)
        return HANDLERS[ns.command](values)
    except (UsageError, ContractViolation) as exc:
        print(f"hdr4dgs {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, CheckpointError, OSError) as exc:
        print(f"hdr4dgs {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HDR4DGSError as exc:
        print(f"hdr4dgs {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
