"""Command-line interface.

Every verb reads a JSON config file; individual keys can be overridden on
the command line with ``--set key=value``. Outputs land under --output-dir.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

VERBS = (
    "trace",
    "localize",
    "fit",
    "render",
    "render-music",
    "binauralize",
    "grid",
    "soundfield",
    "eval",
    "transfer",
)

THREADS_ENV_VAR = "RIRKIT_THREADS"


@dataclass
class CommandSpec:
    verb: str
    config_path: Path
    overrides: dict = field(default_factory=dict)
    output_dir: Path = Path(".")
    threads: int = 1


class UsageError(Exception):
    pass


def _parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def parse_args(argv: list[str]) -> CommandSpec:
    """Parse CLI arguments into a validated CommandSpec.

    Raises SystemExit(0) for --help and UsageError for bad input.
    """
    parser = argparse.ArgumentParser(
        prog="rirkit",
        description="Differentiable room-impulse-response rendering and fitting.",
    )
    sub = parser.add_subparsers(dest="verb")
    for verb in VERBS:
        p = sub.add_parser(verb, help=f"run the {verb} workflow")
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (JSON-parsed value)",
        )
        p.add_argument("--output-dir", default=".", help="directory for artifacts")
        p.add_argument(
            "--threads",
            type=int,
            default=int(os.environ.get(THREADS_ENV_VAR, "1")),
            help="worker cap for parallel sections",
        )

    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise UsageError("bad arguments") from exc
    if ns.verb is None:
        raise UsageError("a command verb is required")
    config_path = Path(ns.config)
    if not config_path.is_file():
        raise UsageError(f"config file not readable: {config_path}")
    overrides = dict(_parse_override(o) for o in ns.overrides)
    return CommandSpec(
        verb=ns.verb,
        config_path=config_path,
        overrides=overrides,
        output_dir=Path(ns.output_dir),
        threads=max(1, ns.threads),
    )


def _load_config(spec: CommandSpec) -> dict:
    with open(spec.config_path) as f:
        cfg = json.load(f)
    cfg.update(spec.overrides)
    return cfg


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def _render_config(cfg: dict):
    from .renderer import RenderConfig

    return RenderConfig(
        render_length=float(cfg.get("render_length", 2.0)),
        sample_rate=int(cfg.get("sample_rate", 48000)),
        max_order=int(cfg.get("max_order", 5)),
        axial_order=int(cfg.get("axial_order", 50)),
        fft_size=int(cfg.get("fft_size", 8192)),
    )


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise FileNotFoundError(f"config is missing required keys: {', '.join(missing)}")


def _cmd_trace(spec: CommandSpec, cfg: dict) -> None:
    from .geometry import load_room
    from .tracer import dump_paths, trace_all

    _require(cfg, "room", "source", "listener")
    base = spec.config_path.parent
    room = load_room(_resolve(base, cfg["room"]))
    paths = trace_all(
        room,
        np.asarray(cfg["source"], dtype=float),
        np.asarray(cfg["listener"], dtype=float),
        int(cfg.get("max_order", 5)),
        int(cfg.get("axial_order", 50)),
    )
    out = spec.output_dir / "paths.jsonl"
    dump_paths(paths, out)
    print(f"traced {len(paths)} paths -> {out}")


def _cmd_localize(spec: CommandSpec, cfg: dict) -> None:
    from .data import load_dataset
    from .fit import localize_source

    _require(cfg, "dataset")
    index = load_dataset(_resolve(spec.config_path.parent, cfg["dataset"]))
    entries = index.train_entries()
    rirs = [index.load_rir(e) for e in entries]
    mics = [e.position for e in entries]
    pos = localize_source(rirs, mics, speed_of_sound=index.room.speed_of_sound)
    out = spec.output_dir / "source_location.json"
    with open(out, "w") as f:
        json.dump({"source_location": pos.tolist()}, f, indent=2)
    print(f"localized source at {pos.round(4).tolist()} -> {out}")


def _cmd_fit(spec: CommandSpec, cfg: dict) -> None:
    from .data import load_dataset
    from .fit import FitConfig, LossConfig, fit
    from .models import save_checkpoint

    _require(cfg, "dataset")
    index = load_dataset(_resolve(spec.config_path.parent, cfg["dataset"]))
    entries = index.train_entries()
    rirs = [index.load_rir(e) for e in entries]
    mics = [e.position for e in entries]
    fit_cfg = FitConfig(
        epochs=int(cfg.get("epochs", 1000)),
        toa_perturb_samples=float(cfg.get("toa_perturb_samples", 7.0)),
        pink_reg_start_fraction=float(cfg.get("pink_reg_start_fraction", 0.5)),
        pink_duration=float(cfg.get("pink_duration", 5.0)),
        random_seed=int(cfg.get("random_seed", 0)),
    )
    source = index.source_location
    if cfg.get("source_location") is not None:
        source = np.asarray(cfg["source_location"], dtype=float)
    params, report = fit(
        rirs,
        mics,
        index.room,
        render_cfg=_render_config(cfg),
        loss_cfg=LossConfig(),
        fit_cfg=fit_cfg,
        source_location=source,
    )
    ckpt = spec.output_dir / "checkpoint"
    save_checkpoint(params, ckpt)
    report.save(spec.output_dir / "fit_report.json")
    print(
        f"fit {fit_cfg.epochs} epochs, final loss "
        f"{report.per_epoch_loss[-1] if report.per_epoch_loss else float('nan'):.6g} -> {ckpt}"
    )


def _load_params_room(spec: CommandSpec, cfg: dict):
    from .geometry import load_room
    from .models import load_checkpoint

    _require(cfg, "checkpoint", "room")
    base = spec.config_path.parent
    ckpt = _resolve(base, cfg["checkpoint"])
    if not (ckpt / "params.json").is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    return load_checkpoint(ckpt), load_room(_resolve(base, cfg["room"]))


def _cmd_render(spec: CommandSpec, cfg: dict) -> None:
    from .dsp import write_wav
    from .renderer import render_rir

    _require(cfg, "listener")
    params, room = _load_params_room(spec, cfg)
    clip = render_rir(params, np.asarray(cfg["listener"], dtype=float), room, _render_config(cfg))
    out = spec.output_dir / "rir.wav"
    write_wav(out, clip)
    print(f"rendered RIR ({clip.n_samples} samples) -> {out}")


def _cmd_render_music(spec: CommandSpec, cfg: dict) -> None:
    from .dsp import read_wav, write_wav
    from .renderer import render_music

    _require(cfg, "listener", "dry")
    params, room = _load_params_room(spec, cfg)
    dry = read_wav(_resolve(spec.config_path.parent, cfg["dry"]))
    clip = render_music(
        params, np.asarray(cfg["listener"], dtype=float), room, _render_config(cfg), dry
    )
    out = spec.output_dir / "music.wav"
    write_wav(out, clip)
    print(f"rendered music ({clip.duration:.2f} s) -> {out}")


def _cmd_binauralize(spec: CommandSpec, cfg: dict) -> None:
    from .dsp import write_wav
    from .renderer import HrirBank, binauralize

    _require(cfg, "listener", "hrir_bank")
    params, room = _load_params_room(spec, cfg)
    rcfg = _render_config(cfg)
    rcfg.hrir_bank = HrirBank.load(_resolve(spec.config_path.parent, cfg["hrir_bank"]))
    if cfg.get("head_orientation") is not None:
        rcfg.head_orientation = np.asarray(cfg["head_orientation"], dtype=float)
    clip = binauralize(params, np.asarray(cfg["listener"], dtype=float), room, rcfg)
    out = spec.output_dir / "binaural.wav"
    write_wav(out, clip)
    print(f"rendered binaural RIR -> {out}")


def _grid_common(spec: CommandSpec, cfg: dict, band_center):
    from .renderer import render_grid

    params, room = _load_params_room(spec, cfg)
    _require(cfg, "z", "resolution")
    bounds = cfg.get("bounds")
    grid = render_grid(
        params,
        room,
        _render_config(cfg),
        z=float(cfg["z"]),
        resolution=float(cfg["resolution"]),
        bounds=None if bounds is None else tuple(map(tuple, bounds)),
        band_center=band_center,
        threads=spec.threads,
    )
    stem = "grid" if band_center is None else "soundfield"
    grid.save_csv(spec.output_dir / f"{stem}.csv")
    if cfg.get("png", False):
        grid.save_png(spec.output_dir / f"{stem}.png")
    print(f"{stem}: {grid.db.shape[1]}x{grid.db.shape[0]} cells -> {spec.output_dir / (stem + '.csv')}")


def _cmd_grid(spec: CommandSpec, cfg: dict) -> None:
    _grid_common(spec, cfg, None)


def _cmd_soundfield(spec: CommandSpec, cfg: dict) -> None:
    _grid_common(spec, cfg, float(cfg.get("band_center", 70.0)))


def _cmd_eval(spec: CommandSpec, cfg: dict) -> None:
    from .data import evaluate, load_dataset, summarize
    from .models import load_checkpoint
    from .renderer import render_rir

    _require(cfg, "dataset", "checkpoint")
    base = spec.config_path.parent
    index = load_dataset(_resolve(base, cfg["dataset"]))
    ckpt = _resolve(base, cfg["checkpoint"])
    if not (ckpt / "params.json").is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    params = load_checkpoint(ckpt)
    rcfg = _render_config(cfg)

    rows = evaluate(index, lambda pos: render_rir(params, pos, index.room, rcfg))
    csv_path = spec.output_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()) if rows else ["index"])
        writer.writeheader()
        writer.writerows(rows)
    summary = summarize(rows)
    summary["random_seed"] = int(cfg.get("random_seed", 0))
    with open(spec.output_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    print(f"evaluated {len(rows)} points -> {csv_path}")


def _cmd_transfer(spec: CommandSpec, cfg: dict) -> None:
    from .models import load_checkpoint, save_checkpoint, transfer_surface

    _require(cfg, "from_checkpoint", "from_surface", "to_checkpoint", "to_surface")
    base = spec.config_path.parent
    src = load_checkpoint(_resolve(base, cfg["from_checkpoint"]))
    dst = load_checkpoint(_resolve(base, cfg["to_checkpoint"]))
    out_params = transfer_surface(src, int(cfg["from_surface"]), dst, int(cfg["to_surface"]))
    out = spec.output_dir / "checkpoint"
    save_checkpoint(out_params, out)
    print(
        f"transferred surface {cfg['from_surface']} -> {cfg['to_surface']}, wrote {out}"
    )


_HANDLERS = {
    "trace": _cmd_trace,
    "localize": _cmd_localize,
    "fit": _cmd_fit,
    "render": _cmd_render,
    "render-music": _cmd_render_music,
    "binauralize": _cmd_binauralize,
    "grid": _cmd_grid,
    "soundfield": _cmd_soundfield,
    "eval": _cmd_eval,
    "transfer": _cmd_transfer,
}


def dispatch(spec: CommandSpec) -> int:
    """Run the workflow for a parsed command. Returns a process exit code."""
    torch.set_num_threads(spec.threads)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load_config(spec)
        _HANDLERS[spec.verb](spec, cfg)
    except (FileNotFoundError, ValueError, KeyError, RuntimeError) as exc:
        print(f"rirkit {spec.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        spec = parse_args(argv)
    except UsageError as exc:
        print(f"rirkit: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return dispatch(spec)


if __name__ == "__main__":
    sys.exit(main())
