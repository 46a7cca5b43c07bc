"""RIR assembly from traced paths and scene parameters, plus binaural
rendering against an HRIR bank and spatial loudness grids.

The core entry point for fitting is :func:`render_rir_signal`, which is
differentiable w.r.t. every learnable tensor in SceneParams; the traced path
set is treated as constant. File-level wrappers return AudioClips.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .dsp import AudioClip, DTYPE, delay_signal, fft_convolve, minimum_phase_ir, bandpass
from .geometry import Room
from .models import SceneParams, _interp_weights, gamma_curve
from .tracer import PathRecord, PathSet, trace_all

DB_FLOOR = 1e-12


@dataclass
class HrirBank:
    """Direction-indexed HRIR pairs, all in head coordinates (+x forward)."""

    directions: np.ndarray  # (m, 3) unit vectors
    left: np.ndarray  # (m, taps)
    right: np.ndarray  # (m, taps)
    sample_rate: int

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.left = np.atleast_2d(np.asarray(self.left, dtype=np.float64))
        self.right = np.atleast_2d(np.asarray(self.right, dtype=np.float64))
        norms = np.linalg.norm(self.directions, axis=1, keepdims=True)
        self.directions = self.directions / norms
        if not (len(self.directions) == len(self.left) == len(self.right)):
            raise ValueError("directions/left/right must have matching first dimension")

    def nearest(self, direction: np.ndarray) -> int:
        """Index of the bank direction with smallest angular distance."""
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        return int(np.argmax(self.directions @ d))

    def average_pair(self) -> tuple[np.ndarray, np.ndarray]:
        """Direction-averaged filters, used for the isotropic residual."""
        return self.left.mean(axis=0), self.right.mean(axis=0)

    def save(self, directory: str | Path) -> None:
        """Write index.json plus one stereo WAV per direction."""
        from .dsp import write_wav

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, d in enumerate(self.directions):
            name = f"hrir_{i:04d}.wav"
            write_wav(
                directory / name,
                AudioClip(np.stack([self.left[i], self.right[i]]), self.sample_rate),
            )
            entries.append({"direction": d.tolist(), "file": name})
        with open(directory / "index.json", "w") as f:
            json.dump({"sample_rate": self.sample_rate, "entries": entries}, f, indent=2)

    @staticmethod
    def load(directory: str | Path) -> "HrirBank":
        from .dsp import read_wav

        directory = Path(directory)
        with open(directory / "index.json") as f:
            doc = json.load(f)
        dirs, lefts, rights = [], [], []
        for entry in doc["entries"]:
            clip = read_wav(directory / entry["file"])
            if clip.channels != 2:
                raise ValueError(f"{entry['file']}: HRIR files must be stereo")
            dirs.append(entry["direction"])
            lefts.append(clip.samples[0])
            rights.append(clip.samples[1])
        taps = max(len(x) for x in lefts)
        pad = lambda xs: np.stack([np.pad(x, (0, taps - len(x))) for x in xs])
        return HrirBank(
            directions=np.asarray(dirs),
            left=pad(lefts),
            right=pad(rights),
            sample_rate=int(doc["sample_rate"]),
        )


@dataclass
class RenderConfig:
    """Render-time constants shared by all rendering entry points."""

    render_length: float = 2.0  # seconds
    sample_rate: int = 48000
    max_order: int = 5
    axial_order: int = 50
    fft_size: int = 8192
    hrir_bank: Optional[HrirBank] = None
    head_orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.render_length <= 0:
            raise ValueError("render_length must be positive")
        self.head_orientation = np.asarray(self.head_orientation, dtype=np.float64)

    @property
    def render_samples(self) -> int:
        return int(round(self.render_length * self.sample_rate))

    @property
    def bin_frequencies(self) -> np.ndarray:
        """One-sided FFT bin centers in Hz for the path filters."""
        return np.fft.rfftfreq(self.fft_size, d=1.0 / self.sample_rate)


def _path_filters(
    paths: Sequence[PathRecord], params: SceneParams, cfg: RenderConfig
) -> torch.Tensor:
    """Minimum-phase filters for each path: D(d_p) * prod R_s sampled on the
    FFT bins, returned as (n_paths, fft_size) time-domain filters."""
    freqs = cfg.bin_frequencies
    dmap = params.directivity
    cf = dmap.center_frequencies

    directions = np.stack([p.out_direction for p in paths])
    local = directions @ dmap.orientation  # row i: orientation^T @ d_i
    dots = torch.as_tensor(dmap.lattice @ local.T, dtype=DTYPE)  # (lattice, P)
    w = torch.softmax(-dmap.sharpness * (1.0 - dots), dim=0)
    band_logs = w.T @ dmap.log_gains  # (P, F)

    i0, i1, frac = _interp_weights(cf, freqs)
    frac_t = torch.as_tensor(frac, dtype=DTYPE)
    log_mag = band_logs[:, i0] * (1.0 - frac_t) + band_logs[:, i1] * frac_t

    surface_curves = {}
    for sid, resp in params.surface_responses.items():
        amps = resp.band_amplitudes()
        r0, r1, rw = _interp_weights(resp.center_frequencies, freqs)
        rw_t = torch.as_tensor(rw, dtype=DTYPE)
        surface_curves[sid] = torch.log(amps[r0] * (1.0 - rw_t) + amps[r1] * rw_t)

    for i, p in enumerate(paths):
        for sid in p.surfaces:
            if sid not in surface_curves:
                raise KeyError(f"path references surface {sid} with no fitted response")
            log_mag[i] = log_mag[i] + surface_curves[sid]

    return minimum_phase_ir(torch.exp(log_mag))


def render_path_contribution(
    path: PathRecord, params: SceneParams, cfg: RenderConfig
) -> torch.Tensor:
    """Time-domain contribution of a single path: the minimum-phase filter of
    the directivity/reflection product, scaled by air absorption over the
    travel time and 1/length spreading, delayed to the arrival time."""
    h = _path_filters([path], params, cfg)[0]
    alpha = torch.clamp(params.air_absorption, min=1e-6, max=1.0)
    scale = alpha**path.arrival_time / path.length
    return delay_signal(h * scale, path.arrival_time, cfg.sample_rate, cfg.render_samples)


def render_rir_signal(
    params: SceneParams,
    paths: PathSet | Sequence[PathRecord],
    cfg: RenderConfig,
    arrival_offsets: Optional[np.ndarray] = None,
) -> torch.Tensor:
    """Differentiable RIR: blend of the traced-path sum convolved with the
    source IR and the uniform residual, weighted per-sample by the temporal
    spline. ``arrival_offsets`` (seconds per path) implements the training-time
    arrival perturbation; inference leaves it None."""
    path_list = list(paths)
    n = cfg.render_samples
    traced = torch.zeros(n, dtype=DTYPE)
    if path_list:
        filters = _path_filters(path_list, params, cfg)
        alpha = torch.clamp(params.air_absorption, min=1e-6, max=1.0)
        times = np.array([p.arrival_time for p in path_list])
        lengths = torch.as_tensor([p.length for p in path_list], dtype=DTYPE)
        scales = alpha ** torch.as_tensor(times, dtype=DTYPE) / lengths
        if arrival_offsets is not None:
            times = np.maximum(times + np.asarray(arrival_offsets, dtype=np.float64), 0.0)
        for i in range(len(path_list)):
            traced = traced + delay_signal(
                filters[i] * scales[i], float(times[i]), cfg.sample_rate, n
            )
    with_source = fft_convolve(traced, params.source_ir)[:n]
    gamma = gamma_curve(
        params.spline_knots, np.arange(n) / cfg.sample_rate, cfg.render_length
    )
    residual = params.residual
    if residual.shape[0] < n:
        residual = torch.nn.functional.pad(residual, (0, n - residual.shape[0]))
    else:
        residual = residual[:n]
    return gamma * with_source + (1.0 - gamma) * residual


def render_rir(
    params: SceneParams,
    listener,
    room: Room,
    cfg: RenderConfig,
    source=None,
) -> AudioClip:
    """Trace paths for the listener and render a mono RIR."""
    src = params.source_location if source is None else np.asarray(source, dtype=np.float64)
    paths = trace_all(room, src, listener, cfg.max_order, cfg.axial_order)
    with torch.no_grad():
        signal = render_rir_signal(params, paths, cfg)
    return AudioClip(signal.numpy(), cfg.sample_rate)


def render_music(
    params: SceneParams,
    listener,
    room: Room,
    cfg: RenderConfig,
    dry: AudioClip,
    source=None,
) -> AudioClip:
    """Convolve dry source audio with the rendered RIR at the listener."""
    if dry.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"dry clip rate {dry.sample_rate} != render rate {cfg.sample_rate}"
        )
    if dry.channels != 1:
        raise ValueError("dry clip must be mono")
    rir = render_rir(params, listener, room, cfg, source=source)
    wet = fft_convolve(
        torch.as_tensor(dry.mono, dtype=DTYPE), torch.as_tensor(rir.mono, dtype=DTYPE)
    )
    return AudioClip(wet.numpy(), cfg.sample_rate)


def binauralize(
    params: SceneParams,
    listener,
    room: Room,
    cfg: RenderConfig,
    source=None,
) -> AudioClip:
    """Stereo render: each path's contribution (convolved with the source IR)
    goes through the HRIR pair nearest its arrival direction in head
    coordinates; the residual uses the bank's direction-averaged pair."""
    if cfg.hrir_bank is None:
        raise ValueError("binauralize requires cfg.hrir_bank")
    bank = cfg.hrir_bank
    src = params.source_location if source is None else np.asarray(source, dtype=np.float64)
    paths = trace_all(room, src, listener, cfg.max_order, cfg.axial_order)
    n = cfg.render_samples
    head = cfg.head_orientation

    with torch.no_grad():
        grouped: dict[int, torch.Tensor] = {}
        if len(paths):
            filters = _path_filters(list(paths), params, cfg)
            alpha = torch.clamp(params.air_absorption, min=1e-6, max=1.0)
            for i, p in enumerate(paths):
                scale = alpha**p.arrival_time / p.length
                contrib = delay_signal(
                    filters[i] * scale, p.arrival_time, cfg.sample_rate, n
                )
                idx = bank.nearest(head.T @ p.in_direction)
                grouped[idx] = grouped.get(idx, torch.zeros(n, dtype=DTYPE)) + contrib

        left = torch.zeros(n, dtype=DTYPE)
        right = torch.zeros(n, dtype=DTYPE)
        for idx, summed in grouped.items():
            shaped = fft_convolve(summed, params.source_ir)[:n]
            left = left + fft_convolve(shaped, torch.as_tensor(bank.left[idx], dtype=DTYPE))[:n]
            right = right + fft_convolve(shaped, torch.as_tensor(bank.right[idx], dtype=DTYPE))[:n]

        gamma = gamma_curve(
            params.spline_knots, np.arange(n) / cfg.sample_rate, cfg.render_length
        )
        residual = params.residual
        if residual.shape[0] < n:
            residual = torch.nn.functional.pad(residual, (0, n - residual.shape[0]))
        else:
            residual = residual[:n]
        avg_l, avg_r = bank.average_pair()
        res_l = fft_convolve(residual, torch.as_tensor(avg_l, dtype=DTYPE))[:n]
        res_r = fft_convolve(residual, torch.as_tensor(avg_r, dtype=DTYPE))[:n]
        out_l = gamma * left + (1.0 - gamma) * res_l
        out_r = gamma * right + (1.0 - gamma) * res_r
    return AudioClip(np.stack([out_l.numpy(), out_r.numpy()]), cfg.sample_rate)


@dataclass
class GridResult:
    """RMS loudness raster over a horizontal plane. Cells outside the room
    are NaN."""

    xs: np.ndarray
    ys: np.ndarray
    db: np.ndarray  # (len(ys), len(xs))
    z: float
    band_center: Optional[float] = None

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["x\\y"] + [f"{y:.6g}" for y in self.ys])
            for i, x in enumerate(self.xs):
                writer.writerow([f"{x:.6g}"] + [f"{v:.6f}" for v in self.db[:, i]])

    def save_png(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(
            self.db,
            origin="lower",
            extent=(self.xs[0], self.xs[-1], self.ys[0], self.ys[-1]),
            aspect="equal",
            cmap="inferno",
        )
        fig.colorbar(im, ax=ax, label="dB RMS")
        title = "RMS loudness"
        if self.band_center:
            title += f" @ {self.band_center:.0f} Hz"
        ax.set_title(title)
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        fig.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)


def render_grid(
    params: SceneParams,
    room: Room,
    cfg: RenderConfig,
    z: float,
    resolution: float,
    bounds: Optional[tuple[tuple[float, float], tuple[float, float]]] = None,
    band_center: Optional[float] = None,
    source=None,
    threads: int = 1,
) -> GridResult:
    """Per-cell dB RMS of rendered RIRs on a horizontal grid at height ``z``.

    ``band_center`` switches to the narrowband soundfield variant: each RIR is
    band-filtered before the RMS. ``bounds`` overrides the room bounding box
    (required for empty rooms)."""
    if bounds is None:
        box = room.bounding_box
        if box is None:
            raise ValueError("room has no surfaces; pass explicit bounds")
        (x0, y0), (x1, y1) = (box[0][0], box[0][1]), (box[1][0], box[1][1])
    else:
        (x0, x1), (y0, y1) = bounds
    xs = np.arange(x0 + resolution / 2.0, x1, resolution)
    ys = np.arange(y0 + resolution / 2.0, y1, resolution)
    db = np.full((len(ys), len(xs)), np.nan)

    def cell(iy: int, ix: int) -> None:
        point = np.array([xs[ix], ys[iy], z])
        if not room.contains_point(point):
            return
        clip = render_rir(params, point, room, cfg, source=source)
        x = clip.mono
        if band_center is not None:
            x = bandpass(x, band_center, cfg.sample_rate)
        rms = float(np.sqrt(np.mean(x**2)))
        db[iy, ix] = 20.0 * np.log10(max(rms, DB_FLOOR))

    jobs = [(iy, ix) for iy in range(len(ys)) for ix in range(len(xs))]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda j: cell(*j), jobs))
    else:
        for j in jobs:
            cell(*j)
    return GridResult(xs=xs, ys=ys, db=db, z=z, band_center=band_center)
