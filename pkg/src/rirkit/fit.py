"""Inverse fitting: source localization from times of arrival, the
multi-scale spectral loss, gradient evaluation through the render graph, and
the full analysis-by-synthesis training loop with arrival-time perturbation
and pink-noise regularization.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .dsp import AudioClip, DTYPE, fft_convolve, pink_noise, stft_mag
from .geometry import Room
from .models import SceneParams
from .renderer import RenderConfig, render_rir_signal
from .tracer import PathSet, trace_all


@dataclass
class LossConfig:
    """Multi-scale STFT loss: per-window L1 on magnitude and log-magnitude
    spectrograms, plus a small-window hop-1 term for time resolution."""

    window_sizes: tuple[int, ...] = (512, 1024, 2048, 4096)
    hop_ratio: float = 0.25
    extra_window: int = 256
    extra_hop: int = 1
    log_floor: float = 1e-8

    def terms(self) -> list[tuple[int, int]]:
        out = [(w, max(1, int(round(self.hop_ratio * w)))) for w in self.window_sizes]
        out.append((self.extra_window, self.extra_hop))
        return out


@dataclass
class FitConfig:
    epochs: int = 1000
    toa_perturb_samples: float = 7.0
    pink_reg_start_fraction: float = 0.5
    pink_duration: float = 5.0
    random_seed: int = 0
    lr_directivity: float = 1e-2
    lr_reflection: float = 1e-2
    lr_source_ir: float = 1e-3
    lr_residual: float = 1e-3
    lr_spline: float = 1e-2
    lr_air_absorption: float = 1e-3
    # Adam's steps stay at ~lr even for vanishing gradients, so parameters
    # whose optimum is a point (zero residual, impulse source IR) never
    # settle without decay.
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.toa_perturb_samples < 0:
            raise ValueError("toa_perturb_samples must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")


@dataclass
class FitReport:
    per_epoch_loss: list[float]
    localized_source: Optional[np.ndarray]
    wall_clock: float
    final_params: Optional[SceneParams] = None
    random_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "per_epoch_loss": self.per_epoch_loss,
            "localized_source": None
            if self.localized_source is None
            else np.asarray(self.localized_source).tolist(),
            "wall_clock_seconds": self.wall_clock,
            "random_seed": self.random_seed,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def first_peak_time(rir: AudioClip) -> float:
    """Time of the first sample exceeding a quarter of the absolute maximum.

    Scale-invariant; rejects all-zero input.
    """
    x = np.abs(rir.mono)
    peak = x.max()
    if peak == 0:
        raise ValueError("RIR is identically zero")
    idx = int(np.argmax(x > peak / 4.0))
    return idx / rir.sample_rate


def localize_source(
    rirs: Sequence[AudioClip],
    mic_positions,
    speed_of_sound: float = 343.0,
    steps: int = 1000,
    lr: float = 0.1,
) -> np.ndarray:
    """Estimate the source position from first-peak times of arrival.

    Minimizes the L1 difference between predicted distances / c and the
    measured arrival times, starting from the origin, for a fixed number of
    gradient steps with a cosine-decayed step size.
    """
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=np.float64))
    if len(mics) != len(rirs):
        raise ValueError("one microphone position per RIR required")
    toas = torch.as_tensor([first_peak_time(r) for r in rirs], dtype=DTYPE)
    mics_t = torch.as_tensor(mics, dtype=DTYPE)

    centered = mics - mics.mean(axis=0)
    if len(mics) < 4 or np.linalg.matrix_rank(centered, tol=1e-9) < 3:
        warnings.warn("microphone array is degenerate (coplanar or too small); "
                      "localization may be ambiguous")

    pos = torch.zeros(3, dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([pos], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=lr * 1e-4)
    for _ in range(steps):
        opt.zero_grad()
        # Smoothed norm keeps the gradient finite when the source crosses a mic.
        d2 = torch.sum((mics_t - pos) ** 2, dim=1)
        dist = torch.sqrt(d2 + 1e-18)
        loss = torch.mean(torch.abs(dist / speed_of_sound - toas))
        loss.backward()
        opt.step()
        sched.step()
    return pos.detach().numpy()


def _loss_terms(pred: torch.Tensor, gt: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    total = torch.zeros((), dtype=DTYPE)
    for window, hop in cfg.terms():
        sp = stft_mag(pred, window, hop)
        sg = stft_mag(gt, window, hop)
        total = total + torch.mean(torch.abs(sp - sg))
        lp = torch.log(torch.clamp(sp, min=cfg.log_floor))
        lg = torch.log(torch.clamp(sg, min=cfg.log_floor))
        total = total + torch.mean(torch.abs(lp - lg))
    return total


def spectral_loss(pred, gt, cfg: LossConfig | None = None) -> torch.Tensor:
    """Multi-scale magnitude + log-magnitude spectrogram L1 (scalar tensor).

    Accepts tensors, arrays, or mono AudioClips of equal length.
    """
    cfg = cfg or LossConfig()
    if isinstance(pred, AudioClip):
        pred = pred.mono
    if isinstance(gt, AudioClip):
        gt = gt.mono
    pred_t = torch.as_tensor(pred, dtype=DTYPE) if not isinstance(pred, torch.Tensor) else pred
    gt_t = torch.as_tensor(gt, dtype=DTYPE) if not isinstance(gt, torch.Tensor) else gt
    if pred_t.shape[-1] != gt_t.shape[-1]:
        raise ValueError("spectral_loss requires equal-length signals")
    return _loss_terms(pred_t, gt_t, cfg)


def named_parameters(params: SceneParams) -> dict[str, torch.Tensor]:
    """Stable name -> tensor mapping across every learnable group."""
    out = {"directivity.log_gains": params.directivity.log_gains}
    for sid in sorted(params.surface_responses):
        out[f"reflection.{sid}"] = params.surface_responses[sid].raw_coefficients
    out["source_ir"] = params.source_ir
    out["residual"] = params.residual
    out["spline_knots"] = params.spline_knots
    out["air_absorption"] = params.air_absorption
    return out


def batch_loss(
    params: SceneParams,
    batch: Sequence[tuple],
    loss_cfg: LossConfig,
    render_cfg: RenderConfig,
) -> torch.Tensor:
    """Average spectral loss over (listener, paths, gt) triples. The traced
    paths are constants; arrival perturbation is not applied here."""
    total = torch.zeros((), dtype=DTYPE)
    for _, paths, gt in batch:
        pred = render_rir_signal(params, paths, render_cfg)
        gt_t = torch.as_tensor(
            gt.mono if isinstance(gt, AudioClip) else gt, dtype=DTYPE
        )
        total = total + spectral_loss(pred, _fit_length(gt_t, render_cfg.render_samples), loss_cfg)
    return total / len(batch)


def loss_gradient(
    params: SceneParams,
    batch: Sequence[tuple],
    loss_cfg: LossConfig | None = None,
    render_cfg: RenderConfig | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Exact reverse-mode derivatives of the batch loss w.r.t. every
    learnable parameter. Returns (loss value, gradients by parameter name)."""
    loss_cfg = loss_cfg or LossConfig()
    render_cfg = render_cfg or RenderConfig()
    tensors = named_parameters(params)
    for t in tensors.values():
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = batch_loss(params, batch, loss_cfg, render_cfg)
    loss.backward()
    grads = {}
    for name, t in tensors.items():
        grads[name] = (
            np.zeros(t.shape) if t.grad is None else t.grad.detach().numpy().copy()
        )
        t.requires_grad_(False)
    return float(loss.detach()), grads


def _fit_length(x: torch.Tensor, n: int) -> torch.Tensor:
    if x.shape[-1] < n:
        return torch.nn.functional.pad(x, (0, n - x.shape[-1]))
    return x[..., :n]


def fit(
    train_rirs: Sequence[AudioClip],
    mic_positions,
    room: Room,
    render_cfg: RenderConfig | None = None,
    loss_cfg: LossConfig | None = None,
    fit_cfg: FitConfig | None = None,
    source_location=None,
) -> tuple[SceneParams, FitReport]:
    """Full analysis-by-synthesis fit against measured RIRs.

    Localizes the source when no location is given, precomputes reflection
    paths once per listener, then runs full-batch adaptive gradient steps.
    Every epoch perturbs each path's arrival time with fresh Gaussian noise;
    after the halfway epoch the loss adds a term comparing predictions and
    ground truth convolved with freshly seeded pink noise.
    """
    if not train_rirs:
        raise ValueError("at least one training RIR is required")
    render_cfg = render_cfg or RenderConfig()
    loss_cfg = loss_cfg or LossConfig()
    fit_cfg = fit_cfg or FitConfig()
    mics = np.atleast_2d(np.asarray(mic_positions, dtype=np.float64))

    t_start = time.perf_counter()
    localized = None
    if source_location is None:
        localized = localize_source(train_rirs, mics, speed_of_sound=room.speed_of_sound)
        source_location = localized

    params = SceneParams.default(
        surface_ids=[s.id for s in room.surfaces],
        source_location=source_location,
        render_samples=render_cfg.render_samples,
    )

    path_sets: list[PathSet] = [
        trace_all(room, source_location, mic, render_cfg.max_order, render_cfg.axial_order)
        for mic in mics
    ]
    gts = [
        _fit_length(torch.as_tensor(r.mono, dtype=DTYPE), render_cfg.render_samples)
        for r in train_rirs
    ]

    tensors = named_parameters(params)
    for t in tensors.values():
        t.requires_grad_(True)
    groups = [
        {"params": [tensors["directivity.log_gains"]], "lr": fit_cfg.lr_directivity},
        {
            "params": [t for n, t in tensors.items() if n.startswith("reflection.")],
            "lr": fit_cfg.lr_reflection,
        },
        {"params": [tensors["source_ir"]], "lr": fit_cfg.lr_source_ir},
        {"params": [tensors["residual"]], "lr": fit_cfg.lr_residual},
        {"params": [tensors["spline_knots"]], "lr": fit_cfg.lr_spline},
        {"params": [tensors["air_absorption"]], "lr": fit_cfg.lr_air_absorption},
    ]
    opt = torch.optim.Adam(groups)
    sched = None
    if fit_cfg.lr_schedule == "cosine" and fit_cfg.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=fit_cfg.epochs, eta_min=0.0
        )
    rng = np.random.default_rng(fit_cfg.random_seed)
    rate = render_cfg.sample_rate
    pink_start = int(np.ceil(fit_cfg.epochs * fit_cfg.pink_reg_start_fraction))

    per_epoch = []
    for epoch in range(fit_cfg.epochs):
        opt.zero_grad()
        use_pink = epoch >= pink_start
        pink = None
        if use_pink:
            pink = torch.as_tensor(
                pink_noise(fit_cfg.pink_duration, rate, seed=int(rng.integers(2**31))),
                dtype=DTYPE,
            )
        total = torch.zeros((), dtype=DTYPE)
        for paths, gt in zip(path_sets, gts):
            offsets = rng.normal(
                0.0, fit_cfg.toa_perturb_samples / rate, size=len(paths)
            )
            pred = render_rir_signal(params, paths, render_cfg, arrival_offsets=offsets)
            total = total + spectral_loss(pred, gt, loss_cfg)
            if use_pink:
                total = total + spectral_loss(
                    fft_convolve(pred, pink), fft_convolve(gt, pink), loss_cfg
                )
        total = total / len(gts)
        value = float(total.detach())
        if not np.isfinite(value):
            raise RuntimeError(
                f"loss became non-finite at epoch {epoch}; "
                "check input RIRs and learning rates"
            )
        per_epoch.append(value)
        total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        with torch.no_grad():
            params.air_absorption.clamp_(min=1e-6, max=1.0)

    for t in tensors.values():
        t.requires_grad_(False)
    report = FitReport(
        per_epoch_loss=per_epoch,
        localized_source=localized,
        wall_clock=time.perf_counter() - t_start,
        final_params=params,
        random_seed=fit_cfg.random_seed,
    )
    return params, report
