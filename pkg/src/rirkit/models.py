"""Learnable acoustic models: source directivity heatmaps on a spherical
lattice, per-surface reflection responses, source impulse response, the
spatially uniform residual, and the temporal blending spline.

All learnable state lives in torch tensors (float64) so the renderer can be
differentiated end to end. Parameters are immutable during a forward render;
the fitting loop mutates them only between gradient steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dsp import DTYPE

N_LATTICE = 128
N_SPLINE_KNOTS = 16
SOURCE_IR_LENGTH = 512
DEFAULT_SHARPNESS = 16.0
DEFAULT_AIR_ABSORPTION = 0.95

# Octave-spaced band centers, 62.5 Hz .. 16 kHz.
CENTER_FREQUENCIES = 62.5 * 2.0 ** np.arange(9)

CHECKPOINT_VERSION = 1


def fibonacci_lattice(n: int = N_LATTICE) -> np.ndarray:
    """n points distributed evenly on the unit sphere (golden-angle spiral)."""
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = np.pi * (3.0 - np.sqrt(5.0)) * i
    r = np.sqrt(np.maximum(0.0, 1.0 - z**2))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _interp_weights(centers: np.ndarray, queries: np.ndarray):
    """Linear-interpolation gather indices/weights, clamped at the band edges."""
    queries = np.asarray(queries, dtype=np.float64)
    idx = np.searchsorted(centers, queries, side="right") - 1
    idx = np.clip(idx, 0, len(centers) - 2)
    span = centers[idx + 1] - centers[idx]
    w = (queries - centers[idx]) / span
    w = np.clip(w, 0.0, 1.0)
    return idx, idx + 1, w


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError("rotation must be a 3x3 matrix")
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or not np.isclose(
        np.linalg.det(r), 1.0, atol=1e-9
    ):
        raise ValueError("rotation must be orthonormal with determinant +1")
    return r


@dataclass
class DirectivityMap:
    """Frequency-dependent radiation pattern: one log-amplitude heatmap per
    octave band, sampled on a Fibonacci lattice and interpolated with a
    spherical-Gaussian kernel of fixed sharpness.

    ``orientation`` rotates the whole map: the gain queried at direction d is
    the base map's gain at orientation^-1 d.
    """

    log_gains: torch.Tensor  # (n_lattice, F)
    center_frequencies: np.ndarray = field(
        default_factory=lambda: CENTER_FREQUENCIES.copy()
    )
    sharpness: float = DEFAULT_SHARPNESS
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    lattice: np.ndarray = field(default=None)

    def __post_init__(self):
        self.log_gains = torch.as_tensor(self.log_gains, dtype=DTYPE)
        if self.lattice is None:
            self.lattice = fibonacci_lattice(self.log_gains.shape[0])
        self.center_frequencies = np.asarray(self.center_frequencies, dtype=np.float64)
        if self.log_gains.shape != (len(self.lattice), len(self.center_frequencies)):
            raise ValueError("log_gains must be (n_lattice, n_bands)")
        if not np.all(np.diff(self.center_frequencies) > 0):
            raise ValueError("center frequencies must be strictly increasing")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")
        self.orientation = _check_rotation(self.orientation)

    @property
    def n_bands(self) -> int:
        return len(self.center_frequencies)

    @staticmethod
    def neutral(
        n_lattice: int = N_LATTICE,
        center_frequencies: np.ndarray | None = None,
        sharpness: float = DEFAULT_SHARPNESS,
    ) -> "DirectivityMap":
        """Omnidirectional map with unit gain everywhere (log gains 0)."""
        cf = CENTER_FREQUENCIES if center_frequencies is None else center_frequencies
        return DirectivityMap(
            log_gains=torch.zeros((n_lattice, len(cf)), dtype=DTYPE),
            center_frequencies=np.asarray(cf, dtype=np.float64),
            sharpness=sharpness,
        )

    def band_log_gains(self, direction) -> torch.Tensor:
        """Spherical-Gaussian weighted mean of the lattice log gains at each
        band center; weights form a convex combination."""
        d = np.asarray(direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("direction must be a unit vector")
        d_local = self.orientation.T @ d
        dots = torch.as_tensor(self.lattice @ d_local, dtype=DTYPE)
        logw = -self.sharpness * (1.0 - dots)
        w = torch.softmax(logw, dim=0)
        return w @ self.log_gains


def directivity_gain(dmap: DirectivityMap, direction, query_frequencies) -> torch.Tensor:
    """Linear amplitude gains at each query frequency for a unit direction.

    Log gains at the band centers are interpolated linearly across frequency
    and exponentiated; queries outside the band range clamp to the edge.
    """
    band_gains = dmap.band_log_gains(direction)
    i0, i1, w = _interp_weights(dmap.center_frequencies, query_frequencies)
    wt = torch.as_tensor(w, dtype=DTYPE)
    log_g = band_gains[i0] * (1.0 - wt) + band_gains[i1] * wt
    return torch.exp(log_g)


def rotate_directivity(dmap: DirectivityMap, rotation) -> DirectivityMap:
    """Rotate the map so the new gain at direction d equals the old gain at
    rotation^-1 d."""
    r = _check_rotation(rotation)
    return replace(dmap, orientation=r @ dmap.orientation, lattice=dmap.lattice.copy())


@dataclass
class SurfaceResponse:
    """Pre-sigmoid reflection coefficients of one surface, one per band."""

    raw_coefficients: torch.Tensor  # (F,)
    center_frequencies: np.ndarray = field(
        default_factory=lambda: CENTER_FREQUENCIES.copy()
    )

    def __post_init__(self):
        self.raw_coefficients = torch.as_tensor(self.raw_coefficients, dtype=DTYPE)
        self.center_frequencies = np.asarray(self.center_frequencies, dtype=np.float64)
        if self.raw_coefficients.shape != (len(self.center_frequencies),):
            raise ValueError("raw_coefficients must have one value per band")
        if not torch.all(torch.isfinite(self.raw_coefficients)):
            raise ValueError("raw_coefficients must be finite")

    def band_amplitudes(self) -> torch.Tensor:
        """Amplitude reflection coefficients: sqrt of the sigmoid-squashed
        energy coefficients, strictly inside (0, 1)."""
        return torch.sqrt(torch.sigmoid(self.raw_coefficients))


def reflection_response(resp: SurfaceResponse, query_frequencies) -> torch.Tensor:
    """Amplitude gain at each query frequency (linear interpolation of the
    band amplitudes, clamped outside the band range)."""
    amps = resp.band_amplitudes()
    i0, i1, w = _interp_weights(resp.center_frequencies, query_frequencies)
    wt = torch.as_tensor(w, dtype=DTYPE)
    return amps[i0] * (1.0 - wt) + amps[i1] * wt


def gamma_curve(knots: torch.Tensor, times, render_length: float) -> torch.Tensor:
    """Blending weight in [0, 1] at each time: sigmoid of the piecewise-linear
    interpolation over knots spaced uniformly across [0, render_length]."""
    knots = torch.as_tensor(knots, dtype=DTYPE)
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(t < 0) or np.any(t > render_length + 1e-12):
        raise ValueError("times must lie in [0, render_length]")
    positions = np.linspace(0.0, render_length, len(knots))
    i0, i1, w = _interp_weights(positions, t)
    wt = torch.as_tensor(w, dtype=DTYPE)
    return torch.sigmoid(knots[i0] * (1.0 - wt) + knots[i1] * wt)


def gamma_weight(knots, t: float, render_length: float) -> float:
    """Scalar convenience wrapper around :func:`gamma_curve`."""
    return float(gamma_curve(torch.as_tensor(knots, dtype=DTYPE), [t], render_length)[0])


@dataclass
class SceneParams:
    """The full learnable parameter set for one fitted scene."""

    directivity: DirectivityMap
    source_ir: torch.Tensor  # (SOURCE_IR_LENGTH,)
    surface_responses: dict[int, SurfaceResponse]
    residual: torch.Tensor  # (render samples,)
    spline_knots: torch.Tensor  # (N_SPLINE_KNOTS,)
    air_absorption: torch.Tensor  # scalar in (0, 1]
    source_location: np.ndarray  # (3,)

    def __post_init__(self):
        self.source_ir = torch.as_tensor(self.source_ir, dtype=DTYPE)
        self.residual = torch.as_tensor(self.residual, dtype=DTYPE)
        self.spline_knots = torch.as_tensor(self.spline_knots, dtype=DTYPE)
        self.air_absorption = torch.as_tensor(self.air_absorption, dtype=DTYPE)
        self.source_location = np.asarray(self.source_location, dtype=np.float64)
        if self.spline_knots.shape != (N_SPLINE_KNOTS,):
            raise ValueError(f"spline_knots must have length {N_SPLINE_KNOTS}")
        alpha = float(self.air_absorption)
        if not 0.0 < alpha <= 1.0:
            raise ValueError("air_absorption must lie in (0, 1]")

    @staticmethod
    def default(
        surface_ids,
        source_location,
        render_samples: int,
        center_frequencies: np.ndarray | None = None,
        sharpness: float = DEFAULT_SHARPNESS,
    ) -> "SceneParams":
        """Neutral initialization: omnidirectional unit directivity, energy
        reflection 0.5 on every surface, ideal-impulse source IR, zero
        residual, traced-path-dominated blending, air absorption 0.95."""
        cf = CENTER_FREQUENCIES if center_frequencies is None else np.asarray(center_frequencies)
        source_ir = torch.zeros(SOURCE_IR_LENGTH, dtype=DTYPE)
        source_ir[0] = 1.0
        return SceneParams(
            directivity=DirectivityMap.neutral(
                center_frequencies=cf, sharpness=sharpness
            ),
            source_ir=source_ir,
            surface_responses={
                int(sid): SurfaceResponse(
                    raw_coefficients=torch.zeros(len(cf), dtype=DTYPE),
                    center_frequencies=cf,
                )
                for sid in surface_ids
            },
            residual=torch.zeros(render_samples, dtype=DTYPE),
            spline_knots=torch.full((N_SPLINE_KNOTS,), 4.0, dtype=DTYPE),
            air_absorption=torch.tensor(DEFAULT_AIR_ABSORPTION, dtype=DTYPE),
            source_location=np.asarray(source_location, dtype=np.float64),
        )

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        """Learnable tensors keyed by optimization group."""
        return {
            "directivity": [self.directivity.log_gains],
            "reflection": [r.raw_coefficients for r in self.surface_responses.values()],
            "source_ir": [self.source_ir],
            "residual": [self.residual],
            "spline": [self.spline_knots],
            "air_absorption": [self.air_absorption],
        }

    def all_parameters(self) -> list[torch.Tensor]:
        return [t for group in self.parameter_groups().values() for t in group]

    def requires_grad_(self, flag: bool = True) -> "SceneParams":
        for t in self.all_parameters():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "SceneParams":
        """Deep copy with detached tensors."""
        return SceneParams(
            directivity=DirectivityMap(
                log_gains=self.directivity.log_gains.detach().clone(),
                center_frequencies=self.directivity.center_frequencies.copy(),
                sharpness=self.directivity.sharpness,
                orientation=self.directivity.orientation.copy(),
                lattice=self.directivity.lattice.copy(),
            ),
            source_ir=self.source_ir.detach().clone(),
            surface_responses={
                sid: SurfaceResponse(
                    raw_coefficients=r.raw_coefficients.detach().clone(),
                    center_frequencies=r.center_frequencies.copy(),
                )
                for sid, r in self.surface_responses.items()
            },
            residual=self.residual.detach().clone(),
            spline_knots=self.spline_knots.detach().clone(),
            air_absorption=self.air_absorption.detach().clone(),
            source_location=self.source_location.copy(),
        )


def transfer_surface(
    source_params: SceneParams, from_id: int, target_params: SceneParams, to_id: int
) -> SceneParams:
    """Copy one surface's fitted reflection response onto a surface of another
    scene; every other parameter of the target is unchanged."""
    if from_id not in source_params.surface_responses:
        raise KeyError(f"unknown source surface id {from_id}")
    if to_id not in target_params.surface_responses:
        raise KeyError(f"unknown target surface id {to_id}")
    out = target_params.clone()
    donor = source_params.surface_responses[from_id]
    out.surface_responses[to_id] = SurfaceResponse(
        raw_coefficients=donor.raw_coefficients.detach().clone(),
        center_frequencies=donor.center_frequencies.copy(),
    )
    return out


# ---------------------------------------------------------------------------
# Checkpoint format: a directory holding
#   params.json    -- version, every small parameter group as JSON numbers
#   source_ir.f32  -- raw little-endian float32 samples
#   residual.f32   -- raw little-endian float32 samples
# Arrays stored as float32 round-trip bit-exactly through save/load/save.
# ---------------------------------------------------------------------------


def save_checkpoint(params: SceneParams, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "version": CHECKPOINT_VERSION,
        "center_frequencies": params.directivity.center_frequencies.tolist(),
        "sharpness": params.directivity.sharpness,
        "n_lattice": len(params.directivity.lattice),
        "orientation": params.directivity.orientation.tolist(),
        "log_gains": params.directivity.log_gains.detach().numpy().tolist(),
        "surface_responses": {
            str(sid): r.raw_coefficients.detach().numpy().tolist()
            for sid, r in sorted(params.surface_responses.items())
        },
        "spline_knots": params.spline_knots.detach().numpy().tolist(),
        "air_absorption": float(params.air_absorption),
        "source_location": params.source_location.tolist(),
        "source_ir_samples": int(params.source_ir.shape[0]),
        "residual_samples": int(params.residual.shape[0]),
    }
    with open(directory / "params.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    params.source_ir.detach().numpy().astype("<f4").tofile(directory / "source_ir.f32")
    params.residual.detach().numpy().astype("<f4").tofile(directory / "residual.f32")


def load_checkpoint(directory: str | Path) -> SceneParams:
    directory = Path(directory)
    with open(directory / "params.json") as f:
        doc = json.load(f)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    cf = np.asarray(doc["center_frequencies"], dtype=np.float64)
    source_ir = np.fromfile(directory / "source_ir.f32", dtype="<f4")
    residual = np.fromfile(directory / "residual.f32", dtype="<f4")
    if len(source_ir) != doc["source_ir_samples"] or len(residual) != doc["residual_samples"]:
        raise ValueError("checkpoint array lengths disagree with params.json")
    return SceneParams(
        directivity=DirectivityMap(
            log_gains=torch.as_tensor(doc["log_gains"], dtype=DTYPE),
            center_frequencies=cf,
            sharpness=float(doc["sharpness"]),
            orientation=np.asarray(doc["orientation"], dtype=np.float64),
            lattice=fibonacci_lattice(int(doc["n_lattice"])),
        ),
        source_ir=torch.as_tensor(source_ir.astype(np.float64), dtype=DTYPE),
        surface_responses={
            int(sid): SurfaceResponse(
                raw_coefficients=torch.as_tensor(vals, dtype=DTYPE),
                center_frequencies=cf,
            )
            for sid, vals in doc["surface_responses"].items()
        },
        residual=torch.as_tensor(residual.astype(np.float64), dtype=DTYPE),
        spline_knots=torch.as_tensor(doc["spline_knots"], dtype=DTYPE),
        air_absorption=torch.tensor(float(doc["air_absorption"]), dtype=DTYPE),
        source_location=np.asarray(doc["source_location"], dtype=np.float64),
    )
