"""Dataset ingestion, sine-sweep deconvolution, evaluation metrics, and the
nearest-neighbor / inverse-distance interpolation baselines.

Dataset directory layout (convertible from public releases):

    dataset/
      room.json            geometry (see geometry module schema)
      index.json           positions, file references, train/test splits
      rirs/*.wav           measured RIRs
      music/*.wav          optional music recordings
      binaural/*.wav       optional binaural recordings

index.json:
    {
      "source_location": [x, y, z] | null,
      "entries": [
        {"position": [x, y, z], "rir": "rirs/p000.wav",
         "music": ["music/p000_a.wav"], "binaural": null, "split": "train"}
      ]
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dsp import AudioClip, log_energy_envelope, read_wav
from .fit import LossConfig, spectral_loss
from .geometry import Room, load_room

LR_ENERGY_FLOOR = 1e-12


def deconvolve_sweep(recording: AudioClip, loopback: AudioClip) -> AudioClip:
    """Recover an impulse response by spectral division of the loopback out
    of the recording; the last 0.1 s is dropped to remove anti-causal
    artifacts. The loopback spectrum is floored to keep the division stable.
    """
    if recording.channels != 1 or loopback.channels != 1:
        raise ValueError("deconvolution expects mono clips")
    if recording.n_samples != loopback.n_samples:
        raise ValueError("recording and loopback must have equal length")
    a = np.fft.rfft(recording.mono)
    l = np.fft.rfft(loopback.mono)
    mag = np.abs(l)
    if mag.max() == 0:
        raise ValueError("loopback is identically zero")
    floor = 1e-10
    safe = np.where(mag >= floor, l, floor)
    rir = np.fft.irfft(a / safe, n=recording.n_samples)
    trim = int(round(0.1 * recording.sample_rate))
    if trim >= len(rir):
        raise ValueError("clip shorter than the 0.1 s trim window")
    return AudioClip(rir[: len(rir) - trim], recording.sample_rate)


def sensitivity_normalize(clip: AudioClip, mic_gain_db: float) -> AudioClip:
    """Undo a microphone's sensitivity offset: scale by 10^(-gain/20)."""
    if not np.isfinite(mic_gain_db):
        raise ValueError("mic gain must be finite")
    return clip.scaled(10.0 ** (-mic_gain_db / 20.0))


def metric_mag(pred: AudioClip, gt: AudioClip, cfg: LossConfig | None = None) -> float:
    """Multiscale log-spectral L1; the same computation as the training loss."""
    return float(spectral_loss(pred, gt, cfg or LossConfig()))


def metric_env(pred: AudioClip, gt: AudioClip) -> float:
    """Mean absolute difference of the log-energy envelopes."""
    a = pred.mono if pred.channels == 1 else pred.samples.mean(axis=0)
    b = gt.mono if gt.channels == 1 else gt.samples.mean(axis=0)
    if len(a) != len(b):
        raise ValueError("metric_env requires equal-length signals")
    return float(np.mean(np.abs(log_energy_envelope(a) - log_energy_envelope(b))))


def _lr_ratio(clip: AudioClip) -> float:
    if clip.channels != 2:
        raise ValueError("left-right energy ratio requires stereo")
    e_left = float(np.sum(clip.samples[0] ** 2))
    e_right = float(np.sum(clip.samples[1] ** 2))
    return e_left / max(e_right, LR_ENERGY_FLOOR)


def metric_lr_energy(pred, gt) -> float:
    """Squared error between left/right energy ratios; lists of clips are
    averaged as a batch."""
    if isinstance(pred, AudioClip):
        pred, gt = [pred], [gt]
    if len(pred) != len(gt):
        raise ValueError("batch sizes must match")
    errs = [(_lr_ratio(p) - _lr_ratio(g)) ** 2 for p, g in zip(pred, gt)]
    return float(np.mean(errs))


@dataclass
class DatasetEntry:
    position: np.ndarray
    rir: str
    music: list[str] = field(default_factory=list)
    binaural: Optional[str] = None
    split: str = "train"

    def to_dict(self) -> dict:
        return {
            "position": np.asarray(self.position).tolist(),
            "rir": self.rir,
            "music": list(self.music),
            "binaural": self.binaural,
            "split": self.split,
        }


@dataclass
class DatasetIndex:
    """A measured-RIR dataset rooted at ``root``; clips are loaded lazily."""

    root: Path
    room: Room
    entries: list[DatasetEntry]
    source_location: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def train_entries(self) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == "train"]

    def test_entries(self) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == "test"]

    def load_rir(self, entry: DatasetEntry) -> AudioClip:
        key = entry.rir
        if key not in self._cache:
            self._cache[key] = read_wav(self.root / entry.rir)
        return self._cache[key]


def load_dataset(root: str | Path) -> DatasetIndex:
    """Load and validate a dataset directory: every referenced file must
    exist and every position must fall inside the room bounding box."""
    root = Path(root)
    room = load_room(root / "room.json")
    with open(root / "index.json") as f:
        doc = json.load(f)
    entries = []
    for i, edoc in enumerate(doc["entries"]):
        entry = DatasetEntry(
            position=np.asarray(edoc["position"], dtype=np.float64),
            rir=edoc["rir"],
            music=list(edoc.get("music", [])),
            binaural=edoc.get("binaural"),
            split=edoc.get("split", "train"),
        )
        if not room.contains_point(entry.position):
            raise ValueError(f"entry {i}: position {entry.position} outside the room")
        for rel in [entry.rir, *entry.music, *([entry.binaural] if entry.binaural else [])]:
            if not (root / rel).exists():
                raise FileNotFoundError(f"entry {i}: missing file {root / rel}")
        entries.append(entry)
    src = doc.get("source_location")
    return DatasetIndex(
        root=root,
        room=room,
        entries=entries,
        source_location=None if src is None else np.asarray(src, dtype=np.float64),
    )


def save_index(index: DatasetIndex) -> None:
    """Write index.json back under the dataset root (room.json untouched)."""
    doc = {
        "source_location": None
        if index.source_location is None
        else np.asarray(index.source_location).tolist(),
        "entries": [e.to_dict() for e in index.entries],
    }
    with open(index.root / "index.json", "w") as f:
        json.dump(doc, f, indent=2)


def baseline_nn(train: DatasetIndex, query) -> AudioClip:
    """The training RIR at the Euclidean-nearest position; ties break toward
    the lowest entry index."""
    entries = train.train_entries()
    if not entries:
        raise ValueError("no training entries")
    q = np.asarray(query, dtype=np.float64)
    dists = np.array([np.linalg.norm(e.position - q) for e in entries])
    return train.load_rir(entries[int(np.argmin(dists))])


def baseline_linear(train: DatasetIndex, query) -> AudioClip:
    """Inverse-distance-weighted combination of the four nearest training
    RIRs; a query coinciding with a training position returns that RIR."""
    entries = train.train_entries()
    if not entries:
        raise ValueError("no training entries")
    q = np.asarray(query, dtype=np.float64)
    dists = np.array([np.linalg.norm(e.position - q) for e in entries])
    nearest = int(np.argmin(dists))
    if dists[nearest] < 1e-9:
        return train.load_rir(entries[nearest])
    order = np.argsort(dists)[: min(4, len(entries))]
    weights = 1.0 / dists[order]
    weights = weights / weights.sum()
    clips = [train.load_rir(entries[i]) for i in order]
    n = min(c.n_samples for c in clips)
    rate = clips[0].sample_rate
    mix = np.zeros(n)
    for w, c in zip(weights, clips):
        mix += w * c.mono[:n]
    return AudioClip(mix, rate)


def evaluate(
    index: DatasetIndex,
    render,
    loss_cfg: LossConfig | None = None,
    entries: Optional[Sequence[DatasetEntry]] = None,
) -> list[dict]:
    """Per-entry Mag/ENV for a render callable plus both baselines.

    ``render(position) -> AudioClip`` supplies the model prediction.
    """
    rows = []
    targets = list(entries) if entries is not None else index.test_entries()
    for i, entry in enumerate(targets):
        gt = index.load_rir(entry)
        pred = render(entry.position)
        n = min(gt.n_samples, pred.n_samples)
        gt_c = AudioClip(gt.mono[:n], gt.sample_rate)
        pred_c = AudioClip(pred.mono[:n], pred.sample_rate)
        nn = baseline_nn(index, entry.position)
        lin = baseline_linear(index, entry.position)
        rows.append(
            {
                "index": i,
                "x": entry.position[0],
                "y": entry.position[1],
                "z": entry.position[2],
                "mag": metric_mag(pred_c, gt_c, loss_cfg),
                "env": metric_env(pred_c, gt_c),
                "nn_mag": metric_mag(AudioClip(nn.mono[:n], nn.sample_rate), gt_c, loss_cfg),
                "nn_env": metric_env(AudioClip(nn.mono[:n], nn.sample_rate), gt_c),
                "linear_mag": metric_mag(
                    AudioClip(lin.mono[:n], lin.sample_rate), gt_c, loss_cfg
                ),
                "linear_env": metric_env(AudioClip(lin.mono[:n], lin.sample_rate), gt_c),
            }
        )
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    """Aggregate per-point metrics. Values are raw; the paper-style tables
    scale RIR errors by 10, so the convention is recorded explicitly."""
    keys = ["mag", "env", "nn_mag", "nn_env", "linear_mag", "linear_env"]
    out = {k: float(np.mean([r[k] for r in rows])) for k in keys if rows}
    out["n_points"] = len(rows)
    out["table_convention"] = "raw values; multiply RIR errors by 10 to match paper-style tables"
    return out
