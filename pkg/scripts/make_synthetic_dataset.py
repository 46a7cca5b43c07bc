"""Generate a synthetic shoebox dataset in the repo's dataset format.

Renders ground-truth RIRs from a randomized scene so the full pipeline
(fit / eval / render) can be exercised without any measured data.

Usage:
    python scripts/make_synthetic_dataset.py OUTDIR [--n-train 12] [--n-test 4]
"""

import argparse
from pathlib import Path

import numpy as np
import torch

from rirkit.data import DatasetEntry, DatasetIndex, save_index
from rirkit.dsp import AudioClip, write_wav
from rirkit.geometry import save_room, shoebox_room
from rirkit.models import SceneParams
from rirkit.renderer import RenderConfig, render_rir_signal
from rirkit.tracer import trace_all


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("outdir", type=Path)
    ap.add_argument("--n-train", type=int, default=12)
    ap.add_argument("--n-test", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--render-samples", type=int, default=4096)
    args = ap.parse_args()

    rate = 48000
    room = shoebox_room(4.0, 5.0, 3.0)
    cfg = RenderConfig(
        render_length=args.render_samples / rate,
        sample_rate=rate,
        max_order=3,
        axial_order=0,
        fft_size=2048,
    )
    rng = np.random.default_rng(args.seed)
    src = np.array([1.0, 1.5, 1.2])

    gt = SceneParams.default([s.id for s in room.surfaces], src, cfg.render_samples)
    with torch.no_grad():
        for resp in gt.surface_responses.values():
            resp.raw_coefficients += torch.as_tensor(rng.normal(0, 1.2, size=9))

    n = args.n_train + args.n_test
    positions = rng.uniform([0.4, 0.4, 0.4], [3.6, 4.6, 2.6], size=(n, 3))
    root = args.outdir
    (root / "rirs").mkdir(parents=True, exist_ok=True)
    save_room(room, root / "room.json")
    entries = []
    for i, pos in enumerate(positions):
        paths = trace_all(room, src, pos, cfg.max_order, cfg.axial_order)
        with torch.no_grad():
            sig = render_rir_signal(gt, paths, cfg).numpy()
        rel = f"rirs/p{i:03d}.wav"
        write_wav(root / rel, AudioClip(sig, rate))
        entries.append(
            DatasetEntry(
                position=pos,
                rir=rel,
                split="train" if i < args.n_train else "test",
            )
        )
    index = DatasetIndex(root=root, room=room, entries=entries, source_location=src)
    save_index(index)
    print(f"wrote {n} RIRs under {root}")


if __name__ == "__main__":
    main()
