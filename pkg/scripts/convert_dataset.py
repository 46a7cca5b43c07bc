"""Convert measured RIR recordings into the repo's dataset format.

Expects a directory of mono WAV files plus a positions JSON of the form

    {
      "speed_of_sound": 343.0,                     // optional
      "source_location": [x, y, z] | null,
      "points": [
        {"position": [x, y, z], "rir": "relative/path.wav",
         "split": "train" | "test"}                // split optional
      ]
    }

and a room geometry JSON (see rirkit.geometry schema). Splits default to
"train" for the first --n-train points and "test" for the rest. Raw sweep
recordings can be deconvolved on the fly with --loopback.

Usage:
    python scripts/convert_dataset.py RAWDIR positions.json room.json OUTDIR \
        [--loopback loopback.wav] [--mic-gain-db 0.0] [--n-train 12]
"""

import argparse
import json
import shutil
from pathlib import Path

import numpy as np

from rirkit.data import (
    DatasetEntry,
    DatasetIndex,
    deconvolve_sweep,
    sensitivity_normalize,
)
from rirkit.dsp import read_wav, write_wav
from rirkit.geometry import load_room


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("rawdir", type=Path)
    ap.add_argument("positions", type=Path)
    ap.add_argument("room", type=Path)
    ap.add_argument("outdir", type=Path)
    ap.add_argument("--loopback", type=Path, default=None,
                    help="deconvolve this loopback out of every recording")
    ap.add_argument("--mic-gain-db", type=float, default=0.0)
    ap.add_argument("--n-train", type=int, default=12)
    args = ap.parse_args()

    with open(args.positions) as f:
        doc = json.load(f)
    room = load_room(args.room)
    loopback = read_wav(args.loopback) if args.loopback else None

    root = args.outdir
    (root / "rirs").mkdir(parents=True, exist_ok=True)
    shutil.copy(args.room, root / "room.json")

    entries = []
    for i, pt in enumerate(doc["points"]):
        clip = read_wav(args.rawdir / pt["rir"])
        if loopback is not None:
            clip = deconvolve_sweep(clip, loopback)
        if args.mic_gain_db:
            clip = sensitivity_normalize(clip, args.mic_gain_db)
        rel = f"rirs/p{i:03d}.wav"
        write_wav(root / rel, clip)
        entries.append(
            DatasetEntry(
                position=np.asarray(pt["position"], dtype=float),
                rir=rel,
                split=pt.get("split", "train" if i < args.n_train else "test"),
            )
        )

    src = doc.get("source_location")
    index = DatasetIndex(
        root=root,
        room=room,
        entries=entries,
        source_location=None if src is None else np.asarray(src, dtype=float),
    )
    from rirkit.data import save_index

    save_index(index)
    print(f"converted {len(entries)} points -> {root}")


if __name__ == "__main__":
    main()
