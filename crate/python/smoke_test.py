"""Smoke test for the gesturegen_py extension.

Build the extension first:

    cargo build --release -p gesturegen-python

then run `python3 python/smoke_test.py`. The script copies the built library
next to a temporary module path so no install step is needed.
"""

import importlib
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_extension(tmp: Path):
    for profile in ("release", "debug"):
        for name in ("libgesturegen_py.so", "libgesturegen_py.dylib", "gesturegen_py.dll"):
            lib = ROOT / "target" / profile / name
            if lib.exists():
                suffix = ".pyd" if name.endswith(".dll") else ".so"
                shutil.copy(lib, tmp / ("gesturegen_py" + suffix))
                sys.path.insert(0, str(tmp))
                return importlib.import_module("gesturegen_py")
    sys.exit("extension not built: cargo build --release -p gesturegen-python")


def main():
    tmp = Path(tempfile.mkdtemp(prefix="gesturegen-smoke-"))
    try:
        g = load_extension(tmp)

        clips = g.synthesize(seed=1, count=4, frames=16, styles=2)
        assert len(clips) == 4 and len(clips[0]) == 16
        assert clips[1].style == "style1"
        path = tmp / "clip.poseb"
        clips[0].save(str(path))
        back = g.GestureSequence.load(str(path))
        assert back.frames() == clips[0].frames()

        audio = g.synthesize_speech(clips[0], sample_rate=22000, seed=3)
        mfcc = audio.mfcc(30.0)
        assert len(mfcc) == 16 and len(mfcc[0]) == 64
        beats = audio.beats()
        assert all(b < c for b, c in zip(beats, beats[1:]))

        cfg = g.ExperimentConfig.preset("tiny")
        assert g.ExperimentConfig.from_toml(cfg.to_toml()).digest() == cfg.digest()
        try:
            g.ExperimentConfig.from_toml("[split]\ntrain = 0.5\n")
        except g.GestureGenError:
            pass
        else:
            raise AssertionError("bad split accepted")

        run = tmp / "run"
        manifest = g.run_pipeline(cfg, str(run))
        metrics = manifest["report"]["metrics"]
        print("tiny run:", {k: round(metrics[k], 5) for k in ("variation", "fgd", "bc")})

        vq = g.VqVae.load(str(run / "vq.ckpt"))
        hand, body = vq.tokenize(clips[0])
        rec = vq.detokenize(hand, body, len(clips[0]))
        assert len(rec) == 16
        assert vq.reconstruction_rmse(clips[0]) >= 0.0

        pred = g.Predictor.load(str(run / "predictor.ckpt"))
        code = pred.style_code(clips[1])
        assert len(code) == 8
        a = pred.generate(vq, audio, clips[1], pred.identities[0], mode="greedy", seed=0)
        b = pred.generate(vq, audio, clips[1], pred.identities[0], mode="greedy", seed=9)
        assert a.frames() == b.frames()
        t = pred.generate(vq, audio, clips[1], pred.identities[0], mode="temperature", seed=4)
        assert len(t) == len(a)

        assert g.variation([a, a, a]) == 0.0
        x, y = [[0.0], [2.0]], [[1.0], [3.0], [5.0]]
        assert abs(g.frechet_distance(x, y) - ((1.0 - 3.0) ** 2 + 2.0 + 4.0 - 2.0 * math.sqrt(8.0))) < 1e-9
        assert abs(g.beat_consistency_score([1.1], [1.0, 2.5], 0.1) - math.exp(-0.5)) < 1e-9
        print("smoke test ok")
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


if __name__ == "__main__":
    main()
