#!/usr/bin/env python3
"""Smoke test for the avjoint Python extension.

Builds nothing itself: run `cargo build -p avjoint-py` (or `--release`)
first, then `python3 python/smoke_test.py`. The script locates the compiled
cdylib, stages it as an importable module, and exercises the bound surface:
schedules, the timestep map, diffusion identities, AV-Align metrics, the
synthetic data generator, and an (untrained) end-to-end generation.
"""

import math
import pathlib
import shutil
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent


def stage_module() -> None:
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libavjoint.so", "libavjoint.dylib", "avjoint.dll")
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit(
            "avjoint cdylib not found; run `cargo build -p avjoint-py` first"
        )
    stage = pathlib.Path(tempfile.mkdtemp(prefix="avjoint_py_"))
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    shutil.copy2(lib, stage / f"avjoint{suffix}")
    sys.path.insert(0, str(stage))


def approx(a, b, tol=1e-6):
    return abs(a - b) <= tol


def main() -> None:
    stage_module()
    import avjoint

    checks = 0

    def ok(name):
        nonlocal checks
        checks += 1
        print(f"ok {checks} - {name}")

    # Schedule: cumulative products match the direct oracle.
    s = avjoint.Schedule("linear", 3, 0.02, 0.02)
    assert approx(s.alpha_bar(1), 0.98, 1e-12)
    assert approx(s.alpha_bar(2), 0.9604, 1e-12)
    assert approx(s.alpha_bar(3), 0.941192, 1e-12)
    assert s.alpha_bar(0) == 1.0
    ok("schedule alpha_bar products")

    # Timestep map: identity at gamma=1, spot value at gamma=1.5.
    ident = avjoint.TimestepMap(25, 25, 25, 1.0)
    assert all(ident.map(t) == (t, t) for t in range(26))
    m = avjoint.TimestepMap(25, 1000, 1000, 1.5)
    assert m.map(10) == (326, 473)
    mf, nf = m.fractional(10)
    assert approx((mf / 1000.0), (nf / 1000.0) ** 1.5, 1e-12)
    ok("timestep map identity, spot value, proportionality")

    # Diffusion round trip: q_sample then predict_x0 recovers x0.
    sched = avjoint.Schedule("linear", 100, 0.0015, 0.0195)
    x0 = [[0.5, -1.2], [2.0, 0.1], [-0.7, 0.9]]
    eps = [[0.3, -0.4], [1.1, -0.2], [0.0, 0.8]]
    x_t = avjoint.q_sample(x0, 60, eps, sched)
    rec = avjoint.predict_x0(x_t, eps, 60, sched)
    for r0, r1 in zip(x0, rec):
        for a, b in zip(r0, r1):
            assert approx(a, b, 1e-4)
    final = avjoint.ddim_step(x_t, eps, 60, 0, sched)
    for r0, r1 in zip(x0, final):
        for a, b in zip(r0, r1):
            assert approx(a, b, 1e-4)
    ok("q_sample / predict_x0 / ddim_step identities")

    # AV-Align: the bounded rewrite fixes the >1 pathology.
    official = avjoint.av_align_official([4, 5, 6], [5], window=1)
    p, r, modified, official2 = avjoint.av_align_modified([4, 5, 6], [5], window=1)
    assert official == 3.0 and official2 == 3.0
    assert (p, r, modified) == (1.0, 1.0, 1.0)
    assert approx(avjoint.av_align_official([1, 10], [1, 20], 1), 1 / 3, 1e-12)
    ok("av_align official pathology vs modified bound")

    # Synthetic pairs: detectors recover the planted event times exactly.
    video, audio, events = avjoint.make_pair(16, 6, 64, 6, 3, 0.0, 1, 123)
    assert len(video) == 16 and len(video[0]) == 6
    assert len(audio) == 64 and len(audio[0]) == 6
    assert avjoint.detect_motion_peaks(video) == events
    assert avjoint.detect_onsets(audio, 4) == events
    ok("make_pair -> detector round trip")

    # Whole loop on a fresh (untrained) model: shapes, determinism.
    model = avjoint.JointModel(seed=7)
    assert model.param_count > 0 and model.epochs_trained == 0
    v1, a1 = model.generate(label=1, seed=42, gamma=1.5)
    v2, a2 = model.generate(label=1, seed=42, gamma=1.5)
    assert v1 == v2 and a1 == a2
    assert len(v1) == 16 and len(a1) == 64
    assert all(math.isfinite(x) for row in v1 for x in row)
    v3, _ = model.generate(label=1, seed=43, gamma=1.5)
    assert v3 != v1
    ok("fresh model generation: shapes, determinism, finiteness")

    # Optional: exercise a trained checkpoint when one is supplied.
    if len(sys.argv) > 1:
        trained = avjoint.JointModel.load(sys.argv[1])
        assert trained.epochs_trained > 0
        video, audio = trained.generate(label=0, seed=5)
        onsets = avjoint.detect_onsets(audio, len(audio) // len(video))
        peaks = avjoint.detect_motion_peaks(video)
        _, _, score, _ = avjoint.av_align_modified(onsets, peaks, 1)
        ok(f"trained checkpoint generation (AV-Align modified {score:.3f})")

    print(f"{checks} checks passed")


if __name__ == "__main__":
    main()
