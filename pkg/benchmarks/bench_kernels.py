"""Benchmark the compiled kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py

Micro-benchmarks call both backends in-process; the end-to-end training
step is timed in subprocesses because the backend is chosen at import
time (HA2G_PURE_PYTHON=1 forces the fallback).
"""

import os
import subprocess
import sys
import time

import numpy as np

from ha2g._kernels import _ref

try:
    from ha2g._kernels import _fast
except ImportError:
    _fast = None


def timeit(fn, *args, iters=2000):
    fn(*args)  # warm
    t0 = time.perf_counter()
    for _ in range(iters):
        fn(*args)
    return (time.perf_counter() - t0) / iters * 1e6  # microseconds


def bench_micro(dtype=np.float32, b=64, h=32):
    rng = np.random.default_rng(0)
    gx = (rng.standard_normal((b, 3 * h)) * 2).astype(dtype)
    gh = (rng.standard_normal((b, 3 * h)) * 2).astype(dtype)
    hp = rng.standard_normal((b, h)).astype(dtype)
    _, r, z, n = (np.asarray(x) for x in _ref.gru_gates_forward(gx, gh, hp))
    grad = rng.standard_normal((b, h)).astype(dtype)
    ghn = np.ascontiguousarray(gh[:, 2 * h:])
    param = rng.standard_normal(20000).astype(dtype)
    g = rng.standard_normal(20000).astype(dtype)
    m, v = np.zeros_like(param), np.zeros_like(param)
    diff = (rng.standard_normal(20000) * 2).astype(dtype)

    cases = [
        ("gru_gates_forward", lambda mod: timeit(
            mod.gru_gates_forward, gx, gh, hp)),
        ("gru_gates_backward", lambda mod: timeit(
            mod.gru_gates_backward, grad, hp, r, z, n, ghn)),
        ("adam_update(20k)", lambda mod: timeit(
            lambda: mod.adam_update(param.copy(), g, m.copy(), v.copy(),
                                    3, 1e-3, 0.9, 0.999, 1e-8), iters=500)),
        ("huber_forward(20k)", lambda mod: timeit(
            mod.huber_forward, diff, 1.0, iters=500)),
    ]
    name = np.dtype(dtype).name
    print(f"\n== micro-kernels ({name}, B={b}, H={h}) ==")
    print(f"{'kernel':24s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for label, runner in cases:
        t_ref = runner(_ref)
        if _fast is None:
            print(f"{label:24s} {t_ref:9.1f}us {'n/a':>10s}")
            continue
        t_fast = runner(_fast)
        print(f"{label:24s} {t_ref:9.1f}us {t_fast:9.1f}us {t_ref / t_fast:7.2f}x")


_STEP_SNIPPET = r"""
import time, tempfile, numpy as np
from ha2g import data as D, train as T
from ha2g.config import RunConfig
from ha2g.model import train_step, angle_selection
from ha2g import autodiff as ad
import ha2g

tmp = tempfile.mkdtemp()
spec = D.CorpusSpec(clips=64, frames=34, joints=43, speakers=4)
D.synth_corpus(spec, seed=11, out_dir=tmp)
clips = D.load_clips(tmp + "/clips.jsonl")
cfg = RunConfig(frames=34, hidden=32, batch=64, mel_bins=64, audio_ch1=16,
                audio_ch2=24, audio_ch3=32, dtype="f32", seed=3)
skel, full_h = D.corpus_skeleton(43)
hier = T.hierarchy_for_depth(skel, full_h, 6)
ds = T.prepare_dataset(clips, cfg, skel, hier, tmp)
prof, mask = T.training_profile(clips, skel)
sel_a, sel_b = angle_selection(skel)
gen, disc = T.build_models(cfg, hier, ds.num_speakers, 3)
go = ad.AdamState.for_params(gen.parameters())
do = ad.AdamState.for_params(disc.parameters())
w = T.weights_from_config(cfg)
batch = ds.batch(np.arange(64))
args = (gen, disc, batch, cfg, w, go, do, np.random.default_rng(0),
        prof.means[mask], prof.variances[mask], sel_a[:, mask], sel_b[:, mask])
train_step(*args)
t0 = time.time()
for _ in range(5):
    train_step(*args)
print(f"{ha2g.KERNEL_BACKEND} {(time.time() - t0) / 5 * 1000:.1f}")
"""


def bench_train_step():
    print("\n== full training step (B=64, N=34, hidden=32) ==")
    results = {}
    for backend, env_extra in (("cython", {}), ("numpy", {"HA2G_PURE_PYTHON": "1"})):
        env = dict(os.environ, **env_extra)
        out = subprocess.run([sys.executable, "-c", _STEP_SNIPPET], env=env,
                             capture_output=True, text=True)
        if out.returncode != 0:
            print(f"{backend}: failed\n{out.stderr[-500:]}")
            continue
        name, ms = out.stdout.split()[-2:]
        results[name] = float(ms)
        print(f"{name:8s} {float(ms):8.1f} ms/step")
    if {"cython", "numpy"} <= results.keys():
        print(f"speedup  {results['numpy'] / results['cython']:8.2f}x")


if __name__ == "__main__":
    if _fast is None:
        print("compiled kernels unavailable; showing numpy-only numbers")
    for dtype in (np.float32, np.float64):
        bench_micro(dtype=dtype)
    bench_train_step()
