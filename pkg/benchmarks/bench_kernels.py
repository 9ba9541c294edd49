"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times each hot kernel on toy-sized and larger rows, then one full training
step (forward, backward, Adam) at the toy preset, under each backend.
"""

import argparse
import timeit

import numpy as np

from aesq import kernels
from aesq.metrics import TRAIN_EPS, emd_loss
from aesq.qformer import forward, init_model
from aesq.tensor import Tensor, tmean
from aesq.training import PRESETS, OptimizerState, adam_step


def kernel_cases(rng, rows, width):
    x = rng.normal(size=(rows, width))
    g = rng.normal(size=(rows, width))
    gain, bias = rng.normal(size=width), rng.normal(size=width)
    p = rng.dirichlet(np.ones(width), size=rows)
    q = rng.dirichlet(np.ones(width), size=rows)
    ties = rng.integers(0, max(2, rows // 4), size=rows * width).astype(float)

    def ln_bwd(b):
        _, xhat, rstd = b.layer_norm_fwd(x, gain, bias, 1e-5)
        return lambda: b.layer_norm_bwd(g, xhat, rstd, gain)

    def emd_bwd(b):
        loss, diff = b.emd_fwd(p, q, TRAIN_EPS)
        return lambda: b.emd_bwd(diff, loss, np.ones(rows))

    return {
        "softmax_fwd": lambda b: (lambda: b.softmax_fwd(x)),
        "softmax_bwd": lambda b: (lambda y=b.softmax_fwd(x): b.softmax_bwd(y, g)),
        "layer_norm_fwd": lambda b: (lambda: b.layer_norm_fwd(x, gain, bias, 1e-5)),
        "layer_norm_bwd": ln_bwd,
        "gelu_fwd": lambda b: (lambda: b.gelu_fwd(x)),
        "gelu_bwd": lambda b: (lambda: b.gelu_bwd(x, g)),
        "emd_fwd": lambda b: (lambda: b.emd_fwd(p, q, TRAIN_EPS)),
        "emd_bwd": emd_bwd,
        "average_ranks": lambda b: (lambda: b.average_ranks(ties)),
    }


def train_step(batch=16):
    model_cfg = PRESETS["toy"][0]
    model = init_model(model_cfg)
    state = OptimizerState.for_params(model.params)
    rng = np.random.default_rng(0)
    e_v = Tensor(rng.normal(size=(batch, 1 + model_cfg.n_patches, model_cfg.hv)))
    d = rng.dirichlet(np.ones(model_cfg.k), size=batch)

    def step():
        model.zero_grad()
        loss = tmean(emd_loss(d, forward(model, e_v), eps=TRAIN_EPS))
        loss.backward()
        adam_step(model.params, state, 1e-3)

    return step


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND})")
    rng = np.random.default_rng(0)
    header = f"{'kernel':<16} {'shape':>10}" + "".join(f" {b + ' us':>12}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>8}"
    print(header)
    for rows, width in ((32, 16), (1024, 64)):
        for name, make in kernel_cases(rng, rows, width).items():
            times = [best_of(make(kernels.get_backend(b)), args.repeat, 50) for b in backends]
            line = f"{name:<16} {f'{rows}x{width}':>10}" + "".join(f" {t * 1e6:12.2f}" for t in times)
            if len(times) == 2:
                line += f" {times[1] / times[0]:8.2f}"
            print(line)

    original = kernels.BACKEND
    step_times = []
    for b in backends:
        kernels.use_backend(b)
        step_times.append(best_of(train_step(), max(3, args.repeat // 4), 10))
    kernels.use_backend(original)
    line = f"{'toy train step':<16} {'batch 16':>10}" + "".join(f" {t * 1e6:12.0f}" for t in step_times)
    if len(step_times) == 2:
        line += f" {step_times[1] / step_times[0]:8.2f}"
    print(line)


if __name__ == "__main__":
    main()
