"""Timing comparison of the numba kernels against the numpy reference.

Run from the repository root:

    python benchmarks/bench_kernels.py

Shapes mirror a default-config training step (batch 16, d=64, 8x8 patch
grid). The jitted path is warmed once before timing so compilation does not
count. If numba is unavailable only the reference column is reported.
"""

import timeit

import numpy as np

from uvlp.kernels import reference

try:
    from uvlp.kernels import jit
except ImportError:
    jit = None

rng = np.random.default_rng(0)

x_ln = rng.normal(size=(1024, 64))
gain = rng.normal(size=64)
bias = rng.normal(size=64)
g_ln = rng.normal(size=(1024, 64))
_, xhat, inv = reference.ln_forward(x_ln, gain, bias, 1e-5)
inv_flat = inv.reshape(-1)

x_sm = rng.normal(size=(4096, 74))
p_sm = reference.softmax_rows(x_sm)
g_sm = rng.normal(size=(4096, 74))

x_gelu = rng.normal(size=98304)
_, t_gelu = reference.gelu_forward(x_gelu)
g_gelu = rng.normal(size=98304)

table = np.zeros((256, 64))
idx = rng.integers(0, 256, size=4096)
g_rows = rng.normal(size=(4096, 64))

z_vq = rng.normal(size=(2048, 32))
book = rng.normal(size=(64, 32))

xp = rng.normal(size=(16, 32, 16, 16))
cols = reference.im2col(xp, 4, 4, 2, 2)


def cases(mod):
    return {
        "ln_forward": lambda: mod.ln_forward(x_ln, gain, bias, 1e-5),
        "ln_backward_x": lambda: mod.ln_backward_x(g_ln, gain, xhat, inv_flat),
        "softmax_rows": lambda: mod.softmax_rows(x_sm),
        "softmax_backward": lambda: mod.softmax_backward_rows(p_sm, g_sm),
        "gelu_forward": lambda: mod.gelu_forward(x_gelu),
        "gelu_backward": lambda: mod.gelu_backward(x_gelu, t_gelu, g_gelu),
        "scatter_add_rows": lambda: mod.scatter_add_rows(table.copy(), idx, g_rows),
        "nearest_code": lambda: mod.nearest_code(z_vq, book),
        "im2col": lambda: mod.im2col(xp, 4, 4, 2, 2),
        "col2im": (lambda: mod.col2im(cols, (16, 32, 16, 16), 4, 4, 2, 2))
        if mod is reference else
        (lambda: mod.col2im(cols, 16, 32, 16, 16, 4, 4, 2, 2)),
    }


def time_one(fn, repeat=5, number=20) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main() -> None:
    ref_cases = cases(reference)
    jit_cases = cases(jit) if jit is not None else None
    if jit_cases is not None:
        for fn in jit_cases.values():
            fn()  # trigger compilation
    header = f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, fn in ref_cases.items():
        t_ref = time_one(fn) * 1e3
        if jit_cases is None:
            print(f"{name:<18}{t_ref:>10.3f}{'n/a':>10}{'n/a':>9}")
            continue
        t_jit = time_one(jit_cases[name]) * 1e3
        print(f"{name:<18}{t_ref:>10.3f}{t_jit:>10.3f}{t_ref / t_jit:>8.1f}x")


if __name__ == "__main__":
    main()
