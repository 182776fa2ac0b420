"""Time the numpy and compiled kernel backends on desk-scale shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Checks bit-parity of every kernel before timing it.
"""
import argparse
import json
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from mrdenoise import kernels
from mrdenoise.tensor import Tape, Tensor, conv3d, deconv3d, sum_all

# a desk-scale minibatch: 32 patches of 16x16x6, first encoder level 1 -> 16 -> 32
SHAPES = {
    "enc1": ((32, 1, 16, 16, 6), 16),
    "enc2": ((32, 16, 16, 16, 6), 32),
}
ADAM_SIZE = 1536 * 3072


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def use_backend(mod):
    kernels.im2col = mod.im2col
    kernels.col2im = mod.col2im
    kernels.adam_update = mod.adam_update


def conv_step(x, k, b, u, c):
    """Encoder conv then its mirrored deconv, forward and backward."""
    for t in (x, k, b, u, c):
        t.grad = None
    with Tape() as tape:
        loss = sum_all(deconv3d(conv3d(x, k, b), u, c))
    tape.backward(loss)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json")
    args = p.parse_args(argv)

    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    rows = []
    with threadpool_limits(1):
        for label, (shape, cout) in SHAPES.items():
            x = rng.standard_normal(shape).astype(np.float32)
            cols = backends["numpy"].im2col(x)
            ref = {"im2col": cols, "col2im": backends["numpy"].col2im(cols, shape)}
            for name, mod in backends.items():
                assert mod.im2col(x).tobytes() == ref["im2col"].tobytes(), name
                assert mod.col2im(cols, shape).tobytes() == ref["col2im"].tobytes(), name
                rows.append((f"im2col {label}", name, best_of(lambda: mod.im2col(x), args.repeat)))
                rows.append((f"col2im {label}", name, best_of(lambda: mod.col2im(cols, shape), args.repeat)))

            cin = shape[1]
            xt = Tensor(x, requires_grad=True)
            k, u = (Tensor(rng.uniform(-0.1, 0.1, (cout, cin, 3, 3, 3)).astype(np.float32), requires_grad=True)
                    for _ in range(2))
            b = Tensor(np.zeros(cout, np.float32), requires_grad=True)
            c = Tensor(np.zeros(cin, np.float32), requires_grad=True)
            for name, mod in backends.items():
                use_backend(mod)
                rows.append((f"conv+deconv fwd/bwd {label}", name,
                             best_of(lambda: conv_step(xt, k, b, u, c), args.repeat)))

        adam_args = [rng.standard_normal(ADAM_SIZE).astype(np.float32) for _ in range(3)]
        adam_args.append(rng.random(ADAM_SIZE).astype(np.float32))
        consts = (0.9, 0.999, 5e-4, 0.1, 0.001, 1e-8)
        ref = backends["numpy"].adam_update(*adam_args, *consts)
        for name, mod in backends.items():
            out = mod.adam_update(*adam_args, *consts)
            assert all(a.tobytes() == r.tobytes() for a, r in zip(out, ref)), name
            rows.append((f"adam {ADAM_SIZE} params", name,
                         best_of(lambda: mod.adam_update(*adam_args, *consts), args.repeat)))
    use_backend(backends[kernels.BACKEND])

    base = {task: t for task, name, t in rows if name == "numpy"}
    print(f"{'kernel':32s} {'backend':8s} {'ms':>9s} {'speedup':>8s}")
    for task, name, t in rows:
        print(f"{task:32s} {name:8s} {1e3 * t:9.2f} {base[task] / t:7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([{"kernel": k, "backend": n, "seconds": t} for k, n, t in rows], fh, indent=2)


if __name__ == "__main__":
    main()
