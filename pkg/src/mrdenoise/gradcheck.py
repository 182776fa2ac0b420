"""Central finite-difference checks for the differentiation engine."""
import numpy as np

from mrdenoise.tensor import Tape, kink_monitor

# below this gradient norm the comparison becomes absolute
GRAD_FLOOR = 1e-8


def numeric_grad(fn, tensors, step=1e-3, max_entries=None, rng=None, skip_kinks=True):
    """Central differences of scalar ``fn()`` w.r.t. each tensor in ``tensors``.

    ``fn`` re-reads ``tensor.values`` on every call, so the tensors are
    perturbed in place and restored. Entries whose +/- step stencil flips the
    sign of any ReLU/LeakyReLU input are kink-adjacent and come back as NaN,
    as do entries left out when ``max_entries`` limits the probes per tensor.
    """
    rng = rng or np.random.default_rng(0)
    with kink_monitor() as mon:
        fn()
    base = mon.signature()
    grads = []
    for t in tensors:
        flat = t.values.reshape(-1)
        out = np.full(flat.shape, np.nan)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with kink_monitor() as plus:
                fp = float(fn().values)
            flat[i] = orig - step
            with kink_monitor() as minus:
                fm = float(fn().values)
            flat[i] = orig
            if skip_kinks and not (np.array_equal(plus.signature(), base)
                                   and np.array_equal(minus.signature(), base)):
                continue
            out[i] = (fp - fm) / (2 * step)
        grads.append(out.reshape(t.shape))
    return grads


def analytic_grad(fn, tensors):
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64) for t in tensors]


def relative_error(analytic, numeric):
    """Norm-wise relative error over the probed (non-NaN) entries."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), GRAD_FLOOR)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn, tensors, step=1e-3, max_entries=None, seed=0, report=None):
    """Return the worst relative error between backprop and finite differences.

    If ``report`` is a dict it is filled with per-tensor errors and the number
    of probed / kink-excluded entries.
    """
    ana = analytic_grad(fn, tensors)
    num = numeric_grad(fn, tensors, step=step, max_entries=max_entries,
                       rng=np.random.default_rng(seed))
    errs = [relative_error(a, n) for a, n in zip(ana, num)]
    if report is not None:
        probed = sum(t.size if max_entries is None else min(t.size, max_entries) for t in tensors)
        kept = sum(int(np.sum(~np.isnan(n))) for n in num)
        report.update(errors=errs, probed=probed, excluded=probed - kept)
    return max(errs)
