"""Finite-difference gradient suite.

Each case pairs an op (or a whole miniature network) with a random input
and checks the analytic gradient against central differences.  The same
suite backs the unit tests, the acceptance run, and the `gradcheck` CLI
subcommand; a case fails when its max relative error exceeds TOLERANCE.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TOLERANCE = 1e-4
FD_STEP = 1e-5


def _proj(rng, shape):
    """Fixed random projection to a scalar, so every output element counts."""
    r = Tensor(rng.normal(size=shape))

    def to_scalar(out):
        return ad.tensor_sum(ad.mul(out, r))

    return to_scalar


def _away_from_zero(rng, shape, min_abs=0.1):
    x = rng.uniform(min_abs, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(seed: int):
    """Yield (name, f, x) gradient-check cases covering every op kind."""
    rng = np.random.default_rng(seed)
    cases = []

    def unary(name, fn, x):
        p = _proj(rng, fn(Tensor(x)).shape)
        cases.append((name, lambda t, fn=fn, p=p: p(fn(t)), Tensor(x)))

    # elementwise arithmetic, with broadcasting on both sides
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 1))
    c = rng.normal(size=(2, 3, 4))
    for kind in ("add", "sub", "mul"):
        p = _proj(rng, (3, 4))
        cases.append((f"{kind}.lhs",
                      lambda t, k=kind, b=Tensor(b), p=p: p(ad.forward_op(k, t, b)),
                      Tensor(a.copy())))
        pb = _proj(rng, (2, 3, 4))
        cases.append((f"{kind}.rhs_broadcast",
                      lambda t, k=kind, c=Tensor(c), pb=pb: pb(ad.forward_op(k, c, t)),
                      Tensor(b.copy())))

    unary("relu", ad.relu, _away_from_zero(rng, (4, 5)))
    unary("sigmoid", ad.sigmoid, rng.normal(size=(4, 5)))
    unary("exp", ad.exp, rng.normal(size=(3, 3)))
    unary("log", ad.log, rng.uniform(0.2, 2.0, size=(3, 3)))
    for p_exp in (2.0, 3.0, -1.0, 0.5):
        unary(f"power[{p_exp}]", lambda t, pe=p_exp: ad.power(t, pe),
              rng.uniform(0.2, 2.0, size=(2, 4)))

    slope = Tensor(np.array([0.25]))
    xq = _away_from_zero(rng, (3, 6))
    pq = _proj(rng, (3, 6))
    cases.append(("prelu.x", lambda t, s=slope, pq=pq: pq(ad.prelu(t, s)), Tensor(xq)))
    cases.append(("prelu.slope",
                  lambda t, xc=Tensor(xq.copy()), pq=pq: pq(ad.prelu(xc, t)),
                  Tensor(np.array([0.25]))))

    for axis, keep in ((None, False), (-1, False), (0, True), (1, True)):
        x = rng.normal(size=(3, 5))
        out_shape = np.mean(x, axis=axis, keepdims=keep).shape
        pm = _proj(rng, out_shape)
        cases.append((f"mean[axis={axis},keep={keep}]",
                      lambda t, ax=axis, kd=keep, pm=pm: pm(ad.mean(t, ax, kd)),
                      Tensor(x)))
        ps = _proj(rng, out_shape)
        cases.append((f"sum[axis={axis},keep={keep}]",
                      lambda t, ax=axis, kd=keep, ps=ps: ps(ad.tensor_sum(t, ax, kd)),
                      Tensor(rng.normal(size=(3, 5)))))

    for axis in (-1, 0):
        unary(f"softmax[axis={axis}]", lambda t, ax=axis: ad.softmax(t, ax),
              rng.normal(size=(4, 5)))

    other = Tensor(rng.normal(size=(2, 4)))
    pc = _proj(rng, (5, 4))
    cases.append(("concat", lambda t, o=other, pc=pc: pc(ad.concat([t, o], axis=0)),
                  Tensor(rng.normal(size=(3, 4)))))
    unary("slice", lambda t: ad.tensor_slice(t, axis=-1, start=1, stop=4),
          rng.normal(size=(3, 6)))

    # matmul: plain, transposed, batched
    mb = Tensor(rng.normal(size=(4, 5)))
    pm2 = _proj(rng, (3, 5))
    cases.append(("matmul.a", lambda t, b=mb, pm2=pm2: pm2(ad.matmul(t, b)),
                  Tensor(rng.normal(size=(3, 4)))))
    ma = Tensor(rng.normal(size=(3, 4)))
    cases.append(("matmul.b", lambda t, a=ma, pm2=pm2: pm2(ad.matmul(a, t)),
                  Tensor(rng.normal(size=(4, 5)))))
    pt = _proj(rng, (3, 5))
    cases.append(("matmul.trans_b", lambda t, a=ma, pt=pt: pt(ad.matmul(a, t, trans_b=True)),
                  Tensor(rng.normal(size=(5, 4)))))
    pbm = _proj(rng, (2, 3, 5))
    cases.append(("matmul.batched",
                  lambda t, b=mb, pbm=pbm: pbm(ad.matmul(t, b)),
                  Tensor(rng.normal(size=(2, 3, 4)))))

    # conv1d: stride/dilation/pad, depthwise, grouped, batched; x and w grads
    conv_specs = [
        ("plain", (2, 9), (3, 2, 3), dict(stride=1, dilation=1, groups=1, pad=0)),
        ("stride_pad", (2, 8), (3, 2, 3), dict(stride=2, dilation=1, groups=1, pad=1)),
        ("dilated", (2, 12), (3, 2, 3), dict(stride=1, dilation=2, groups=1, pad=2)),
        ("depthwise", (3, 10), (3, 1, 3), dict(stride=1, dilation=2, groups=3, pad=2)),
        ("grouped", (4, 9), (6, 2, 3), dict(stride=1, dilation=1, groups=2, pad=1)),
        ("batched", (2, 3, 10), (4, 3, 5), dict(stride=2, dilation=1, groups=1, pad=0)),
    ]
    for tag, xs, ws, kw in conv_specs:
        x0 = rng.normal(size=xs)
        w0 = rng.normal(size=ws)
        out_shape = ad.conv1d(Tensor(x0), Tensor(w0), **kw).shape
        px = _proj(rng, out_shape)
        cases.append((f"conv1d.{tag}.x",
                      lambda t, w=Tensor(w0), kw=kw, px=px: px(ad.conv1d(t, w, **kw)),
                      Tensor(x0.copy())))
        pw = _proj(rng, out_shape)
        cases.append((f"conv1d.{tag}.w",
                      lambda t, x=Tensor(x0.copy()), kw=kw, pw=pw: pw(ad.conv1d(x, t, **kw)),
                      Tensor(w0.copy())))

    for tag, xs, ws, stride in [("plain", (2, 5), (2, 3, 4), 2),
                                ("batched", (2, 2, 5), (2, 1, 4), 3)]:
        x0 = rng.normal(size=xs)
        w0 = rng.normal(size=ws)
        out_shape = ad.conv1d_transpose(Tensor(x0), Tensor(w0), stride=stride).shape
        px = _proj(rng, out_shape)
        cases.append((f"conv1d_transpose.{tag}.x",
                      lambda t, w=Tensor(w0), s=stride, px=px:
                      px(ad.conv1d_transpose(t, w, stride=s)),
                      Tensor(x0.copy())))
        pw = _proj(rng, out_shape)
        cases.append((f"conv1d_transpose.{tag}.w",
                      lambda t, x=Tensor(x0.copy()), s=stride, pw=pw:
                      pw(ad.conv1d_transpose(x, t, stride=s)),
                      Tensor(w0.copy())))

    # global layer norm: x, gain and bias grads
    for shape in ((3, 7), (2, 3, 7)):
        x0 = rng.normal(size=shape)
        g0 = rng.uniform(0.5, 1.5, size=(shape[-2], 1))
        b0 = rng.normal(size=(shape[-2], 1))
        pn = _proj(rng, shape)
        cases.append((f"layer_norm_global{shape}.x",
                      lambda t, g=Tensor(g0), b=Tensor(b0), pn=pn:
                      pn(ad.layer_norm_global(t, g, b)),
                      Tensor(x0.copy())))
        cases.append((f"layer_norm_global{shape}.gain",
                      lambda t, x=Tensor(x0.copy()), b=Tensor(b0), pn=pn:
                      pn(ad.layer_norm_global(x, t, b)),
                      Tensor(g0.copy())))
        cases.append((f"layer_norm_global{shape}.bias",
                      lambda t, x=Tensor(x0.copy()), g=Tensor(g0), pn=pn:
                      pn(ad.layer_norm_global(x, g, t)),
                      Tensor(b0.copy())))

    return cases


def run_op_suite(seed: int = 0, h: float = FD_STEP):
    """Run every op case once; returns [(name, max_rel_err)]."""
    return [(name, ad.check_gradient(f, x, h)) for name, f, x in op_cases(seed)]


def run_model_suite(seed: int = 0, h: float = 1e-5):
    """End-to-end checks on miniature topologies; returns [(name, err)].

    Covers both network kinds, all IPD modes and both loss weightings.
    Imported lazily to keep this module usable without the model stack.
    """
    from .model import model_gradient_cases

    results = []
    for name, build_loss, params in model_gradient_cases(seed):
        err = check_parameter_gradients(build_loss, params, h)
        results.append((name, err))
    return results


def check_parameter_gradients(build_loss, params: dict, h: float = 1e-5) -> float:
    """Max relative FD error over every coordinate of every named parameter.

    `build_loss()` reconstructs the scalar loss from scratch; analytic
    gradients are computed once, numeric ones per coordinate.  The
    per-coordinate denominator is floored at TOLERANCE times the largest
    gradient magnitude of the case: coordinates whose true gradient is
    that many orders below the dominant ones (e.g. directions a
    scale-invariant loss provably ignores) are held to an absolute rather
    than relative standard, since central differences cannot resolve them
    past the float64 cancellation floor.
    """
    saved = {name: t.grad for name, t in params.items()}
    for t in params.values():
        t.grad = None
    tp = ad.tape()
    saved_records = tp.records[:]
    tp.clear()
    try:
        loss = build_loss()
        ad.backward(loss)
        analytic = {name: (t.grad.copy() if t.grad is not None
                           else np.zeros(t.shape)) for name, t in params.items()}
    finally:
        tp.clear()
        tp.records.extend(saved_records)
        for name, t in params.items():
            t.grad = saved[name]

    scale = max((np.max(np.abs(a)) for a in analytic.values()), default=0.0)
    floor = max(1e-8, TOLERANCE * scale)
    worst = 0.0
    with ad.no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            a = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]

                def _fd_err(step):
                    flat[i] = orig + step
                    fp = build_loss().item()
                    flat[i] = orig - step
                    fm = build_loss().item()
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * step)
                    return abs(a[i] - num) / max(abs(a[i]), abs(num), floor)

                err = _fd_err(h)
                # A PReLU kink inside the +/-h interval corrupts the central
                # difference; shrinking h steps off the kink, while a wrong
                # analytic gradient keeps disagreeing at every step size.
                step = h
                while err >= 0.5 * TOLERANCE and step > h / 100.0:
                    step /= 8.0
                    err = min(err, _fd_err(step))
                worst = max(worst, err)
    return worst
