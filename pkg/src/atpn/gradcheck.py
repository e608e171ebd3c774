"""Central finite-difference checks of every primitive, loss and staged objective (float64)."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ATPN_TINY
from .conv import batch_norm, conv2d, conv_transpose2d
from .heatmap import fuse, generate_heatmap
from .layers import MultiviewBlock, MultiviewBlockSpec, MobileNetV3Block, MobileNetV3BlockSpec, coordconv
from .tensor import Parameter, Tensor

EPS = 1e-5
PRIMITIVE_TOL = 1e-4
OBJECTIVE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    trials: int = 1

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)

    def line(self) -> str:
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name:<28} rel.err {self.error:.2e} (tol {self.tolerance:.0e}, {self.trials} trials)"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over max(max |n|, 1e-6)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n)) / max(float(np.max(np.abs(n))), 1e-6))


def _readout(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(weights)))


def check_function(fn: Callable, arrays: list[np.ndarray], rng: np.random.Generator, eps: float = EPS) -> float:
    """Largest relative error over all inputs of ``fn`` for a random linear readout."""
    params = [Parameter(a.copy(), dtype=np.float64) for a in arrays]
    out = fn(*params)
    weights = rng.normal(size=out.shape)
    T.backward(_readout(out, weights))
    worst = 0.0
    with T.no_grad():
        for k, p in enumerate(params):
            numeric = np.zeros_like(p.data)
            base = [q.data for q in params]
            for idx in np.ndindex(p.shape):
                vals = []
                for sign in (1, -1):
                    trial = [b.copy() for b in base]
                    trial[k][idx] += sign * eps
                    o = fn(*[Tensor(t) for t in trial])
                    vals.append(float((o.data * weights).sum()))
                numeric[idx] = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, relative_error(p.grad, numeric))
    return worst


# -- input generators ---------------------------------------------------------
def _away(rng, shape, kinks=(0.0,), gap=0.05, lo=-2.0, hi=2.0):
    """Uniform samples kept at least ``gap`` from every kink."""
    x = rng.uniform(lo, hi, shape)
    for k in kinks:
        close = np.abs(x - k) < gap
        x[close] = k + np.where(x[close] >= k, gap, -gap) * rng.uniform(1.0, 3.0, close.sum())
    return x


def _nchw(rng, n=None, c=None, h=None, w=None):
    return (n or int(rng.integers(2, 4)), c or int(rng.integers(1, 4)),
            h or int(rng.integers(2, 6)), w or int(rng.integers(2, 6)))


def _vec(rng):
    return (int(rng.integers(1, 4)), int(rng.integers(2, 6)))


def _conv_case(rng, k, stride, padding, groups=1, depthwise=False):
    n = int(rng.integers(1, 3))
    cg = int(rng.integers(1, 3))
    c = cg * groups
    o = c if depthwise else groups * int(rng.integers(1, 3))
    h = int(rng.integers(k, k + 4))
    w = int(rng.integers(k, k + 4))
    wshape = (o, 1 if depthwise else cg, k, k)
    g = c if depthwise else groups
    return (
        [rng.normal(size=(n, c, h, w)), rng.normal(size=wshape), rng.normal(size=(o,))],
        lambda x, wt, b: conv2d(x, wt, b, stride, padding, g),
    )


def primitive_cases() -> dict[str, Callable]:
    """name -> rng -> (input arrays, function of Tensors)."""
    cases: dict[str, Callable] = {}

    def same2(fn, maker=None):
        def build(rng):
            shape = _nchw(rng) if maker is None else maker(rng)
            return [rng.normal(size=shape), rng.normal(size=shape)], fn
        return build

    cases["add"] = same2(T.add)
    cases["sub"] = same2(T.sub)
    cases["mul"] = same2(T.mul)

    def bcast(fn, per_sample):
        def build(rng):
            s = _nchw(rng)
            b = (s[0] if per_sample else 1, s[1], 1, 1)
            return [rng.normal(size=s), rng.normal(size=b)], fn
        return build

    cases["add[1,C,1,1]"] = bcast(T.add, False)
    cases["mul[1,C,1,1]"] = bcast(T.mul, False)
    cases["mul[N,C,1,1]"] = bcast(T.mul, True)
    cases["sub[N,C,1,1]"] = bcast(T.sub, True)
    cases["mul-scalar"] = lambda rng: ([rng.normal(size=_nchw(rng)), rng.normal(size=())], T.mul)
    cases["neg"] = lambda rng: ([rng.normal(size=_vec(rng))], T.neg)
    cases["scale"] = lambda rng: ([rng.normal(size=_vec(rng))], lambda a: T.scale(a, 1.7))
    cases["clamp-min"] = lambda rng: ([_away(rng, _vec(rng), (0.5,))], lambda a: T.clamp_min(a, 0.5))
    cases["clip"] = lambda rng: ([_away(rng, _vec(rng), (-0.5, 0.5))], lambda a: T.clip(a, -0.5, 0.5))
    cases["square"] = lambda rng: ([rng.normal(size=_vec(rng))], T.square)
    cases["log"] = lambda rng: ([rng.uniform(0.2, 3.0, _vec(rng))], T.log)
    cases["exp"] = lambda rng: ([rng.normal(size=_vec(rng))], T.exp)
    cases["sqrt"] = lambda rng: ([rng.uniform(0.2, 3.0, _vec(rng))], T.sqrt)
    cases["row-norm"] = lambda rng: ([rng.normal(size=_vec(rng))], T.row_norm)
    cases["relu"] = lambda rng: ([_away(rng, _vec(rng))], T.relu)
    cases["sigmoid"] = lambda rng: ([rng.normal(size=_vec(rng)) * 2], T.sigmoid)
    cases["tanh"] = lambda rng: ([rng.normal(size=_vec(rng)) * 2], T.tanh)
    cases["swish"] = lambda rng: ([rng.normal(size=_vec(rng)) * 2], T.swish)
    cases["hard-sigmoid"] = lambda rng: ([_away(rng, _vec(rng), (-3.0, 3.0), lo=-5, hi=5)], T.hard_sigmoid)
    cases["hard-swish"] = lambda rng: ([_away(rng, _vec(rng), (-3.0, 3.0), lo=-5, hi=5)], T.hard_swish)
    cases["softmax-rows"] = lambda rng: ([rng.normal(size=_vec(rng))], lambda a: T.softmax(a, axis=1))
    cases["softmax-cols"] = lambda rng: ([rng.normal(size=_vec(rng))], lambda a: T.softmax(a, axis=0))
    cases["sum"] = lambda rng: ([rng.normal(size=_nchw(rng))], lambda a: T.tsum(a))
    cases["sum-axis"] = lambda rng: ([rng.normal(size=_nchw(rng))], lambda a: T.tsum(a, axis=1))
    cases["mean-axes"] = lambda rng: ([rng.normal(size=_nchw(rng))], lambda a: T.mean(a, axis=(0, 2)))
    cases["reshape"] = lambda rng: ([rng.normal(size=_nchw(rng))], lambda a: T.reshape(a, (a.shape[0], -1)))
    cases["getitem"] = lambda rng: (
        [rng.normal(size=(4, 5))], lambda a: T.getitem(a, (np.array([0, 2, 2, 3]), slice(1, 4))))
    cases["pad-spatial"] = lambda rng: ([rng.normal(size=_nchw(rng))], lambda a: T.pad_spatial(a, 1, 2))

    def concat_case(rng):
        s = _nchw(rng)
        return [rng.normal(size=s), rng.normal(size=(s[0], 2, s[2], s[3]))], lambda a, b: T.concat_channels([a, b])

    cases["concat-channels"] = concat_case
    cases["concat-batch"] = lambda rng: ([rng.normal(size=(2, 3)), rng.normal(size=(1, 3))],
                                         lambda a, b: T.concat([a, b], axis=0))
    cases["global-avg-pool"] = lambda rng: ([rng.normal(size=_nchw(rng))], T.global_avg_pool)

    def dense_case(rng):
        n, fin = _vec(rng)
        fout = int(rng.integers(1, 4))
        return [rng.normal(size=(n, fin)), rng.normal(size=(fout, fin)), rng.normal(size=(fout,))], T.dense

    cases["dense"] = dense_case
    cases["conv-3x3-same"] = lambda rng: _conv_case(rng, 3, 1, "same")
    cases["conv-3x3-stride2"] = lambda rng: _conv_case(rng, 3, 2, "same")
    cases["conv-2x2-valid"] = lambda rng: _conv_case(rng, 2, 1, "valid")
    cases["conv-1x1"] = lambda rng: _conv_case(rng, 1, 1, "same")
    cases["conv-1x1-stride2"] = lambda rng: _conv_case(rng, 1, 2, "same")
    cases["conv-grouped"] = lambda rng: _conv_case(rng, 3, 1, "same", groups=2)
    cases["conv-depthwise"] = lambda rng: _conv_case(rng, 3, 2, "same", depthwise=True)

    def deconv_case(k, s):
        def build(rng):
            x = rng.normal(size=_nchw(rng, h=int(rng.integers(1, 4)), w=int(rng.integers(1, 4))))
            o = int(rng.integers(1, 3))
            return ([x, rng.normal(size=(x.shape[1], o, k, k)), rng.normal(size=(o,))],
                    lambda a, w, b: conv_transpose2d(a, w, b, s))
        return build

    cases["deconv-2x2-stride2"] = deconv_case(2, 2)
    cases["deconv-3x3-stride1"] = deconv_case(3, 1)

    def bn_case(training):
        def build(rng):
            s = _nchw(rng)
            rm, rv = rng.normal(size=s[1]), rng.uniform(0.5, 2.0, s[1])

            def fn(x, g, b):
                return batch_norm(x, g, b, rm.copy(), rv.copy(), training)

            return [rng.normal(size=s) * 2 + 1, rng.uniform(0.5, 1.5, s[1]), rng.normal(size=s[1])], fn
        return build

    cases["batchnorm-train"] = bn_case(True)
    cases["batchnorm-infer"] = bn_case(False)
    cases["coordconv"] = lambda rng: ([rng.normal(size=_nchw(rng))], coordconv)

    def upfuse_case(rng):
        n, c1, c2, o = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h = int(rng.integers(1, 4))
        arrays = [rng.normal(size=(n, c1, 2 * h, 2 * h)), rng.normal(size=(n, c2, h, h)),
                  rng.normal(size=(o, c2, 1, 1)), rng.normal(size=(o, o, 2, 2)), rng.normal(size=(o,))]

        def fn(low, high, w1, wt, bt):
            return T.concat_channels([low, conv_transpose2d(conv2d(high, w1), wt, bt, 2)])

        return arrays, fn

    cases["upsample-fuse"] = upfuse_case

    def fuse_case(rng):
        s = _nchw(rng, h=6, w=6)
        hm = generate_heatmap(rng.uniform(0, 1, (s[0], 3, 2)), (6, 6))
        return [rng.normal(size=s)], lambda x: fuse(x, hm)

    cases["heatmap-fuse"] = fuse_case
    return cases


def loss_cases() -> dict[str, Callable]:
    from .training import loss_alignment, loss_pose, loss_tracking

    def align(per_landmark):
        def build(rng):
            n, L = int(rng.integers(1, 4)), int(rng.integers(2, 5))
            tgt = rng.uniform(0, 1, (n, 2 * L))
            d = rng.uniform(0.3, 1.0, n)
            return [tgt + rng.normal(0, 0.1, tgt.shape)], lambda p: loss_alignment(p, tgt, d, per_landmark)
        return build

    def track(rng):
        n = int(rng.integers(2, 6))
        y = rng.integers(0, 2, n)
        return [rng.normal(size=(n, 2))], lambda z: loss_tracking(T.softmax(z, axis=1), y)

    def pose(rng):
        n = int(rng.integers(1, 4))
        tgt = rng.uniform(-1, 1, (n, 3))
        return [tgt + rng.normal(0, 0.3, tgt.shape)], lambda p: loss_pose(p, tgt)

    return {"loss-alignment": align(False), "loss-alignment-per-landmark": align(True),
            "loss-tracking": track, "loss-pose": pose}


def run_cases(cases: dict[str, Callable], trials: int, seed: int, tol: float) -> list[CheckResult]:
    out = []
    for i, (name, build) in enumerate(cases.items()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(trials):
            arrays, fn = build(rng)
            worst = max(worst, check_function(fn, [np.asarray(a, dtype=np.float64) for a in arrays], rng))
        out.append(CheckResult(name, worst, tol, trials))
    return out


# -- whole-module and objective checks ----------------------------------------
def check_parameters(loss_fn: Callable[[], Tensor], params: list[Parameter], rng: np.random.Generator,
                     coords: int = 24, directions: int = 3, eps: float = EPS) -> float:
    """Compare backprop against central differences on a random coordinate subset and random directions."""
    for p in params:
        p.zero_grad()
    T.backward(loss_fn())
    grads = [p.grad.copy() for p in params]

    def value():
        with T.no_grad():
            return float(loss_fn().data)

    sizes = np.array([p.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric = [], []
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[k]), params[k].shape)
        orig = params[k].data[idx]
        params[k].data[idx] = orig + eps
        up = value()
        params[k].data[idx] = orig - eps
        down = value()
        params[k].data[idx] = orig
        analytic.append(grads[k][idx])
        numeric.append((up - down) / (2 * eps))
    worst = relative_error(np.array(analytic), np.array(numeric))
    for _ in range(directions):
        dirs = [rng.normal(size=p.shape) for p in params]
        norm = np.sqrt(sum((d * d).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        saved = [p.data.copy() for p in params]
        for p, d, s in zip(params, dirs, saved):
            p.data = s + eps * d
        up = value()
        for p, d, s in zip(params, dirs, saved):
            p.data = s - eps * d
        down = value()
        for p, s in zip(params, saved):
            p.data = s
        a = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        worst = max(worst, relative_error(np.array([a]), np.array([(up - down) / (2 * eps)])))
    return worst


def _float64(module):
    return module.astype(np.float64)


def block_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 500])
    out = []
    blocks = {
        "mobilenet-v3-block": (4, MobileNetV3Block(4, MobileNetV3BlockSpec(3, 4, 8, 1, True, "swish"), rng=rng)),
        "mobilenet-v3-block-stride2": (3, MobileNetV3Block(3, MobileNetV3BlockSpec(5, 4, 6, 2, False, "swish"), rng=rng)),
        "multiview-block": (3, MultiviewBlock(MultiviewBlockSpec(3, 4, (3, 5, 7), 2), rng=rng)),
        "multiview-block-identity": (4, MultiviewBlock(MultiviewBlockSpec(4, 4, (3, 5, 7), 2), rng=rng)),
    }
    for name, (cin, blk) in blocks.items():
        _float64(blk).train()
        x = Parameter(rng.normal(size=(2, cin, 6, 6)), dtype=np.float64)
        weights = rng.normal(size=blk(x).shape)
        params = [x] + blk.parameters()
        err = check_parameters(lambda: _readout(blk(x), weights), params, rng, coords=40, directions=3)
        out.append(CheckResult(name, err, PRIMITIVE_TOL))
    return out


def objective_checks(seed: int = 0) -> list[CheckResult]:
    """Stage objectives of a tiny float64 network against finite differences."""
    from .model import AtpnNet
    from .training import objective_stage1, objective_stage2, objective_stage3, stage_parameters

    rng = np.random.default_rng([seed, 900])
    cfg = ATPN_TINY
    model = _float64(AtpnNet(cfg, seed=seed))
    n = 4
    images = rng.uniform(0, 1, (n, 3, cfg.input_size, cfg.input_size))
    shapes = rng.uniform(0.2, 0.8, (n, 2 * cfg.landmarks))
    d = rng.uniform(0.3, 0.6, n)
    labels = np.array([1, 0, 1, 0])
    poses = rng.uniform(-1, 1, (n, 3))
    results = []

    model.train()
    params = [p for _, p in stage_parameters(model, 1)]
    err = check_parameters(lambda: objective_stage1(model, images, shapes, d, 1e-3)[0], params, rng, 60, 4)
    results.append(CheckResult("objective-stage1", err, OBJECTIVE_TOL))

    for stage, fn, target in ((2, objective_stage2, labels), (3, objective_stage3, poses)):
        model.backbone.freeze().eval()
        model.alignment.freeze().eval()
        head = model.tracking if stage == 2 else model.pose
        head.train()
        params = [p for _, p in stage_parameters(model, stage)]
        err = check_parameters(lambda: fn(model, images, target, 1e-3)[0], params, rng, 60, 4)
        results.append(CheckResult(f"objective-stage{stage}", err, OBJECTIVE_TOL))
        model.backbone.freeze(False)
        model.alignment.freeze(False)
    return results


def run_suite(seed: int = 0, trials: int = 20, include_objectives: bool = True) -> tuple[list[CheckResult], float]:
    t = time.time()
    results = run_cases(primitive_cases(), trials, seed, PRIMITIVE_TOL)
    results += run_cases(loss_cases(), trials, seed + 1, PRIMITIVE_TOL)
    results += block_checks(seed)
    if include_objectives:
        results += objective_checks(seed)
    return results, time.time() - t
