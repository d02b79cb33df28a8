"""Finite-difference verification of every analytic gradient.

Each check builds a seeded random instance, confirms it sits away from
non-differentiable points (ReLU kinks, sqrt guard, max ties, angle-gap
branch; anything closer than MIN_KINK_MARGIN is resampled with the next
seed), then compares backward() against central differences, element by
element.  The composite check freezes the step's stop-gradient targets so
the differenced function is exactly the one the optimizer descends.
"""

from __future__ import annotations

import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import backbone, oel, oracle, scl, trainer
from . import tensor as T
from .backbone import BackboneConfig
from .rng import Rng, derive_seed
from .trainer import TrainConfig

FD_STEP = 1e-6
TOLERANCE = 1e-4
MIN_KINK_MARGIN = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    instances: int
    passed: bool
    seconds: float


@dataclass
class Report:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@contextmanager
def _kink_monitor():
    margins = [np.inf]

    def hook(op, margin):
        margins[0] = min(margins[0], margin)

    T.set_trace_hook(hook)
    try:
        yield margins
    finally:
        T.set_trace_hook(None)


def _well_separated(loss_fn) -> bool:
    with _kink_monitor() as margins:
        loss_fn()
    return margins[0] > MIN_KINK_MARGIN


def _compare(loss_value: T.Value, params: dict[str, T.Value], loss_fn) -> float:
    T.backward(loss_value, leaves=params.values())
    analytic = {n: (p.grad if p.grad is not None else np.zeros(p.shape))
                for n, p in params.items()}
    numeric = oracle.finite_difference_grad(loss_fn, params, FD_STEP)
    return max(relative_error(analytic[n], numeric[n]) for n in params)


def _check(name: str, make_instance, instances: int, report: Report,
           tolerance: float = TOLERANCE) -> None:
    t0 = time.perf_counter()
    worst = 0.0
    done = 0
    seed = 0
    while done < instances:
        build = make_instance(seed)
        seed += 1
        if build is None:
            continue
        loss_fn, params = build
        if not _well_separated(loss_fn):
            continue
        worst = max(worst, _compare(loss_fn(value=True), params, loss_fn))
        done += 1
        if seed > instances * 50:
            raise RuntimeError(f"{name}: could not build {instances} well-separated instances")
    report.results.append(CheckResult(name, worst, instances,
                                      worst <= tolerance, time.perf_counter() - t0))


class _Fn:
    """loss_fn wrapper: call() -> float for FD, call(value=True) -> Value."""

    def __init__(self, builder):
        self.builder = builder

    def __call__(self, value: bool = False):
        out = self.builder()
        return out if value else float(out.data)


# ---------------------------------------------------------------------------
# per-op instances

def _rand(rng: Rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape)


def _sum_probe(out: T.Value, rng: Rng) -> T.Value:
    probe = T.const(_rand(rng, out.shape))
    return T.reduce_sum(T.mul(out, probe))


def _label(s: str) -> int:
    return zlib.crc32(s.encode())


def _elementwise_instance(kind):
    def make(seed):
        rng = Rng(derive_seed(9000, _label(kind), seed))
        x = T.param(_rand(rng, (3, 4)))
        params = {"x": x}
        if kind in ("add", "sub", "mul"):
            params["y"] = T.param(_rand(rng, (4,)))        # exercises broadcasting
        elif kind == "sqrt":
            x.data = _rand(rng, (3, 4), 0.2, 2.0)
        probe = T.const(_rand(rng.spawn(1), (3, 4)))

        def build():
            out = T.scale(params["x"], 1.7) if kind == "scale" \
                else T.elementwise(kind, *params.values())
            return T.reduce_sum(T.mul(out, probe))

        return _Fn(build), params
    return make


def _conv_instance(stride, padding):
    def make(seed):
        rng = Rng(derive_seed(9100, stride * 10 + len(padding), seed))
        x = T.param(_rand(rng, (2, 5, 5, 2)))
        k = T.param(_rand(rng, (3, 3, 2, 3)))
        params = {"x": x, "k": k}
        out_shape = T.conv2d(x, k, stride, padding).shape
        probe = T.const(_rand(rng, out_shape))

        def build():
            return T.reduce_sum(T.mul(T.conv2d(params["x"], params["k"], stride, padding), probe))

        return _Fn(build), params
    return make


def _dense_instance(seed):
    rng = Rng(derive_seed(9200, seed))
    params = {"x": T.param(_rand(rng, (3, 5))), "w": T.param(_rand(rng, (5, 4))),
              "b": T.param(_rand(rng, (4,)))}
    probe = T.const(_rand(rng, (3, 4)))

    def build():
        return T.reduce_sum(T.mul(T.dense(params["x"], params["w"], params["b"]), probe))

    return _Fn(build), params


def _reduce_instance(kind, axes):
    def make(seed):
        rng = Rng(derive_seed(9300, _label(kind), seed))
        params = {"x": T.param(_rand(rng, (3, 4, 2)))}
        out_shape = T.reduce(kind, params["x"], axes).shape
        probe = T.const(_rand(rng, out_shape))

        def build():
            return T.reduce_sum(T.mul(T.reduce(kind, params["x"], axes), probe))

        return _Fn(build), params
    return make


def _gap_instance(seed):
    rng = Rng(derive_seed(9350, seed))
    params = {"x": T.param(_rand(rng, (2, 4, 4, 3)))}
    probe = T.const(_rand(rng, (2, 3)))

    def build():
        return T.reduce_sum(T.mul(T.global_avg_pool(params["x"]), probe))

    return _Fn(build), params


def _softmax_instance(seed):
    rng = Rng(derive_seed(9400, seed))
    params = {"logits": T.param(_rand(rng, (3, 5), -2.0, 2.0))}
    labels = np.zeros((3, 5))
    for i in range(3):
        labels[i, rng.randint(0, 5)] = 1.0

    def build():
        return T.reduce_mean(T.softmax_cross_entropy(params["logits"], labels))

    return _Fn(build), params


def _concat_instance(seed):
    rng = Rng(derive_seed(9500, seed))
    params = {"a": T.param(_rand(rng, (3, 2))), "b": T.param(_rand(rng, (3, 4)))}
    probe = T.const(_rand(rng, (3, 6)))

    def build():
        return T.reduce_sum(T.mul(T.concat(params["a"], params["b"], axis=1), probe))

    return _Fn(build), params


def _gather_instance(seed):
    rng = Rng(derive_seed(9600, seed))
    params = {"x": T.param(_rand(rng, (2, 4, 4, 3)))}
    probe = T.const(_rand(rng, (2, 3)))

    def build():
        return T.reduce_sum(T.mul(T.gather_cells(params["x"], [1, 3], [2, 0]), probe))

    return _Fn(build), params


def _correlation_instance(seed):
    rng = Rng(derive_seed(9700, seed))
    params = {"f": T.param(_rand(rng, (3, 3, 4), 0.0, 1.0)),
              "g": T.param(_rand(rng, (3, 3, 4), 0.0, 1.0))}
    probe = T.const(_rand(rng, (3, 3)))

    def build():
        return T.reduce_sum(T.mul(oel.region_correlation(params["f"], params["g"]), probe))

    return _Fn(build), params


def _mask_head_instance(seed):
    rng = Rng(derive_seed(9800, seed))
    params = {"f": T.param(_rand(rng, (4, 4, 3))),
              "w": T.param(_rand(rng, (1, 1, 3, 1))), "b": T.param(_rand(rng, (1,)))}
    probe = T.const(_rand(rng, (4, 4)))

    def build():
        return T.reduce_sum(T.mul(oel.mask_head(params["f"], params["w"], params["b"]), probe))

    return _Fn(build), params


def _oel_loss_instance(seed):
    rng = Rng(derive_seed(9900, seed))
    params = {"f": T.param(_rand(rng, (4, 4, 3))),
              "w": T.param(_rand(rng, (1, 1, 3, 1))), "b": T.param(_rand(rng, (1,)))}
    target = T.const(_rand(rng, (4, 4), 0.0, 1.0))

    def build():
        return oel.oel_loss(oel.mask_head(params["f"], params["w"], params["b"]), target)

    return _Fn(build), params


def _scl_setup(seed, loss: str):
    rng = Rng(derive_seed(10000, _label(loss), seed))
    N, C1 = 4, 3
    params = {"h": T.param(_rand(rng, (N, N, C1), 0.0, 1.0)),
              "w": T.param(_rand(rng, (2 * C1, 2))), "b": T.param(_rand(rng, (2,)))}
    ref = (rng.randint(0, N), rng.randint(0, N))
    truth = scl.ground_truth_polar(N, ref)
    weights = _rand(rng, (N, N), 0.1, 1.0)

    def build():
        pred = scl.scl_head(params["h"], ref, params["w"], params["b"])
        if loss == "distance":
            return scl.distance_loss(pred, truth, weights)
        if loss == "angle":
            return scl.angle_loss(pred, truth, weights)
        return scl.scl_loss(pred, truth, weights)

    return _Fn(build), params


def _cls_loss_instance(seed):
    rng = Rng(derive_seed(10100, seed))
    bconfig = _toy_backbone(seed)
    params = backbone.init_params(bconfig)
    images = _rand(rng, (2, bconfig.input_size, bconfig.input_size, 3), 0.0, 1.0)
    labels = np.zeros((2, bconfig.class_count))
    for i in range(2):
        labels[i, rng.randint(0, bconfig.class_count)] = 1.0

    def build():
        _, logits = backbone.forward(params, images, bconfig)
        return backbone.classification_loss(logits, labels)

    return _Fn(build), params


# ---------------------------------------------------------------------------
# composite objective on a toy model

def _toy_backbone(seed) -> BackboneConfig:
    # one stage: 16 px input -> stem 8x8 -> stage grid 4x4 with 8 channels
    return BackboneConfig(input_size=16, stem_channels=4, stage_channels=(8,),
                          stem_stride=2, stage_strides=(2,), class_count=2, seed=seed)


def _composite_instance(seed):
    rng = Rng(derive_seed(10200, seed))
    bconfig = _toy_backbone(seed)
    tconfig = TrainConfig(attached_stages=(0,), proj_channels=8, positives=2,
                          batch_size=2, seed=seed)
    model = trainer.init_model(bconfig, tconfig)
    B, P, H = 2, tconfig.positives, bconfig.input_size
    K = bconfig.class_count
    labels = np.zeros((B, K))
    for i in range(B):
        labels[i, rng.randint(0, K)] = 1.0
    batch = trainer.Batch(
        images=_rand(rng, (B, H, H, 3), 0.0, 1.0),
        labels=labels,
        positives=_rand(rng, (B, P, H, H, 3), 0.0, 1.0),
        anchor_indices=list(range(B)),
    )
    total, _, frozen, _, _ = trainer.build_losses(model, batch)

    def build():
        t, _, _, _, _ = trainer.build_losses(model, batch, frozen=frozen)
        return t

    return _Fn(build), model.params


# ---------------------------------------------------------------------------
# fault injection (a testing hook for the failure path)

_FAULT_TARGETS = {
    "add": (T, "add"), "sub": (T, "sub"), "mul": (T, "mul"), "scale": (T, "scale"),
    "relu": (T, "relu"), "sqrt": (T, "sqrt"), "square": (T, "square"),
    "conv2d": (T, "conv2d"), "dense": (T, "dense"), "concat": (T, "concat"),
    "softmax_cross_entropy": (T, "softmax_cross_entropy"),
    "region_correlation": (oel, "region_correlation"),
}


@contextmanager
def inject_fault(op_name: str):
    """Scale the named op's backward by 1.01; grad checks must then fail."""
    module, attr = _FAULT_TARGETS[op_name]
    original = getattr(module, attr)

    def corrupted(*args, **kwargs):
        out = original(*args, **kwargs)
        inner = out._backward
        if inner is not None:
            out._backward = lambda g: tuple((p, gg * 1.01) for p, gg in inner(g))
        return out

    setattr(module, attr, corrupted)
    try:
        yield
    finally:
        setattr(module, attr, original)


# ---------------------------------------------------------------------------
# the suite

def run_all(instances: int = 20, composite_instances: int | None = None,
            fault: str | None = None) -> Report:
    """Every per-op check plus the loss and composite checks."""
    report = Report()
    ctx = inject_fault(fault) if fault else None
    if ctx:
        ctx.__enter__()
    try:
        for kind in ("relu", "add", "sub", "mul", "scale", "sqrt", "square"):
            _check(f"elementwise/{kind}", _elementwise_instance(kind), instances, report)
        for stride, padding in ((1, "same"), (2, "same"), (1, "valid"), (2, "valid")):
            _check(f"conv2d/s{stride}-{padding}", _conv_instance(stride, padding),
                   instances, report)
        _check("dense", _dense_instance, instances, report)
        for kind in ("sum", "mean", "max"):
            _check(f"reduce/{kind}", _reduce_instance(kind, (1, 2)), instances, report)
        _check("reduce/global-average-pool", _gap_instance, instances, report)
        _check("softmax_cross_entropy", _softmax_instance, instances, report)
        _check("concat", _concat_instance, instances, report)
        _check("gather_cells", _gather_instance, instances, report)
        _check("region_correlation", _correlation_instance, instances, report)
        _check("mask_head", _mask_head_instance, instances, report)
        _check("loss/classification", _cls_loss_instance, max(3, instances // 4), report)
        _check("loss/oel", _oel_loss_instance, instances, report)
        _check("loss/distance", lambda s: _scl_setup(s, "distance"), instances, report)
        _check("loss/angle", lambda s: _scl_setup(s, "angle"), instances, report)
        _check("loss/scl", lambda s: _scl_setup(s, "scl"), instances, report)
        _check("composite/total", _composite_instance,
               composite_instances if composite_instances is not None else instances, report)
    finally:
        if ctx:
            ctx.__exit__(None, None, None)
    return report
