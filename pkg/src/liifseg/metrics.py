"""Segmentation metrics, analytic FLOPs accounting, and throughput benchmarks.

F1 and IoU ignore the background class (id 0) and exclude classes absent from
both prediction and ground truth from their means. Confusion matrices merge
by addition, so evaluation can be sharded and summed without changing the
result.
"""

import dataclasses
import json
import os
import platform
import time

import numpy as np

from . import numerics as nx
from .errors import ParameterError, ShapeError
from .loss import extract_edges

FLOPS_CONVENTION = (
    "2 FLOPs per multiply-accumulate; conv and linear layers only; "
    "ensemble decoding counts 4 head passes"
)


def confusion(pred, gt, num_classes):
    """C x C counts, rows = ground truth, cols = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"confusion: shapes {pred.shape} and {gt.shape} differ")
    joint = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1)
    return np.bincount(joint, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def _counts(cm):
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return tp, fp, fn


def f1_scores(cm, ignore=(0,)):
    """Per-class F1 (NaN where a class is absent from pred and gt) and their mean.

    The mean runs over classes that are present and not ignored.
    """
    tp, fp, fn = _counts(cm)
    present = (tp + fp + fn) > 0
    denom = 2 * tp + fp + fn
    per_class = np.full(cm.shape[0], np.nan)
    nz = denom > 0
    per_class[nz] = 2 * tp[nz] / denom[nz]
    per_class[~present] = np.nan
    include = present.copy()
    for c in ignore:
        include[c] = False
    mean = float(per_class[include].mean()) if include.any() else float("nan")
    return per_class, mean


def iou_scores(cm, ignore=(0,)):
    tp, fp, fn = _counts(cm)
    present = (tp + fp + fn) > 0
    denom = tp + fp + fn
    per_class = np.full(cm.shape[0], np.nan)
    nz = denom > 0
    per_class[nz] = tp[nz] / denom[nz]
    per_class[~present] = np.nan
    include = present.copy()
    for c in ignore:
        include[c] = False
    mean = float(per_class[include].mean()) if include.any() else float("nan")
    return per_class, mean


def miou(cm, ignore=(0,)):
    return iou_scores(cm, ignore)[1]


def boundary_band(labels, radius=2):
    """Pixels within ``radius`` (Chebyshev) of a ground-truth label edge."""
    band = extract_edges(labels)
    h, w = band.shape
    out = band.copy()
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(0, -dy), h - max(0, dy))
            xs = slice(max(0, -dx), w - max(0, dx))
            ys2 = slice(max(0, dy), h - max(0, -dy))
            xs2 = slice(max(0, dx), w - max(0, -dx))
            out[ys, xs] |= band[ys2, xs2]
    return out


# ---------------------------------------------------------------------------
# model accounting


@dataclasses.dataclass
class FlopsEstimate:
    gflops: float
    convention: str = FLOPS_CONVENTION


def flops_estimate(config, out_h, out_w, decode_mode=None):
    """Analytic forward-pass cost for one image at the given output size."""
    mode = decode_mode or config.decode_mode
    if mode not in ("ensemble", "bilinear"):
        raise ParameterError(f"flops_estimate: unknown decode mode {mode!r}")
    r = config.input_resolution
    d = config.base_width
    conv = lambda cin, cout, hw, k=3: 2.0 * k * k * cin * cout * hw

    total = conv(config.in_channels, d, r * r)  # stem
    res_hw = [r * r, (r // 2) ** 2, (r // 4) ** 2]
    for gi, blocks in enumerate(config.group_sizes):
        total += blocks * 2 * conv(d, d, res_hw[gi])
        if gi < 2:
            total += conv(d, d, res_hw[gi + 1])  # strided downsampling conv

    h = (r // 4) ** 2
    r0, r1 = config.rcmlp_dims
    total += 2.0 * (9 * d) * r0 * h + 2.0 * r0 * r1 * h

    head_site = 2.0 * (
        config.head_in * config.head_width
        + (config.head_depth - 1) * config.head_width**2
        + config.head_width * config.num_classes
    )
    passes = 4 if mode == "ensemble" else 1
    total += passes * head_site * out_h * out_w
    return FlopsEstimate(gflops=total / 1e9)


@dataclasses.dataclass
class BenchResult:
    fps: float
    median_seconds: float
    iteration_seconds: list
    input_res: int
    out_res: int
    host: dict


def host_descriptor(threads=None):
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "system": platform.system(),
        "cpu_count": os.cpu_count(),
        "threads": threads or os.cpu_count(),
        "precision": np.dtype(nx.default_dtype()).name,
    }


def fps_benchmark(model, input_res=None, out_res=None, warmup=2, iters=5, seed=0):
    """Median single-image throughput of forward() after warmup iterations."""
    from . import model as mo

    if iters < 1:
        raise ParameterError(f"fps_benchmark: iters must be >= 1, got {iters}")
    input_res = input_res or model.config.input_resolution
    out_res = out_res or input_res
    rng = np.random.default_rng(seed)
    image = nx.tensor(rng.random((1, model.config.in_channels, input_res, input_res)))
    times = []
    with nx.no_grad():
        for _ in range(warmup):
            mo.forward(model, image, out_res, out_res)
        for _ in range(iters):
            t0 = time.perf_counter()
            mo.forward(model, image, out_res, out_res)
            times.append(time.perf_counter() - t0)
    median = float(np.median(times))
    return BenchResult(
        fps=1.0 / median,
        median_seconds=median,
        iteration_seconds=times,
        input_res=input_res,
        out_res=out_res,
        host=host_descriptor(),
    )


def multi_seed_report(run_fn, seeds):
    """Sample mean and SD of every scalar metric returned by ``run_fn(seed)``."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ParameterError(f"multi_seed_report: need >= 2 seeds, got {len(seeds)}")
    runs = [run_fn(s) for s in seeds]
    keys = runs[0].keys()
    out = {}
    for k in keys:
        vals = np.array([float(r[k]) for r in runs])
        out[k] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1))}
    return out


# ---------------------------------------------------------------------------
# reporting


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [None if np.isnan(v) else float(v) for v in x]
    return x


@dataclasses.dataclass
class MetricsReport:
    per_class_f1: list
    mean_f1: float
    per_class_iou: list
    mean_iou: float
    params: int | None = None
    gflops: float | None = None
    flops_convention: str | None = None
    fps: float | None = None
    multi_seed: dict | None = None

    @classmethod
    def from_confusion(cls, cm, ignore=(0,), **extra):
        f1, mean_f1 = f1_scores(cm, ignore)
        iou, mean_iou = iou_scores(cm, ignore)
        return cls(
            per_class_f1=_jsonable(f1),
            mean_f1=mean_f1,
            per_class_iou=_jsonable(iou),
            mean_iou=mean_iou,
            **extra,
        )

    def to_json(self, indent=2):
        return json.dumps(dataclasses.asdict(self), indent=indent)
