"""Quality metrics, rate-distortion sweeps, convex hulls and BD-BR."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import PchipInterpolator

from .codec import CodecConfig, CodecError, encode_decode
from .frame import FramePlanar
from .media import to_444
from .resample import format_scale, parse_scale, resize_frame, target_dims

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
PLANE_WEIGHTS = (6.0, 1.0, 1.0)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
QUALITY_FIELDS = ("psnr_y", "psnr_weighted", "ssim_y")


class SweepError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _check_dims(a: FramePlanar, b: FramePlanar):
    if (a.height, a.width, a.chroma_layout) != (b.height, b.width, b.chroma_layout):
        raise ValueError(f"frame mismatch: {a.width}x{a.height} {a.chroma_layout} vs "
                         f"{b.width}x{b.height} {b.chroma_layout}")


def plane_mse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def mse_to_psnr(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(a: FramePlanar, b: FramePlanar, plane: str = "y") -> float:
    """PSNR on [0,1] samples. ``plane`` is y, u, v or weighted (6:1:1 MSE average)."""
    _check_dims(a, b)
    if plane == "weighted":
        mses = [plane_mse(p, q) for p, q in zip(a.planes, b.planes)]
        return mse_to_psnr(sum(w * m for w, m in zip(PLANE_WEIGHTS, mses)) / sum(PLANE_WEIGHTS))
    idx = "yuv".index(plane)
    return mse_to_psnr(plane_mse(a.planes[idx], b.planes[idx]))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_plane(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("ssim inputs differ in shape")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    w = gaussian_window()
    r = SSIM_WINDOW // 2

    def filt(a):
        return ndimage.correlate(a, w, mode="constant")[r:-r, r:-r]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a: FramePlanar, b: FramePlanar) -> float:
    _check_dims(a, b)
    return ssim_plane(a.y, b.y)


# ---------------------------------------------------------------------------
# RD points, hulls, BD-BR
# ---------------------------------------------------------------------------


@dataclass
class RDPoint:
    rate_bpp: float
    psnr_y: float = 0.0
    psnr_weighted: float = 0.0
    ssim_y: float = 0.0
    psnr_u: float = 0.0
    psnr_v: float = 0.0
    scale: str = "1/1"
    qp: int = 0
    bits: int = 0
    sequence: str = ""
    filter: str = ""
    strategy: str = ""
    extra: Dict[str, float] = field(default_factory=dict)

    def quality(self, name: str) -> float:
        if hasattr(self, name) and name != "extra":
            return float(getattr(self, name))
        return float(self.extra[name])


CSV_COLUMNS = ("sequence", "filter", "strategy", "scale", "qp", "bits", "rate_bpp",
               "psnr_y", "psnr_u", "psnr_v", "psnr_weighted", "ssim_y")


@dataclass
class ConvexHull:
    points: List[RDPoint]
    quality_field: str = "psnr_y"

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate_bpp for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality(self.quality_field) for p in self.points])

    def __len__(self) -> int:
        return len(self.points)


def _cross(a, p, b) -> float:
    """Positive when p lies strictly below the segment a-b in (rate, quality)."""
    return (b[1] - a[1]) * (p[0] - a[0]) - (p[1] - a[1]) * (b[0] - a[0])


def pareto_indices(rates: Sequence[float], qualities: Sequence[float]) -> List[int]:
    """Indices of points not dominated in (lower rate, higher quality), by ascending rate.

    Exact duplicates keep their first occurrence.
    """
    order = sorted(range(len(rates)), key=lambda i: (rates[i], -qualities[i], i))
    keep, best = [], -math.inf
    for i in order:
        if qualities[i] > best:
            keep.append(i)
            best = qualities[i]
    return keep


def hull_indices(rates: Sequence[float], qualities: Sequence[float]) -> List[int]:
    """Upper convex hull (monotone chain) of the Pareto front; collinear points retained."""
    if len(rates) == 0:
        raise ValueError("convex hull of an empty point set")
    front = pareto_indices(rates, qualities)
    stack: List[int] = []
    for i in front:
        p = (rates[i], qualities[i])
        while len(stack) >= 2:
            a = (rates[stack[-2]], qualities[stack[-2]])
            m = (rates[stack[-1]], qualities[stack[-1]])
            if _cross(a, m, p) > 0:
                stack.pop()
            else:
                break
        stack.append(i)
    return stack


def convex_hull(points: Sequence[RDPoint], quality_field: str = "psnr_y") -> ConvexHull:
    if not points:
        raise ValueError("convex hull of an empty point set")
    rates = [p.rate_bpp for p in points]
    quals = [p.quality(quality_field) for p in points]
    return ConvexHull([points[i] for i in hull_indices(rates, quals)], quality_field)


def bd_br(reference: ConvexHull, test: ConvexHull, quality_field: Optional[str] = None) -> float:
    """Average rate difference (percent) of ``test`` vs ``reference`` at equal quality.

    log10(rate) is interpolated as a piecewise-cubic Hermite (PCHIP) function of
    quality on each hull and integrated exactly over the common quality range.
    Negative values mean ``test`` needs fewer bits.
    """
    qf = quality_field or reference.quality_field
    curves = []
    for hull in (reference, test):
        if len(hull) < 4:
            raise ValueError(f"BD-BR needs at least 4 hull points, got {len(hull)}")
        q = np.array([p.quality(qf) for p in hull.points], dtype=np.float64)
        r = np.log10(np.array([p.rate_bpp for p in hull.points], dtype=np.float64))
        order = np.argsort(q, kind="stable")
        q, r = q[order], r[order]
        if np.any(np.diff(q) <= 0):
            raise ValueError("hull qualities must be strictly increasing")
        curves.append((q, PchipInterpolator(q, r)))
    lo = max(curves[0][0][0], curves[1][0][0])
    hi = min(curves[0][0][-1], curves[1][0][-1])
    if not hi > lo:
        raise ValueError("hulls have no overlapping quality range")
    ref_int = curves[0][1].integrate(lo, hi)
    test_int = curves[1][1].integrate(lo, hi)
    return float((10.0 ** ((test_int - ref_int) / (hi - lo)) - 1.0) * 100.0)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass
class SequenceData:
    name: str
    frames: List[FramePlanar]
    dataset: str = ""


FilterFn = Callable[[List[FramePlanar], Fraction, int], List[FramePlanar]]


def fixed_filter(kernel: str) -> FilterFn:
    def run(frames, s, qp):
        th, tw = target_dims(frames[0].height, frames[0].width, s)
        return [resize_frame(f, th, tw, kernel) for f in frames]

    run.__name__ = kernel
    return run


def learned_filter(checkpoints: Mapping[Tuple[str, int], object]) -> FilterFn:
    """Downsampler picking the checkpoint trained for (scale, qp), else the nearest qp at that scale.

    Scale 1 is the full-resolution rung shared by every filter and passes through untouched.
    """
    from .train import downsample, load_checkpoint

    cache: Dict[Tuple[str, int], object] = {}

    def lookup(scale: str, qp: int):
        cands = [k for k in checkpoints if k[0] == scale]
        if not cands:
            raise SweepError(f"no learned checkpoint for scale {scale}")
        key = min(cands, key=lambda k: (abs(k[1] - qp), k[1]))
        if key not in cache:
            ck = checkpoints[key]
            cache[key] = load_checkpoint(ck) if isinstance(ck, (str, Path)) else ck
        return cache[key]

    def run(frames, s, qp):
        if parse_scale(s) == 1:
            return [to_444(f) for f in frames]
        ck = lookup(format_scale(s), qp)
        slope = ck.config.get("slope", 0.1)
        x = np.stack([to_444(f).to_array(np.float32) for f in frames])
        y = downsample(ck.params, x, s, slope)
        return [FramePlanar.from_array(np.clip(v.astype(np.float64), 0.0, 1.0)) for v in y]

    return run


def frames_metrics(ref: Sequence[FramePlanar], out: Sequence[FramePlanar]) -> Dict[str, float]:
    """Per-frame metrics averaged over the sequence."""
    acc = {k: [] for k in ("psnr_y", "psnr_u", "psnr_v", "psnr_weighted", "ssim_y")}
    for a, b in zip(ref, out):
        acc["psnr_y"].append(psnr(a, b, "y"))
        acc["psnr_u"].append(psnr(a, b, "u"))
        acc["psnr_v"].append(psnr(a, b, "v"))
        acc["psnr_weighted"].append(psnr(a, b, "weighted"))
        acc["ssim_y"].append(ssim(a, b))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def sweep_point(seq: SequenceData, filter_name: str, strategy: str, fn: FilterFn, s: Fraction, qp: int,
                codec: CodecConfig, downsampled: Optional[List[FramePlanar]] = None) -> RDPoint:
    src = [to_444(f) for f in seq.frames]
    low = downsampled if downsampled is not None else fn(src, s, qp)
    res = encode_decode(low, codec.with_qp(qp))
    h, w = src[0].height, src[0].width
    up = [resize_frame(to_444(f), h, w, "bicubic") for f in res.recon]
    metrics = frames_metrics(src, up)
    rate = res.bits / (h * w * len(src))
    return RDPoint(rate_bpp=rate, scale=format_scale(s), qp=int(qp), bits=int(res.bits),
                   sequence=seq.name, filter=filter_name, strategy=strategy, **metrics)


def rd_sweep(sequences: Sequence[SequenceData], filter_name: str, fn: FilterFn, scales: Iterable, qps: Iterable[int],
             codec: CodecConfig, strategy: str = "", jobs: int = 1,
             failures: Optional[list] = None) -> List[RDPoint]:
    """Downsample, code, upsample and measure every (sequence, scale, qp) triple.

    Codec failures are logged and appended to ``failures``; the sweep continues.
    Results come back in (sequence, scale, qp) order regardless of ``jobs``.
    """
    scales = [parse_scale(s) for s in scales]
    qps = [int(q) for q in qps]
    per_qp = getattr(fn, "__name__", "") not in ("lanczos", "bicubic", "bilinear")
    tasks = []
    for seq in sequences:
        src = [to_444(f) for f in seq.frames]
        for s in scales:
            shared = None if per_qp else fn(src, s, qps[0] if qps else 0)
            for qp in qps:
                tasks.append((seq, s, qp, shared))

    def run(task):
        seq, s, qp, shared = task
        try:
            return sweep_point(seq, filter_name, strategy, fn, s, qp, codec, shared)
        except (CodecError, SweepError, OSError) as exc:
            logger.error("sweep point failed (%s, %s, qp %d): %s", seq.name, format_scale(s), qp, exc)
            if failures is not None:
                failures.append((seq.name, format_scale(s), qp, str(exc)))
            return None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    return [r for r in results if r is not None]


# ---------------------------------------------------------------------------
# CSV I/O and reporting
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rd_csv_text(points: Sequence[RDPoint]) -> str:
    extra_keys = sorted({k for p in points for k in p.extra})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(CSV_COLUMNS) + extra_keys)
    for p in points:
        w.writerow([_fmt(getattr(p, c)) for c in CSV_COLUMNS] + [_fmt(p.extra.get(k, "")) for k in extra_keys])
    return buf.getvalue()


def read_rd_csv(path) -> List[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    points = []
    for r in rows:
        extra = {k: float(v) for k, v in r.items() if k not in CSV_COLUMNS and v not in ("", None)}
        points.append(RDPoint(
            rate_bpp=float(r["rate_bpp"]), psnr_y=float(r["psnr_y"]), psnr_weighted=float(r["psnr_weighted"]),
            ssim_y=float(r["ssim_y"]), psnr_u=float(r["psnr_u"]), psnr_v=float(r["psnr_v"]), scale=r["scale"],
            qp=int(r["qp"]), bits=int(r["bits"]), sequence=r["sequence"], filter=r["filter"],
            strategy=r["strategy"], extra=extra))
    return points


def import_external_scores(points: Sequence[RDPoint], path, field_name: str) -> int:
    """Merge externally computed scores (e.g. VMAF) into matching points' ``extra``.

    The CSV needs columns sequence, filter, strategy, scale, qp and ``field_name``.
    Returns the number of points updated.
    """
    with open(path, newline="") as fh:
        table = {(r["sequence"], r["filter"], r.get("strategy", ""), r["scale"], int(r["qp"])): float(r[field_name])
                 for r in csv.DictReader(fh)}
    n = 0
    for p in points:
        key = (p.sequence, p.filter, p.strategy, p.scale, p.qp)
        if key in table:
            p.extra[field_name] = table[key]
            n += 1
    return n


@dataclass
class BDRow:
    dataset: str
    sequence: str
    filter: str
    strategy: str
    metric: str
    bd_br: float


def bd_rows(reference: Sequence[RDPoint], tests: Sequence[RDPoint], metrics=QUALITY_FIELDS,
            datasets: Optional[Mapping[str, str]] = None) -> List[BDRow]:
    """BD-BR of every (sequence, filter, strategy) group in ``tests`` against the reference hull.

    Groups whose hulls are too short or do not overlap get NaN and a warning.
    """
    datasets = datasets or {}
    ref_by_seq: Dict[str, List[RDPoint]] = {}
    for p in reference:
        ref_by_seq.setdefault(p.sequence, []).append(p)
    groups: Dict[Tuple[str, str, str], List[RDPoint]] = {}
    for p in tests:
        groups.setdefault((p.sequence, p.filter, p.strategy), []).append(p)
    rows = []
    for (seq, filt, strat), pts in sorted(groups.items()):
        if seq not in ref_by_seq:
            raise SweepError(f"no reference sweep for sequence {seq!r}")
        for m in metrics:
            try:
                value = bd_br(convex_hull(ref_by_seq[seq], m), convex_hull(pts, m), m)
            except ValueError as exc:
                logger.warning("BD-BR undefined for %s / %s %s / %s: %s", seq, filt, strat, m, exc)
                value = float("nan")
            rows.append(BDRow(datasets.get(seq, "default"), seq, filt, strat, m, value))
    return rows


def report_table(rows: Sequence[BDRow]) -> List[Dict]:
    """Per-dataset mean BD-BR for every (filter, strategy, metric)."""
    acc: Dict[Tuple[str, str, str, str], List[float]] = {}
    for r in rows:
        acc.setdefault((r.dataset, r.filter, r.strategy, r.metric), []).append(r.bd_br)
    return [{"dataset": k[0], "filter": k[1], "strategy": k[2], "metric": k[3],
             "bd_br": float(np.mean(v)), "sequences": len(v)} for k, v in sorted(acc.items())]


def table_csv(table: Sequence[Dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "filter", "strategy", "metric", "bd_br", "sequences"])
    for r in table:
        w.writerow([r["dataset"], r["filter"], r["strategy"], r["metric"], repr(r["bd_br"]), r["sequences"]])
    return buf.getvalue()


def _fmt_pct(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:+.2f}"


def table_text(table: Sequence[Dict]) -> str:
    """Aligned text: one row per (dataset, filter, strategy), one column per metric."""
    metrics = sorted({r["metric"] for r in table}, key=lambda m: (QUALITY_FIELDS + (m,)).index(m))
    keyed: Dict[Tuple[str, str, str], Dict[str, float]] = {}
    for r in table:
        keyed.setdefault((r["dataset"], r["filter"], r["strategy"]), {})[r["metric"]] = r["bd_br"]
    header = ["dataset", "filter", "strategy"] + [f"BD-BR {m} (%)" for m in metrics]
    body = [[k[0], k[1], k[2] or "-"] + [_fmt_pct(v.get(m, float("nan"))) for m in metrics]
            for k, v in sorted(keyed.items())]
    widths = [max(len(str(row[i])) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


def curve_csv(points: Sequence[RDPoint], quality_field: str = "psnr_y") -> str:
    """All points of one sequence with a per-filter on-hull flag, for plotting."""
    groups: Dict[Tuple[str, str], List[RDPoint]] = {}
    for p in points:
        groups.setdefault((p.filter, p.strategy), []).append(p)
    hull = {id(p) for g in groups.values() for p in convex_hull(g, quality_field).points}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["filter", "strategy", "scale", "qp", "rate_bpp", quality_field, "on_hull"])
    for p in sorted(points, key=lambda p: (p.filter, p.strategy, p.rate_bpp)):
        w.writerow([p.filter, p.strategy, p.scale, p.qp, repr(p.rate_bpp), repr(p.quality(quality_field)),
                    int(id(p) in hull)])
    return buf.getvalue()
