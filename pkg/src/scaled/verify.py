"""Embedded property suites run by ``scaled verify``. Toy backend only, no external tools needed."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import tensor as T
from .codec import toy_code_plane, toy_encode_decode
from .evaluate import RDPoint, bd_br, convex_hull, hull_indices
from .frame import FramePlanar
from .model import forward, init_params
from .rateproxy import block_dct2d, soft_l0
from .resample import bicubic_upsample, bilinear_downsample, resize_tensor
from .surrogate import closed_form_vjp, scaled_apply

JACOBIAN_TOL = 1e-6
GRADCHECK_TOL = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class SuiteResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple]) -> SuiteResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing suite is a failing suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return SuiteResult(name, bool(ok), detail, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# surrogate Jacobian
# ---------------------------------------------------------------------------


def jacobian_instance(rng: np.random.Generator, n: int):
    """Random 1-D signal y and its toy-codec reconstruction, laid out as an 8-wide plane."""
    while True:
        side = max(n // 8, 1)
        plane = rng.uniform(0.2, 0.8, size=(side, n // side))
        qstep = rng.uniform(0.02, 0.2)
        recon, _, _ = toy_code_plane(plane, qstep)
        eps = recon - plane
        if eps.std() > 1e-9:
            return plane.reshape(-1), recon.reshape(-1)


def jacobian_error(y: np.ndarray, recon: np.ndarray, g: np.ndarray,
                   closed_form: Callable[[np.ndarray, np.ndarray], np.ndarray] = closed_form_vjp) -> float:
    tape = T.vjp(lambda t: scaled_apply(t, recon), [T.Tensor(y, dtype=np.float64)], g)[0]
    return T.relative_error(tape, closed_form(recon - y, g))


def jacobian_suite(instances: int = 100, closed_form=closed_form_vjp, seed: int = 0):
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    sizes = (4, 16, 64, 256)
    for k in range(instances):
        n = sizes[k % len(sizes)]
        y, recon = jacobian_instance(rng, n)
        g = rng.standard_normal(n)
        worst = max(worst, jacobian_error(y, recon, g, closed_form))
    return worst < JACOBIAN_TOL, f"{instances} instances, worst rel. error {worst:.2e}"


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def kink_free_model_instance(rng: np.random.Generator, margin: float = KINK_MARGIN):
    """Draw model parameters and an input whose pre-activations all stay ``margin`` away from zero.

    Central differences across a leaky-ReLU kink measure a secant, not a gradient,
    so instances that sit that close to a kink are redrawn.
    """
    while True:
        params = init_params(int(rng.integers(1 << 30)), hidden_channels=4, dtype=np.float64)
        x = rng.uniform(0, 1, (1, 3, 8, 8))
        trace: list = []
        forward(T.Tensor(x), params, "1/2", trace=trace)
        if min(float(np.abs(a).min()) for a in trace) > margin:
            return params, x


def gradcheck_cases(rng: np.random.Generator):
    """Yield (name, fn, inputs) for one random instance of every differentiable primitive."""
    w = rng.standard_normal((3, 2, 3, 3))
    proj = rng.standard_normal((1, 3, 6, 6))
    yield "conv2d", lambda x, w_, b: T.mean(T.mul(T.conv2d(x, w_, b, padding=1), proj)), \
        [rng.standard_normal((1, 2, 6, 6)), w, rng.standard_normal(3)]
    c = rng.standard_normal((2, 5))
    yield "leaky_relu", lambda x: T.tensor_sum(T.mul(T.leaky_relu(x, 0.1), c)), \
        [rng.standard_normal((2, 5)) + np.sign(rng.standard_normal((2, 5))) * 0.05]
    yield "mse", lambda a, b: T.mse(a, b), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]
    c2 = rng.standard_normal((2, 1, 1, 1))
    yield "std_dev", lambda x: T.tensor_sum(T.mul(T.std_dev(x, axis=(1, 2, 3)), c2)), \
        [rng.standard_normal((2, 3, 4, 4))]
    c3 = rng.standard_normal((1, 1, 4, 4))
    yield "bilinear_downsample", lambda x: T.tensor_sum(T.mul(bilinear_downsample(x, "1/2"), c3)), \
        [rng.standard_normal((1, 1, 8, 8))]
    c4 = rng.standard_normal((1, 1, 9, 9))
    yield "bicubic_upsample", lambda x: T.tensor_sum(T.mul(bicubic_upsample(x, 9, 9), c4)), \
        [rng.standard_normal((1, 1, 6, 6))]
    c5 = rng.standard_normal((1, 1, 4, 6))
    yield "lanczos", lambda x: T.tensor_sum(T.mul(resize_tensor(x, 4, 6, "lanczos"), c5)), \
        [rng.standard_normal((1, 1, 8, 12))]
    c6 = rng.standard_normal((1, 1, 16, 16))
    yield "block_dct", lambda x: T.tensor_sum(T.mul(block_dct2d(x), c6)), [rng.standard_normal((1, 1, 13, 16))]
    yield "soft_l0", lambda x: soft_l0(x, 0.3), [rng.standard_normal((1, 1, 8, 8)) * 0.3]
    params, x = kink_free_model_instance(rng)
    names = sorted(params)
    target = rng.uniform(0, 1, (1, 3, 4, 4))

    def model_loss(xt, *ws):
        return T.mse(forward(xt, dict(zip(names, ws)), "1/2"), T.Tensor(target))

    yield "model_loss", model_loss, [x] + [params[n].data for n in names]


def gradcheck_suite(instances: int = 20, seed: int = 0, max_entries: int = 24):
    rng = np.random.Generator(np.random.Philox(seed))
    worst = {}
    for _ in range(instances):
        for name, fn, inputs in gradcheck_cases(rng):
            err = T.gradcheck(fn, inputs, h=1e-5, max_entries=max_entries, rng=rng)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if not v < GRADCHECK_TOL}
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return not bad, f"{instances} instances each; worst: {summary}"


# ---------------------------------------------------------------------------
# hull / BD-BR
# ---------------------------------------------------------------------------


def brute_force_hull(rates, qualities) -> List[int]:
    """Reference hull: Pareto points that no pair of Pareto points strictly dominates from above.

    A point p survives if it is not dominated and, for every pair a, b of other
    non-dominated points with rate(a) < rate(p) < rate(b), p is not strictly
    below the chord a-b.
    """
    n = len(rates)
    pts = [(rates[i], qualities[i]) for i in range(n)]
    pareto = []
    for i in range(n):
        dominated = any(
            (pts[j][0] <= pts[i][0] and pts[j][1] >= pts[i][1] and pts[j] != pts[i]) or (pts[j] == pts[i] and j < i)
            for j in range(n) if j != i)
        if not dominated:
            pareto.append(i)
    keep = []
    for i in pareto:
        r, q = pts[i]
        below = False
        for a, b in itertools.permutations(pareto, 2):
            ra, qa = pts[a]
            rb, qb = pts[b]
            if ra < r < rb and (qb - qa) * (r - ra) - (q - qa) * (rb - ra) > 0:
                below = True
                break
        if not below:
            keep.append(i)
    return sorted(keep, key=lambda i: (rates[i], i))


def random_point_set(rng: np.random.Generator, max_points: int = 12):
    n = int(rng.integers(1, max_points + 1))
    # integer grid coordinates make ties and collinear triples common
    if rng.random() < 0.5:
        return list(rng.integers(0, 6, n).astype(float)), list(rng.integers(0, 6, n).astype(float))
    return list(rng.uniform(0, 1, n)), list(rng.uniform(0, 1, n))


def hull_suite(sets: int = 1000, seed: int = 0):
    rng = np.random.Generator(np.random.Philox(seed))
    for k in range(sets):
        r, q = random_point_set(rng)
        got, want = hull_indices(r, q), brute_force_hull(r, q)
        if got != want:
            return False, f"set {k}: monotone chain {got} != brute force {want} for rates={r} qualities={q}"
    return True, f"{sets} random sets match the brute-force oracle"


def synthetic_curve(rate_factor: float = 1.0) -> List[RDPoint]:
    rates = np.array([0.05, 0.1, 0.2, 0.4, 0.8, 1.6])
    psnr = 30 + 4 * np.log2(rates / 0.05)
    ssim = 1 - 0.3 * 2.0 ** (-(psnr - 30) / 4)
    return [RDPoint(rate_bpp=float(r * rate_factor), psnr_y=float(p), psnr_weighted=float(p) - 1, ssim_y=float(q))
            for r, p, q in zip(rates, psnr, ssim)]


def bdbr_suite():
    ref = convex_hull(synthetic_curve())
    cases = [("identical", 1.0, 0.0), ("x1.1", 1.1, 10.0), ("x0.5", 0.5, -50.0)]
    out, ok = [], True
    for name, factor, want in cases:
        got = bd_br(ref, convex_hull(synthetic_curve(factor)))
        ok &= abs(got - want) <= (1e-9 if want == 0 else 0.1)
        out.append(f"{name} {got:+.4f}%")
    return ok, ", ".join(out)


# ---------------------------------------------------------------------------
# codec determinism
# ---------------------------------------------------------------------------


def codec_determinism_suite(runs: int = 10, seed: int = 0):
    rng = np.random.Generator(np.random.Philox(seed))
    frames = [FramePlanar(*(rng.uniform(0, 1, (24, 40)) for _ in range(3))) for _ in range(2)]
    first = None
    for _ in range(runs):
        res = toy_encode_decode(frames, 0.05)
        blob = b"".join(p.tobytes() for f in res.recon for p in f.planes) + res.bits.to_bytes(8, "little")
        if first is None:
            first = blob
        elif blob != first:
            return False, "toy codec output differs between runs"
    return True, f"{runs} runs byte-identical"


def run_all(quick: bool = False) -> List[SuiteResult]:
    scale = 4 if quick else 1
    return [
        _timed("jacobian", lambda: jacobian_suite(max(100 // scale, 8))),
        _timed("gradcheck", lambda: gradcheck_suite(max(20 // scale, 2))),
        _timed("hull", lambda: hull_suite(1000 // scale)),
        _timed("bd-br", bdbr_suite),
        _timed("toy-codec", lambda: codec_determinism_suite(10 // (2 if quick else 1))),
    ]
