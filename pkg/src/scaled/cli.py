"""Command-line front end: prepare, train, sweep, report, verify."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import evaluate as ev
from .codec import CodecConfig, CodecError, CodecUnavailable, DECODER_ENV, ENCODER_ENV, encoder_version, \
    resolve_executable
from .config import ConfigError, RunConfig, check_paths, dump_config, load_config
from .media import MediaError, SequenceSource, extract_patches, read_frames, simulate_chroma_degradation, to_444
from .train import TrainConfig, TrainingError, cell_name, save_checkpoint, train_model

logger = logging.getLogger("scaled")

EXIT_OK, EXIT_USAGE, EXIT_JOB, EXIT_VERIFY = 0, 1, 2, 3


class JobFailure(RuntimeError):
    pass


def atomic_write(path: Path, data, mode: str = "w") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def codec_base(cfg: RunConfig) -> Optional[CodecConfig]:
    if cfg.codec is None:
        return None
    c = cfg.codec
    qp = 32 if c.backend == "external" else None
    qstep = None if c.backend == "external" else 1.0
    return CodecConfig(backend=c.backend, qp=qp, qstep=qstep, preset=c.preset, encoder=c.encoder,
                       decoder=c.decoder, extra_flags=list(c.extra_flags), keyint=c.keyint, threads=c.threads,
                       fps=c.fps, tmp_dir=c.tmp_dir)


def codec_provenance(cfg: RunConfig) -> Dict[str, str]:
    if cfg.codec is None:
        return {"backend": "none"}
    if cfg.codec.backend == "toy":
        return {"backend": "toy"}
    try:
        enc = resolve_executable(cfg.codec.encoder, ENCODER_ENV)
        return {"backend": "external", "encoder": enc, "encoder_version": encoder_version(enc)}
    except CodecUnavailable as exc:
        return {"backend": "external", "error": str(exc)}


def write_provenance(out: Path, command: str, cfg: RunConfig) -> None:
    doc = {"command": command, "config": json.loads(json.dumps(dump_config_dict(cfg))),
           "codec": codec_provenance(cfg)}
    atomic_write(out / f"{command}.provenance.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def dump_config_dict(cfg: RunConfig) -> dict:
    import dataclasses

    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def load_source(src) -> List:
    seq = SequenceSource(src.path, src.width, src.height, None, src.layout)
    return read_frames(seq, 0, src.frames)


def cmd_prepare(cfg: RunConfig, out: Path) -> dict:
    check_paths(cfg.dataset.sources, "dataset.sources")
    if not cfg.dataset.sources:
        raise ConfigError("dataset.sources is empty")
    patches, sources = [], []
    for i, src in enumerate(cfg.dataset.sources):
        frames = load_source(src)
        if not frames:
            raise MediaError(f"no frames in {src.path}")
        dims = {(f.height, f.width) for f in frames}
        if len(dims) != 1:
            raise MediaError(f"inconsistent frame dimensions in {src.path}")
        if frames[0].chroma_layout == "444":
            frames = [simulate_chroma_degradation(f) for f in frames]
        else:
            frames = [to_444(f) for f in frames]
        patches.append(extract_patches(frames, cfg.dataset.patch, cfg.dataset.stride, seed=cfg.seed + i))
        sources.append({"path": str(src.path), "sha256": sha256_file(src.path), "frames": len(frames),
                        "layout": src.layout})
    allp = np.concatenate(patches)
    order = np.random.Generator(np.random.Philox(cfg.seed)).permutation(len(allp))
    allp = allp[order]
    n_hold = int(round(len(allp) * cfg.dataset.holdout_fraction))
    if n_hold >= len(allp):
        n_hold = len(allp) - 1
    train, hold = allp[n_hold:], allp[:n_hold]
    ds = out / "dataset"
    ds.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in (("train", train), ("holdout", hold)):
        path = ds / f"{name}.npy"
        fd, tmp = tempfile.mkstemp(dir=ds, suffix=".npy.tmp")
        with os.fdopen(fd, "wb") as fh:
            np.save(fh, np.ascontiguousarray(arr, dtype=np.float32))
        os.replace(tmp, path)
        files[name] = {"file": path.name, "count": int(len(arr)), "sha256": sha256_file(path)}
    manifest = {"version": 1, "patch": cfg.dataset.patch, "stride": cfg.dataset.stride, "seed": cfg.seed,
                "patches": int(len(allp)), "sources": sources, **files}
    atomic_write(ds / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    logger.info("prepared %d patches (%d train, %d holdout)", len(allp), len(train), len(hold))
    return manifest


def load_dataset(out: Path):
    ds = out / "dataset"
    mpath = ds / "manifest.json"
    if not mpath.is_file():
        raise ConfigError(f"no dataset manifest at {mpath}; run `prepare` first")
    manifest = json.loads(mpath.read_text())
    train = np.load(ds / manifest["train"]["file"])
    hold = np.load(ds / manifest["holdout"]["file"]) if manifest["holdout"]["count"] else None
    return train, hold


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def train_cells(cfg: RunConfig) -> List[TrainConfig]:
    t = cfg.train
    base = codec_base(cfg)
    cells = []
    for strategy in t.strategies:
        for scale in t.scales:
            for qp in t.qps:
                lams = t.lambdas if strategy == "scaled-rd" else [0.0]
                for lam in lams:
                    cells.append(TrainConfig(
                        strategy=strategy, scale=scale, qp=qp, lam=lam, epochs=t.epochs, steps=t.steps, lr=t.lr,
                        beta1=t.beta1, beta2=t.beta2, batch_size=t.batch_size, seed=cfg.seed,
                        hidden_channels=t.hidden_channels, slope=t.slope, sigma_scope=t.sigma_scope,
                        sigma_floor=t.sigma_floor, tau=t.tau, eval_every=t.eval_every,
                        codec=base.with_qp(qp) if base is not None else None))
    return cells


def _run_cell(args):
    tc, out, train, hold = args
    name = cell_name(tc)
    ckpt = out / "checkpoints" / f"{name}.ckpt"
    if ckpt.exists():
        return name, "skipped", None
    log = out / "logs" / f"{name}.csv"
    log.parent.mkdir(parents=True, exist_ok=True)
    if log.exists():
        log.unlink()
    try:
        if tc.needs_codec:
            if tc.codec is None:
                raise CodecError(f"strategy {tc.strategy} needs a codec section in the config")
            if tc.codec.backend == "external":
                resolve_executable(tc.codec.encoder, ENCODER_ENV)
                resolve_executable(tc.codec.decoder, DECODER_ENV)
        ck = train_model(tc, train, hold, log_path=log)
    except (TrainingError, CodecError, ValueError) as exc:
        return name, "failed", str(exc)
    save_checkpoint(ck, ckpt)
    return name, "trained", None


def cmd_train(cfg: RunConfig, out: Path) -> int:
    train, hold = load_dataset(out)
    cells = train_cells(cfg)
    jobs = [(c, out, train, hold) for c in cells]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    failed = 0
    for name, status, err in results:
        if status == "failed":
            failed += 1
            logger.error("cell %s failed: %s", name, err)
        else:
            logger.info("cell %s %s", name, status)
    return EXIT_JOB if failed else EXIT_OK


# ---------------------------------------------------------------------------
# sweep / report
# ---------------------------------------------------------------------------


def sweep_sequences(cfg: RunConfig) -> List[ev.SequenceData]:
    check_paths(cfg.sweep.sequences, "sweep.sequences")
    return [ev.SequenceData(src.label, [to_444(f) for f in load_source(src)], src.dataset)
            for src in cfg.sweep.sequences]


def learned_checkpoints(out: Path, strategy: str) -> Dict:
    found = {}
    for path in sorted((out / "checkpoints").glob(f"{strategy}_s*.ckpt")):
        parts = path.stem.split("_")
        scale = parts[1][1:].replace("-", "/")
        qp = int(parts[2][2:]) if parts[2].startswith("qp") else 0
        found.setdefault((scale, qp), path)
    return found


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    base = codec_base(cfg)
    if base is None:
        raise ConfigError("sweep needs a codec section")
    seqs = sweep_sequences(cfg)
    if not seqs:
        raise ConfigError("sweep.sequences is empty")
    runs = []
    for f in cfg.sweep.filters:
        if f == "learned":
            for strat in cfg.sweep.learned_strategies:
                cks = learned_checkpoints(out, strat)
                if not cks:
                    raise ConfigError(f"no checkpoints for strategy {strat!r} under {out / 'checkpoints'}")
                runs.append(("progdownlite", strat, ev.learned_filter(cks)))
        else:
            runs.append((f, "", ev.fixed_filter(f)))
    points, failures, timing = [], [], []
    for name, strat, fn in runs:
        t0 = time.perf_counter()
        pts = ev.rd_sweep(seqs, name, fn, cfg.sweep.scales, cfg.sweep.qps, base, strategy=strat,
                          jobs=cfg.jobs, failures=failures)
        timing.append((name, strat, len(pts), time.perf_counter() - t0))
        points.extend(pts)
    sweep_dir = out / "sweep"
    atomic_write(sweep_dir / "rd_results.csv", ev.rd_csv_text(points))
    atomic_write(sweep_dir / "timing.csv", "filter,strategy,points,seconds\n"
                 + "".join(f"{n},{s},{k},{t:.3f}\n" for n, s, k, t in timing))
    atomic_write(sweep_dir / "failures.json", json.dumps(failures, indent=1) + "\n")
    return EXIT_JOB if failures else EXIT_OK


def cmd_report(cfg: RunConfig, out: Path) -> int:
    path = out / "sweep" / "rd_results.csv"
    if not path.is_file():
        raise ConfigError(f"no sweep results at {path}; run `sweep` first")
    points = ev.read_rd_csv(path)
    ref = [p for p in points if p.filter == cfg.report.reference]
    if not ref:
        raise JobFailure(f"missing reference sweep for filter {cfg.report.reference!r}")
    tests = [p for p in points if p.filter != cfg.report.reference]
    datasets = {s.label: s.dataset for s in cfg.sweep.sequences}
    rows = ev.bd_rows(ref, tests, cfg.report.metrics, datasets)
    table = ev.report_table(rows)
    rep = out / "report"
    atomic_write(rep / "bd_br.csv", ev.table_csv(table))
    atomic_write(rep / "bd_br.txt", ev.table_text(table))
    per_seq = "dataset,sequence,filter,strategy,metric,bd_br\n" + "".join(
        f"{r.dataset},{r.sequence},{r.filter},{r.strategy},{r.metric},{r.bd_br!r}\n" for r in rows)
    atomic_write(rep / "bd_br_per_sequence.csv", per_seq)
    by_seq: Dict[str, List] = {}
    for p in points:
        by_seq.setdefault(p.sequence, []).append(p)
    for seq, pts in sorted(by_seq.items()):
        for m in cfg.report.metrics:
            atomic_write(rep / "curves" / f"{seq}.{m}.csv", ev.curve_csv(pts, m))
    print(ev.table_text(table), end="")
    return EXIT_OK


def cmd_verify(quick: bool = False) -> int:
    from .verify import run_all

    results = run_all(quick=quick)
    for r in results:
        print(f"[{'PASS' if r.ok else 'FAIL'}] {r.name}: {r.detail}")
    ok = all(r.ok for r in results)
    print(f"verify: {sum(r.ok for r in results)}/{len(results)} suites passed")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--jobs", type=int, help="worker pool size")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="scaled", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="extract training patches and write a manifest")
    sub.add_parser("train", parents=[common], help="train one downsampler per grid cell")
    sub.add_parser("sweep", parents=[common], help="run the multi-scale / multi-QP rate-distortion sweep")
    sub.add_parser("report", parents=[common], help="convex hulls and BD-BR tables against the reference filter")
    p = sub.add_parser("verify", parents=[common], help="run the embedded property suites")
    p.add_argument("--quick", action="store_true", help="fewer random instances per suite")
    return parser


def resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg.jobs = args.jobs
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.print_config:
            print(dump_config(cfg), end="")
            return EXIT_OK
        if args.command == "verify":
            return cmd_verify(args.quick)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_provenance(out, args.command, cfg)
        if args.command == "prepare":
            cmd_prepare(cfg, out)
            return EXIT_OK
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out)
        return cmd_report(cfg, out)
    except (ConfigError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (JobFailure, MediaError, CodecError, TrainingError, ev.SweepError) as exc:
        logger.error("%s", exc)
        return EXIT_JOB


if __name__ == "__main__":
    sys.exit(main())
