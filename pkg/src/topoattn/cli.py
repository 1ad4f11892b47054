"""Command-line entry point.

Exit codes: 0 success, 2 config/shape error, 3 data error, 4 numerical failure.
Set ``TOPOATTN_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, io, trainer, viz
from .attention import SUBLAYERS
from .errors import ConfigError, DataError, ShapeMismatch, TopoError, VocabMismatch
from .grid import make_grid

log = logging.getLogger("topoattn")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _load_config(path: str, seed: int | None) -> trainer.TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    # relative corpus paths resolve against the config file's directory
    for key in ("train_path", "test_path"):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str((p.parent / raw[key]).resolve())
    return trainer.TrainConfig.from_dict(raw)


def _write_heatmaps(out: Path, stem: str, grid: np.ndarray, preset: viz.Preset, title: str) -> list[Path]:
    pgm = out / f"{stem}.pgm"
    svg = out / f"{stem}.svg"
    io.atomic_write(pgm, viz.render_pgm(grid, preset))
    io.atomic_write(svg, viz.render_svg(grid, preset, title=title))
    return [pgm, svg]


def _dump_inputs(**stems) -> dict[str, Path]:
    out = {}
    for name, stem in stems.items():
        meta, blob = io._dump_paths(stem)
        out[f"{name}.json"] = meta
        out[f"{name}.bin"] = blob
    return out


def _input_digests(inputs: dict[str, Path]) -> dict[str, str]:
    return {k: io.file_digest(v) for k, v in sorted(inputs.items())}


def _finish(out: Path, command: str, params: dict, inputs: dict, outputs: list, seed, started) -> None:
    io.write_manifest(out / "manifest.json", command, params, inputs, outputs, seed, started)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_corpus(args) -> None:
    corpus = trainer.synthetic_corpus(args.n, seed=args.seed, kind=args.kind, min_len=args.min_len,
                                      max_len=args.max_len, n_class_words=args.n_class_words,
                                      n_partners=args.n_partners)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    trainer.write_corpus(corpus, args.out)


def cmd_train(args) -> None:
    started = time.time()
    config = _load_config(args.config, args.seed)
    out = Path(args.out)
    result = trainer.train(config)
    ckpt = out / "checkpoint.ckpt"
    io.save_checkpoint(ckpt, result.model, result.vocab, config)
    metrics = out / "metrics.csv"
    lines = ["epoch,loss,accuracy"] + [f"{h.epoch},{h.loss!r},{h.accuracy!r}" for h in result.history]
    io.atomic_write(metrics, ("\n".join(lines) + "\n").encode())
    inputs = {"train": Path(config.train_path), "test": Path(config.test_path)}
    _finish(out, "train", config.to_dict(), inputs, [ckpt, metrics], config.seed, started)
    print(f"final accuracy {result.final_accuracy:.4f}; checkpoint {ckpt}")


def cmd_sweep(args) -> None:
    started = time.time()
    config = _load_config(args.config, args.seed)
    out = Path(args.out)
    result = trainer.rf_sweep(config, _floats(args.r_sq), _floats(args.r_sr))
    table = out / "sweep.csv"
    io.atomic_write(table, result.to_csv().encode())
    fits = {k: (None if v is None else vars(v)) for k, v in result.fits.items()}
    report = out / "sweep.json"
    io.write_json(report, {"config": config.to_dict(), "fits": fits,
                           "cells": [vars(c) for c in result.cells]})
    inputs = {"train": Path(config.train_path), "test": Path(config.test_path)}
    _finish(out, "sweep", config.to_dict(), inputs, [table, report], config.seed, started)
    for name, fit in fits.items():
        print(name, "no fit (zero variance)" if fit is None else
              f"slope={fit['slope']:.4f} R2={fit['r2']:.4f} spearman={fit['spearman']:.4f}")


def cmd_capture(args) -> None:
    started = time.time()
    model, vocab, header = io.load_checkpoint(args.checkpoint)
    corpus = trainer.read_corpus(args.corpus, "probe")
    texts = corpus.texts[: args.limit] if args.limit else corpus.texts
    unk = vocab.unk_fraction(texts)
    if unk > args.unk_threshold:
        msg = f"{unk:.0%} of corpus tokens are out of vocabulary"
        if args.strict_vocab:
            raise VocabMismatch(msg)
        log.warning(msg)
    caps = trainer.capture_activations(model, vocab, texts)
    digest = io.file_digest(args.checkpoint)
    names = SUBLAYERS if args.sublayer == "all" else (args.sublayer,)
    out = Path(args.out)
    outputs = []
    for name in names:
        dump = io.ActivationDump(caps.get(name, args.layer), name, args.layer, digest,
                                 int((header.get("train_config") or {}).get("seed", 0)))
        outputs.extend(io.write_dump(out / f"layer{args.layer}_{name}", dump))
    _finish(out, "capture", {"sublayer": args.sublayer, "layer": args.layer, "limit": args.limit},
            {"checkpoint": Path(args.checkpoint), "corpus": Path(args.corpus)}, outputs, None, started)


def _labels_from_corpus(path: str, n: int) -> np.ndarray:
    labels = trainer.read_corpus(path, "labels").labels
    if labels.size < n:
        raise ShapeMismatch(f"corpus has {labels.size} labels for {n} dump rows")
    return labels[:n]


def _grid_side(d: int) -> int:
    return make_grid(d).side


def cmd_selectivity(args) -> None:
    started = time.time()
    out = Path(args.out)
    if args.a and args.b:
        a, b = io.read_dump(args.a).matrix, io.read_dump(args.b).matrix
        inputs = _dump_inputs(a=args.a, b=args.b)
    elif args.dump and args.corpus:
        x = io.read_dump(args.dump).matrix
        labels = _labels_from_corpus(args.corpus, x.shape[0])
        a, b = x[labels == 1], x[labels == 0]
        inputs = {**_dump_inputs(dump=args.dump), "corpus": Path(args.corpus)}
    else:
        raise ConfigError("give either --a and --b, or --dump and --corpus")
    sel = analysis.selectivity(a, b, (args.name_a, args.name_b))
    params = {"range": args.range, "conditions": [args.name_a, args.name_b]}
    report = out / "selectivity.json"
    io.write_json(report, {"analysis": "selectivity", "params": params, "inputs": _input_digests(inputs),
                           "s": sel.s.tolist(), "t": sel.t.tolist(), "p": sel.p.tolist(),
                           "degenerate_units": np.flatnonzero(sel.degenerate).tolist()})
    grid = viz.unit_grid(sel.s, _grid_side(sel.s.size))
    maps = _write_heatmaps(out, "selectivity", grid, viz.Preset.selectivity(args.range),
                           f"{args.name_a} vs {args.name_b}")
    _finish(out, "analyze selectivity", params, inputs, [report, *maps], None, started)


def cmd_pca(args) -> None:
    started = time.time()
    out = Path(args.out)
    x = io.read_dump(args.dump).matrix
    fit = analysis.pca(x, args.k)
    inputs = _dump_inputs(dump=args.dump)
    report = out / "pca.json"
    io.write_json(report, {"analysis": "pca", "params": {"k": args.k}, "inputs": _input_digests(inputs),
                           "explained_variance_ratio": fit.explained_variance_ratio.tolist(),
                           "weights": fit.weights.T.tolist()})
    outputs = [report]
    side = _grid_side(x.shape[1])
    for i in range(min(args.k, args.maps, fit.weights.shape[1])):
        outputs += _write_heatmaps(out, f"pc{i + 1}", viz.unit_grid(fit.weights[:, i], side),
                                   viz.Preset.weights(), f"PC{i + 1}")
    _finish(out, "analyze pca", {"k": args.k}, inputs, outputs, None, started)


def cmd_topo(args) -> None:
    started = time.time()
    out = Path(args.out)
    x = io.read_dump(args.dump).matrix
    grid = make_grid(x.shape[1])
    res = analysis.permutation_null(x, grid.distances, n_perm=args.n_perm, seed=args.seed,
                                    profile=not args.all_pairs, n_scales=args.scales)
    params = {"n_perm": args.n_perm, "scales": args.scales, "all_pairs": args.all_pairs}
    inputs = _dump_inputs(dump=args.dump)
    report = out / "topo.json"
    io.write_json(report, {"analysis": "topo", "params": params, "seed": args.seed,
                           "inputs": _input_digests(inputs), **_jsonable(res.to_dict())})
    table = out / "topo_profile.csv"
    rows = ["max_distance,t_g_d"] + [f"{d!r},{v!r}" for d, v in zip(res.scales, res.values)]
    io.atomic_write(table, ("\n".join(rows) + "\n").encode())
    _finish(out, "analyze topo", params, inputs, [report, table], args.seed, started)
    print(f"t_g mean {res.mean:.4f}; null percentile {res.percentile:.1f}; significant={res.significant}")


def _jsonable(d: dict) -> dict:
    def fix(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        if isinstance(v, list):
            return [fix(x) for x in v]
        return v
    return {k: fix(v) for k, v in d.items()}


def cmd_decode(args) -> None:
    started = time.time()
    out = Path(args.out)
    x = io.read_dump(args.dump).matrix
    labels = _labels_from_corpus(args.corpus, x.shape[0])
    res = analysis.decode(x, labels, args.n_components, args.split, args.seed)
    params = {"n_components": args.n_components, "split": args.split}
    inputs = {**_dump_inputs(dump=args.dump), "corpus": Path(args.corpus)}
    report = out / "decode.json"
    io.write_json(report, {"analysis": "decode", "params": params, "seed": args.seed,
                           "inputs": _input_digests(inputs), **vars(res)})
    _finish(out, "analyze decode", params, inputs, [report], args.seed, started)
    print(f"held-out accuracy {res.accuracy:.4f}")


def cmd_align(args) -> None:
    started = time.time()
    out = Path(args.out)
    x, y = io.read_dump(args.x).matrix, io.read_dump(args.y).matrix
    res = analysis.pls_svd_align(x, y, args.n_components, args.split, args.seed)
    params = {"n_components": args.n_components, "split": args.split}
    inputs = _dump_inputs(x=args.x, y=args.y)
    report = out / "align.json"
    io.write_json(report, {"analysis": "pls_svd", "params": params, "seed": args.seed,
                           "inputs": _input_digests(inputs), "correlations": res.correlations.tolist(),
                           "singular_values": res.singular_values.tolist(),
                           "weights_x": res.full_weights_x().T.tolist(),
                           "weights_y": res.full_weights_y().T.tolist()})
    table = out / "align.csv"
    rows = ["component,correlation"] + [f"{i + 1},{c!r}" for i, c in enumerate(res.correlations)]
    io.atomic_write(table, ("\n".join(rows) + "\n").encode())
    outputs = [report, table]
    wy = res.full_weights_y()
    side = _grid_side(y.shape[1])
    for i in range(min(args.maps, wy.shape[1])):
        outputs += _write_heatmaps(out, f"component{i + 1}_y", viz.unit_grid(wy[:, i], side),
                                   viz.Preset.weights(), f"component {i + 1}")
    _finish(out, "align", params, inputs, outputs, args.seed, started)
    print("held-out correlations:", " ".join(f"{c:.3f}" for c in res.correlations))


def cmd_encode(args) -> None:
    started = time.time()
    out = Path(args.out)
    x, y = io.read_dump(args.x).matrix, io.read_dump(args.y).matrix
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    lambdas = _floats(args.lambdas) if args.lambdas else analysis.DEFAULT_LAMBDAS
    cols = range(y.shape[1]) if args.target is None else [args.target]
    results = [analysis.ridge_encode(x, y[:, j], lambdas, args.split, args.seed) for j in cols]
    corr = [r.correlation for r in results]
    params = {"lambdas": list(map(float, lambdas)), "split": args.split, "target": args.target}
    inputs = _dump_inputs(x=args.x, y=args.y)
    report = out / "encode.json"
    io.write_json(report, {"analysis": "ridge_encoding", "params": params, "seed": args.seed,
                           "inputs": _input_digests(inputs), "targets": list(cols),
                           "correlations": _jsonable({"c": corr})["c"],
                           "best_lambdas": [r.best_lambda for r in results],
                           "mean_correlation": float(np.nanmean(corr))})
    _finish(out, "encode", params, inputs, [report], args.seed, started)
    print(f"mean held-out correlation {np.nanmean(corr):.4f} over {len(corr)} targets")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topoattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-corpus", help="write a synthetic two-class TSV corpus")
    s.add_argument("--kind", choices=("separable", "filler", "negation", "matching"), default="separable")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--min-len", type=int, default=6)
    s.add_argument("--max-len", type=int, default=14)
    s.add_argument("--n-class-words", type=int, default=40, help="class words per class, or index pairs")
    s.add_argument("--n-partners", type=int, default=1, help="b-words per sentence for --kind matching")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("train", help="train an encoder classifier from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="receptive-field sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--r-sq", default="0.05,0.3,0.6,0.9")
    s.add_argument("--r-sr", default="0.3")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("capture", help="dump token-averaged sublayer activations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--sublayer", choices=("all",) + SUBLAYERS, default="all")
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--limit", type=int, default=0, help="use only the first N sentences (0 = all)")
    s.add_argument("--unk-threshold", type=float, default=0.5)
    s.add_argument("--strict-vocab", action="store_true", help="fail instead of warning on vocab mismatch")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_capture)

    a = sub.add_parser("analyze", help="probing analyses on activation dumps")
    asub = a.add_subparsers(dest="analysis", required=True)

    s = asub.add_parser("selectivity")
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--dump")
    s.add_argument("--corpus", help="TSV whose labels split the dump rows (1 = condition A)")
    s.add_argument("--name-a", default="A")
    s.add_argument("--name-b", default="B")
    s.add_argument("--range", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_selectivity)

    s = asub.add_parser("pca")
    s.add_argument("--dump", required=True)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--maps", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pca)

    s = asub.add_parser("topo")
    s.add_argument("--dump", required=True)
    s.add_argument("--n-perm", type=int, default=100)
    s.add_argument("--scales", type=int, default=analysis.N_SCALES)
    s.add_argument("--all-pairs", action="store_true", help="single statistic without a distance cap")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_topo)

    s = asub.add_parser("decode")
    s.add_argument("--dump", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--n-components", type=int, default=50)
    s.add_argument("--split", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("align", help="PLS-SVD alignment of two dumps")
    s.add_argument("--x", required=True)
    s.add_argument("--y", required=True)
    s.add_argument("--n-components", type=int, default=10)
    s.add_argument("--split", type=float, default=0.8)
    s.add_argument("--maps", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("encode", help="ridge encoding model from X dump to each Y column")
    s.add_argument("--x", required=True)
    s.add_argument("--y", required=True)
    s.add_argument("--target", type=int)
    s.add_argument("--lambdas")
    s.add_argument("--split", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("TOPOATTN_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(int(threads)):
                args.func(args)
        else:
            args.func(args)
    except TopoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
