"""Command-line entry point: ``diffguide run|validate|render``."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import dtns

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3


def render_grid(samples, path) -> None:
    """Tile square grids row-major into a binary PGM with 1-pixel black separators."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == x.shape[1]:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != x.shape[2] or len(x) == 0:
        raise ValueError(f"expected a batch of square grids, got shape {np.shape(samples)}")
    n, S, _ = x.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    H, W = rows * S + rows - 1, cols * S + cols - 1
    img = np.zeros((H, W), np.uint8)
    tiles = np.round(np.clip(np.nan_to_num(x), 0.0, 1.0) * 255).astype(np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        img[r * (S + 1):r * (S + 1) + S, c * (S + 1):c * (S + 1) + S] = tile
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (W, H))
        f.write(img.tobytes())


def _run(args) -> int:
    from .pipelines import ConfigError, load_config, run_experiment

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rows = run_experiment(cfg, args.output_dir)
    except Exception as exc:  # surfaced as a pipeline failure with the module's message
        print(f"pipeline error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    for r in rows:
        print(f"{r['run_id']}\t{r['metric']}\t{r['value']:.6g}\tn={r['n']}")
    return EXIT_OK


def _validate(args) -> int:
    from .pipelines import ConfigError, load_config

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {cfg.name} ({cfg.pipeline.name}, seeds {list(cfg.seeds)}, hash {cfg.config_hash()})")
    return EXIT_OK


def _render(args) -> int:
    try:
        x = dtns.load(args.samples)
        render_grid(x, args.out)
    except (OSError, ValueError) as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="diffguide")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="run the pipeline named in a config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="override the config's output_dir")
    p.set_defaults(fn=_run)
    p = sub.add_parser("validate", help="parse a config without running it")
    p.add_argument("config")
    p.set_defaults(fn=_validate)
    p = sub.add_parser("render", help="tile DTNS grid samples into a PGM image")
    p.add_argument("samples")
    p.add_argument("out")
    p.set_defaults(fn=_render)
    args = ap.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
