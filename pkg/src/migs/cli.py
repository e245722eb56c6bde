"""``migs`` command line.

Exit codes: 0 ok, 1 config or input error, 2 I/O error, 3 training diverged,
4 checkpoint version mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_VERSION = 0, 1, 2, 3, 4

log = logging.getLogger("migs")


def _config(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig.from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _data_dir(args, cfg) -> Path:
    from .config import ConfigError

    data = getattr(args, "data", None) or cfg.data_dir
    if not data:
        raise ConfigError("no dataset given (use --data or set data_dir in the config)")
    return Path(data)


def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset

    cfg = _config(args)
    manifest = generate_dataset(cfg.dataset, Path(args.out))
    print(f"wrote {len(manifest.tasks)} tasks to {args.out}")
    return EXIT_OK


def _train(method: str):
    def run(args) -> int:
        from .experiment import train

        cfg = _config(args)
        final = train(method, cfg, _data_dir(args, cfg), Path(args.out), resume=args.resume)
        print(f"final checkpoint: {final}")
        return EXIT_OK

    return run


def cmd_finetune_eval(args) -> int:
    from .experiment import finetune_eval

    cfg = _config(args)
    report = finetune_eval(cfg, _data_dir(args, cfg), [Path(c) for c in args.checkpoint], args.shots or None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    table = report.comparison_table()
    (out / "table.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_generate(args) -> int:
    from .experiment import generate_from_checkpoint
    from .scenegraph import graph_from_json, save_image

    src = args.graph
    text = Path(src).read_text(encoding="utf-8") if not src.lstrip().startswith("{") else src
    graph = graph_from_json(text)
    image = generate_from_checkpoint(Path(args.checkpoint), graph, args.seed)
    save_image(image, Path(args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="migs", description="Few-shot scene-graph-to-image generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    for name, method in (("meta-train", "migs"), ("baseline-train", "baseline")):
        t = sub.add_parser(name)
        t.add_argument("--config")
        t.add_argument("--data")
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
        t.set_defaults(func=_train(method))

    f = sub.add_parser("finetune-eval", help="fine-tune checkpoints on every test task and report metrics")
    f.add_argument("--config")
    f.add_argument("--data")
    f.add_argument("--checkpoint", action="append", required=True, help="repeat to compare methods")
    f.add_argument("--shots", type=int, action="append", help="repeatable; default: config eval.shots")
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune_eval)

    r = sub.add_parser("generate", help="render one scene graph")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--graph", required=True, help="graph JSON file or inline JSON")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointFormatError, CheckpointVersionError
    from .config import ConfigError
    from .meta import DivergenceError
    from .scenegraph import SceneParseError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CheckpointVersionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, SceneParseError, CheckpointFormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
