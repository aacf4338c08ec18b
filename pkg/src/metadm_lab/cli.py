"""Command-line front end.

    metadm-lab [--config run.ini] [--seed N] [--set section.key=value ...]
               [--output-dir DIR] <command> [options]

Commands: synth, ingest, train-diffusion, generate, train-fsl, eval, run,
ablate. Global flags may also follow the command name. Precedence is
defaults < config file < METADM_OUTPUT_DIR < --set < --seed/--output-dir.

Exit codes: 0 success, 2 configuration error, 3 data-integrity error,
4 numeric failure, 1 anything else raised by the library.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__, datasets, pipeline
from .config import dump_config, load_config
from .errors import MetaDMError


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="INI file with [run], [dataset], [diffusion], [metadm], [fsl]")
    p.add_argument("--seed", type=int, default=S, help="run seed (overrides the config)")
    p.add_argument("--set", dest="overrides", action="append", default=S, metavar="KEY=VALUE",
                   help="override one config value, e.g. fsl.k_shot=5 (repeatable)")
    p.add_argument("--output-dir", default=S, help="where stage directories are written")
    p.add_argument("-v", "--verbose", action="store_true", default=S)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="metadm-lab", parents=[common],
                                     description="Few-shot learning with diffusion pseudo-samples.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="render the synthetic dataset into <output>/dataset")
    p = sub.add_parser("ingest", parents=[common], help="import a directory-per-class image tree")
    p.add_argument("source", help="directory with one sub-directory per class")
    p.add_argument("--dest", help="dataset directory (default <output>/dataset)")
    p.add_argument("--name")

    sub.add_parser("train-diffusion", parents=[common], help="train the denoiser on training classes")
    p = sub.add_parser("generate", parents=[common], help="build the augmented training set")
    p.add_argument("--checkpoint", help="denoiser checkpoint (default <output>/diffusion/denoiser.ckpt)")
    p = sub.add_parser("train-fsl", parents=[common], help="episodic prototypical training")
    p.add_argument("--augmented", help="augmented.json (default <output>/generated/augmented.json)")
    p = sub.add_parser("eval", parents=[common], help="evaluate on the test classes")
    p.add_argument("--checkpoint", help="embedding checkpoint (default <output>/fsl/embedding.ckpt)")
    p.add_argument("--denoiser", help="denoiser for fsl.include_fake_ways_at_test "
                   "(default <output>/diffusion/denoiser.ckpt)")
    p = sub.add_parser("run", parents=[common], help="train-diffusion, generate, train-fsl and eval in sequence")
    p.add_argument("--checkpoint", help="reuse this denoiser instead of training one")

    p = sub.add_parser("ablate", parents=[common], help="sweep one axis with a full pipeline per value")
    p.add_argument("--axis", required=True, choices=pipeline.AXES)
    p.add_argument("--values", nargs="+", help="axis values (default: the standard sweep for the axis)")
    p.add_argument("--seeds", nargs="+", type=int, help="seeds to repeat the sweep with (default: --seed)")
    p.add_argument("--checkpoint", help="shared denoiser checkpoint (default: train one)")
    p.add_argument("--out", help="sweep directory (default <output>/ablation-<axis>)")
    return parser


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _default(given, cfg, *parts) -> Path:
    return Path(given) if given else Path(cfg.output_dir, *parts)


def dispatch(args, cfg) -> None:
    cmd = args.command
    if cmd == "synth":
        m = pipeline.prepare_dataset(cfg)
        _print({"manifest": str(Path(m.root) / "manifest.json"), "digest": m.digest,
                "classes": {s: len(m.split_classes(s)) for s in datasets.SPLITS}})
    elif cmd == "ingest":
        dest = _default(args.dest, cfg, "dataset")
        n_dirs = sum(p.is_dir() for p in Path(args.source).iterdir())
        # the configured split only applies when it matches the folder's class count
        split = cfg.split_counts() if cfg.dataset.n_classes == n_dirs else None
        m = datasets.ingest_folder(args.source, dest, (cfg.dataset.image_size,) * 2, args.name, split)
        _print({"manifest": str(dest / "manifest.json"), "digest": m.digest})
    elif cmd == "train-diffusion":
        res = pipeline.run_train_diffusion(cfg)
        _print({"checkpoint": str(res.checkpoint), "digest": res.digest, "final_loss": res.losses[-1]
                if res.losses else None})
    elif cmd == "generate":
        res = pipeline.run_generate(cfg, _default(args.checkpoint, cfg, "diffusion", "denoiser.ckpt"))
        _print({"manifest": str(res.manifest_path), "digest": res.augmented.digest, "counts": res.counts})
    elif cmd == "train-fsl":
        aug = None
        if cfg.metadm.method == "metadm":
            aug = _default(args.augmented, cfg, "generated", "augmented.json")
        res = pipeline.run_train_fsl(cfg, aug)
        _print({"checkpoint": str(res.checkpoint), "digest": res.digest, "best_val_accuracy": res.best_val,
                "fake_ways_sampled": res.fake_ways_seen})
    elif cmd == "eval":
        den = None
        if cfg.fsl.include_fake_ways_at_test:
            den = _default(args.denoiser, cfg, "diffusion", "denoiser.ckpt")
        reports = pipeline.run_eval(cfg, _default(args.checkpoint, cfg, "fsl", "embedding.ckpt"), None, den)
        _print({f"{k}-shot": r.to_json() for k, r in reports.items()})
    elif cmd == "run":
        res = pipeline.run_pipeline(cfg, args.checkpoint)
        _print({f"{k}-shot": r.to_json() for k, r in res["reports"].items()})
    elif cmd == "ablate":
        rows = pipeline.run_ablation(cfg, args.axis, args.values, args.seeds, args.checkpoint, args.out)
        out = csv.writer(sys.stdout, lineterminator="\n")
        out.writerow(["axis", "value", "seed", "mean_accuracy", "ci95_halfwidth", "status"])
        for r in rows:
            out.writerow([r.axis, r.value, r.seed, r.mean_accuracy, r.ci95_halfwidth, r.status])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), getattr(args, "overrides", []),
                          getattr(args, "seed", None), getattr(args, "output_dir", None))
        logging.getLogger(__name__).info("resolved config:\n%s", dump_config(cfg))
        dispatch(args, cfg)
    except MetaDMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
