"""``cae`` command-line front end.

Every failure exits nonzero with a one-line JSON object on stderr:
``{"error": "<ExceptionType>", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import codec, harness
from .imageio import list_images, read_image, write_ppm
from .io_util import atomic_write
from .model import load_models, save_models
from .train import TrainConfig, trace_to_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_dir(path) -> dict[str, np.ndarray]:
    paths = list_images(path)
    if not paths:
        raise FileNotFoundError(f"no .ppm/.png images in {path}")
    return {os.path.basename(p): read_image(p) for p in paths}


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write_config(out_dir: str, name: str, payload: dict) -> None:
    atomic_write(os.path.join(out_dir, name), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig.from_dict(_read_json(args.train_config)) if args.train_config else TrainConfig()


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args):
    data = harness.DataConfig(None, args.count, args.size, args.seed).load()
    for name, img in data.items():
        write_ppm(os.path.join(args.out, name + ".ppm"), img)
    return {"written": len(data), "dir": args.out}


def cmd_train(args):
    run_dict = _read_json(args.config) if args.config else {}
    if args.out:
        run_dict["output_dir"] = args.out
    if args.data:
        run_dict.setdefault("data", {})["dir"] = args.data
    run = harness.RunConfig.from_dict(run_dict)
    out = run.output_dir
    os.makedirs(out, exist_ok=True)
    _write_config(out, "config.resolved.json", run.to_dict())
    images = list(run.data.load().values())
    build = harness.build_ensemble(run, images)
    for r in build.results:
        atomic_write(os.path.join(out, f"trace_m{r.model.model_id}.csv"), trace_to_csv(r.trace))
    model_path = os.path.join(out, "ensemble.cae")
    save_models(model_path, build.models)
    return {"model": model_path, "models": len(build.models),
            "scale_sets": [len(m.scale_sets) for m in build.models]}


def cmd_finetune(args):
    models = load_models(args.model)
    images = list(_load_dir(args.data).values())
    cfg = _train_config(args)
    if args.iterations is not None:
        cfg.finetune_iterations = args.iterations
    ft = harness.FinetuneConfig(args.alphas or [], args.interpolate or [])
    for m in models:
        harness.add_scale_sets(m, images, cfg, ft)
        codec.fit_histograms(m, images)
    out = args.out or args.model
    save_models(out, models)
    _write_config(os.path.dirname(os.path.abspath(out)), os.path.basename(out) + ".finetune.json",
                  {"model": args.model, "data": args.data, "alphas": ft.alphas,
                   "interpolate": ft.interpolate, "train": vars(cfg)})
    return {"model": out, "scale_sets": [len(m.scale_sets) for m in models]}


def cmd_histograms(args):
    models = load_models(args.model)
    images = list(_load_dir(args.data).values())
    for m in models:
        codec.fit_histograms(m, images, args.smoothing)
    out = args.out or args.model
    save_models(out, models)
    return {"model": out}


def _parse_preset(s: str) -> tuple[int, int]:
    try:
        mid, sid = s.split(":")
        return int(mid), int(sid)
    except ValueError:
        raise UsageError(f"--preset expects MODEL:SCALESET, got {s!r}") from None


def cmd_compress(args):
    models = load_models(args.model)
    img = read_image(args.input)
    if (args.target_bpp is None) == (args.preset is None):
        raise UsageError("give exactly one of --target-bpp or --preset")
    preset = _parse_preset(args.preset) if args.preset else None
    f = codec.compress(models, img, args.target_bpp, preset, args.policy)
    atomic_write(args.out, f.to_bytes())
    return {"out": args.out, "bytes": f.n_bytes, "bpp": f.bpp,
            "model_id": f.model_id, "scale_set": f.scale_set_id}


def cmd_decompress(args):
    models = load_models(args.model)
    with open(args.input, "rb") as fh:
        img = codec.decompress(fh.read(), models)
    write_ppm(args.out, img)
    return {"out": args.out, "width": img.shape[1], "height": img.shape[0]}


def cmd_evaluate(args):
    models = load_models(args.models)
    images = _load_dir(args.dir)
    points = harness.evaluate(models, images, args.workers)
    for b in args.baseline or []:
        points.extend(harness.read_rd_csv(b))
    atomic_write(args.out, harness.rd_to_csv(points))
    summary = harness.summarize([p for p in points if p.codec.startswith("cae:")])
    stem = os.path.splitext(args.out)[0]
    atomic_write(stem + ".summary.csv", harness.summary_to_csv(summary))
    atomic_write(stem + ".gp", harness.gnuplot_script(os.path.basename(stem + ".summary.csv"),
                                                      args.baseline or []))
    _write_config(os.path.dirname(os.path.abspath(args.out)),
                  os.path.basename(stem) + ".config.json",
                  {"models": args.models, "dir": args.dir, "baseline": args.baseline or [],
                   "workers": args.workers})
    return {"out": args.out, "rows": len(points)}


def cmd_ablate(args):
    if args.which == "no-round":
        if not (args.model and args.dir):
            raise UsageError("ablate no-round needs --model and --dir")
        model = load_models(args.model)[args.model_index]
        rows = harness.ablate_no_round(model, _load_dir(args.dir), args.scale_set)
        report = {
            "mse_rounded": float(np.mean([r["mse_rounded"] for r in rows])),
            "mse_no_round": float(np.mean([r["mse_no_round"] for r in rows])),
        }
    else:
        run = harness.RunConfig.from_dict(_read_json(args.config) if args.config else {})
        train_imgs = list((_load_dir(args.data) if args.data else run.data.load()).values())
        test = _load_dir(args.dir) if args.dir else run.data.load()
        if args.steps is not None:
            run.train.max_updates = args.steps
        rows = harness.ablate_surrogates(train_imgs, test, run.train, run.net)
        report = {r["surrogate"]: r["mse"] for r in rows}
        ste, noise = report.get("round_ste"), report.get("additive_noise")
        report["ste_better"] = bool(ste is not None and noise is not None and ste < noise)
        _write_config(os.path.dirname(os.path.abspath(args.out)),
                      os.path.basename(os.path.splitext(args.out)[0]) + ".config.json", run.to_dict())
    atomic_write(args.out, harness.rows_to_csv(rows))
    return {"out": args.out, **report}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cae", description="Compressive autoencoder codec (desk scale).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write a seeded synthetic texture corpus as PPM")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=24)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=1)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train an ensemble from a JSON run config")
    s.add_argument("--config")
    s.add_argument("--data", help="image directory (overrides config)")
    s.add_argument("--out", help="output directory (overrides config)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("finetune", help="add fine-tuned / interpolated scale sets")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--alphas", type=float, nargs="*")
    s.add_argument("--interpolate", type=float, nargs="*")
    s.add_argument("--iterations", type=int)
    s.add_argument("--train-config")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("histograms", help="fit coder histograms for every scale set")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--smoothing", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_histograms)

    s = sub.add_parser("compress")
    s.add_argument("--model", required=True, nargs="+")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target-bpp", type=float)
    s.add_argument("--preset", help="MODEL_ID:SCALE_SET")
    s.add_argument("--policy", choices=["min-distortion", "max-rate"], default="min-distortion")
    s.set_defaults(fn=cmd_compress)

    s = sub.add_parser("decompress")
    s.add_argument("--model", required=True, nargs="+")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_decompress)

    s = sub.add_parser("evaluate", help="RD points for every image and setting")
    s.add_argument("--models", required=True, nargs="+")
    s.add_argument("--dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--baseline", nargs="*", help="external RdPoint CSVs to overlay")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("ablate")
    s.add_argument("which", choices=["no-round", "surrogates"])
    s.add_argument("--model")
    s.add_argument("--model-index", type=int, default=0)
    s.add_argument("--scale-set", type=int, default=0)
    s.add_argument("--dir", help="evaluation images")
    s.add_argument("--data", help="training images (surrogates)")
    s.add_argument("--config", help="run config (surrogates)")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.fn(args)
    except UsageError as e:
        print(json.dumps({"error": "UsageError", "message": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:  # every failure path reports machine-readable JSON
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
