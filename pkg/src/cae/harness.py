"""Experiment procedures behind the CLI: ensemble builds, RD evaluation, ablations."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .codec import all_candidates, fit_histograms
from .data import synthetic_corpus
from .imageio import list_images, read_image
from .metrics import RD_FIELDS, RdPoint, mse, rd_point
from .model import CaeConfig, CaeModel, Tradeoff
from .train import (
    EnsembleSpec,
    TrainConfig,
    TrainResult,
    add_interpolated,
    finetune_scales,
    train_ensemble,
    train_incremental,
)


@dataclass
class DataConfig:
    """Image source: a directory, or the synthetic generator when ``dir`` is None."""

    dir: str | None = None
    synthetic_count: int = 24
    synthetic_size: int = 64
    synthetic_seed: int = 1

    def load(self) -> dict[str, np.ndarray]:
        if self.dir:
            paths = list_images(self.dir)
            if not paths:
                raise FileNotFoundError(f"no .ppm/.png images in {self.dir}")
            return {os.path.basename(p): read_image(p) for p in paths}
        imgs = synthetic_corpus(self.synthetic_count, self.synthetic_seed,
                                self.synthetic_size, self.synthetic_size)
        return {f"tex{i:04d}": im for i, im in enumerate(imgs)}


@dataclass
class FinetuneConfig:
    alphas: list[float] = field(default_factory=list)
    interpolate: list[float] = field(default_factory=list)


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    net: CaeConfig = field(default_factory=CaeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec.desk)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown keys in run config: {sorted(unknown)}")
        seed = d.get("seed", 0)
        train = dict(d.get("train", {}))
        train.setdefault("seed", seed)
        net = dict(d.get("net", {}))
        net.setdefault("seed", seed)
        return cls(
            seed=seed,
            output_dir=d.get("output_dir", "run"),
            data=_strict(DataConfig, d.get("data", {}), "data"),
            net=_strict(CaeConfig, net, "net"),
            train=_strict(TrainConfig, train, "train"),
            ensemble=_strict(EnsembleSpec, d["ensemble"], "ensemble") if "ensemble" in d
            else EnsembleSpec.desk(),
            finetune=_strict(FinetuneConfig, d.get("finetune", {}), "finetune"),
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ensemble"] = {"presets": [list(p) for p in self.ensemble.presets]}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class EnsembleBuild:
    models: list[CaeModel]
    results: list[TrainResult]


def build_ensemble(run: RunConfig, images: list[np.ndarray]) -> EnsembleBuild:
    """Train every preset, fine-tune extra scale sets, interpolate, fit histograms."""
    results = train_ensemble(run.ensemble, images, run.train, run.net)
    models = [r.model for r in results]
    for m in models:
        add_scale_sets(m, images, run.train, run.finetune)
        fit_histograms(m, images)
    return EnsembleBuild(models, results)


def add_scale_sets(model: CaeModel, images, train: TrainConfig, ft: FinetuneConfig) -> None:
    """Fine-tune one set per alpha, then interpolate between neighbouring alphas.

    Interpolation runs between consecutive sets ordered by alpha (base set
    included) at every weight in ``ft.interpolate``.
    """
    for a in ft.alphas:
        finetune_scales(model, images, Tradeoff.alpha(a), train)
    if ft.interpolate:
        tuned = sorted((s.alpha, i) for i, s in enumerate(model.scale_sets) if s.alpha is not None)
        for (_, i), (_, j) in zip(tuned, tuned[1:]):
            for w in ft.interpolate:
                add_interpolated(model, i, j, w)


def evaluate_image(args) -> list[RdPoint]:
    ensemble, name, img = args
    return [rd_point(name, c.label, img, c.decoded, c.file.n_bytes)
            for c in all_candidates(ensemble, img)]


def evaluate(ensemble: list[CaeModel], images: dict[str, np.ndarray], workers: int = 1) -> list[RdPoint]:
    """One RdPoint per image per (model, scale set); order is independent of ``workers``."""
    jobs = [(ensemble, name, img) for name, img in images.items()]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            chunks = list(ex.map(evaluate_image, jobs))
    else:
        chunks = [evaluate_image(j) for j in jobs]
    return [p for chunk in chunks for p in chunk]


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(float(v))
    return v


def rd_to_csv(points: list[RdPoint]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RD_FIELDS, lineterminator="\n")
    w.writeheader()
    for p in points:
        w.writerow({k: _fmt(v) for k, v in asdict(p).items()})
    return buf.getvalue()


def read_rd_csv(path) -> list[RdPoint]:
    """Read RdPoint rows; extra columns are ignored, missing optional ones default."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RdPoint(row["image"], row["codec"], float(row["bpp"]), float(row["psnr"]),
                               float(row.get("ssim") or "nan"), float(row.get("ms_ssim") or "nan"),
                               int(row.get("ms_ssim_scales") or 5), float(row.get("mse") or "nan")))
    return out


def summarize(points: list[RdPoint]) -> list[dict]:
    """Mean bpp / metrics per codec setting, sorted by mean bpp."""
    groups: dict[str, list[RdPoint]] = {}
    for p in points:
        groups.setdefault(p.codec, []).append(p)
    rows = []
    for codec, ps in groups.items():
        rows.append({
            "codec": codec,
            "bpp": float(np.mean([p.bpp for p in ps])),
            "mse": float(np.mean([p.mse for p in ps])),
            "psnr": float(np.mean([p.psnr for p in ps])),
            "ssim": float(np.mean([p.ssim for p in ps])),
            "ms_ssim": float(np.mean([p.ms_ssim for p in ps])),
            "n": len(ps),
        })
    return sorted(rows, key=lambda r: r["bpp"])


def gnuplot_script(summary_csv: str, baseline_csvs: list[str]) -> str:
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set xlabel 'bits per pixel'",
        "set ylabel 'PSNR [dB]'",
        "set terminal pngcairo size 800,600",
        "set output 'rd_psnr.png'",
    ]
    plots = [f"'{summary_csv}' using 2:3 with linespoints title 'CAE'"]
    for b in baseline_csvs:
        plots.append(f"'{b}' using 3:4 with points title '{os.path.basename(b)}'")
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


def summary_to_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["codec", "bpp", "psnr", "ssim", "ms_ssim", "mse", "n"],
                       lineterminator="\n")
    w.writeheader()
    for r in summary:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


# -- ablations ----------------------------------------------------------------------

def ablate_no_round(model: CaeModel, images: dict[str, np.ndarray], scale_set: int = 0) -> list[dict]:
    """MSE of reconstructions with and without the rounding step, per image."""
    from .codec import decode_codes, pad_image

    rows = []
    for name, img in images.items():
        h, w = img.shape[:2]
        x = pad_image(img).transpose(2, 0, 1).astype(np.float64)
        rounded = model.quantized_codes(x, scale_set, rounding=True)
        smooth = model.quantized_codes(x, scale_set, rounding=False)
        rows.append({
            "image": name,
            "mse_rounded": mse(img, decode_codes(model, rounded, scale_set, h, w)),
            "mse_no_round": mse(img, decode_codes(model, smooth, scale_set, h, w)),
        })
    return rows


def ablate_surrogates(train_images: list[np.ndarray], test_images: dict[str, np.ndarray],
                      train: TrainConfig, net: CaeConfig,
                      modes=("round_ste", "additive_noise")) -> list[dict]:
    """Train identical-seed twins differing only in the surrogate; test with hard rounding."""
    rows = []
    for mode in modes:
        cfg = TrainConfig(**{**asdict(train), "surrogate": mode})
        result = train_incremental(CaeModel(CaeConfig(**{**asdict(net), "surrogate": mode})),
                                   train_images, cfg)
        model = result.model
        fit_histograms(model, train_images)
        pts = evaluate([model], test_images)
        rows.append({
            "surrogate": mode,
            "bpp": float(np.mean([p.bpp for p in pts])),
            "mse": float(np.mean([p.mse for p in pts])),
            "psnr": float(np.mean([p.psnr for p in pts])),
            "ssim": float(np.mean([p.ssim for p in pts])),
            "final_train_loss": float(np.mean([r.loss for r in result.trace[-cfg.window:]])),
        })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()
