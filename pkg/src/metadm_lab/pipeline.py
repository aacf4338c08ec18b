"""Pipeline stages shared by the command line and the acceptance suite.

Each stage writes into its own directory under ``cfg.output_dir``:

    dataset/     manifest.json + images (synthetic source only)
    diffusion/   denoiser.ckpt, loss.csv, loss.png
    generated/   augmented.json + generated images, samples.png
    fsl/         embedding.ckpt, train_log.csv, train_log.png
    eval/        report_<k>shot.json, episodes_<k>shot.csv

Every stage directory also receives the resolved ``config.ini`` and a
``run.json`` with the tool version, config digest and input/output
digests. Reads of checkpoints and manifests are appended to
``<output_dir>/access.log``.
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, datasets, diffusion, episodic, metadm, nncore, plotting
from .config import RunConfig, config_digest, copy_config, dump_config
from .errors import ConfigError, IntegrityError, MetaDMError

log = logging.getLogger(__name__)


def derive_seed(seed: int, tag: str) -> int:
    """Stable 31-bit seed for one named stream of a run."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())])
    return int(ss.generate_state(1)[0] >> 1)


class Workspace:
    """Output directory of one run plus its access log."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def stage_dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def read(self, path) -> bytes:
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise IntegrityError(f"cannot read {path}: {exc}") from exc
        self.note_access(path, nncore.digest_bytes(data))
        return data

    def note_access(self, path, digest: str) -> None:
        with open(self.root / "access.log", "a") as fh:
            fh.write(f"read {Path(path).resolve()} {digest}\n")

    def write_meta(self, stage_dir: Path, stage: str, inputs: dict, outputs: dict) -> None:
        (stage_dir / "config.ini").write_text(dump_config(self.cfg))
        meta = {"stage": stage, "tool_version": __version__, "config_digest": config_digest(self.cfg),
                "seed": self.cfg.seed, "inputs": inputs, "outputs": outputs}
        (stage_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# dataset


def synth_spec(cfg: RunConfig) -> datasets.SynthSpec:
    s = cfg.dataset.image_size
    return datasets.SynthSpec(n_classes=cfg.dataset.n_classes, images_per_class=cfg.dataset.images_per_class,
                              image_shape=(3, s, s), seed=cfg.dataset.seed)


def prepare_dataset(cfg: RunConfig, ws: Workspace | None = None) -> datasets.DatasetManifest:
    """Load the configured dataset, rendering the synthetic one on first use."""
    ws = ws or Workspace(cfg)
    if cfg.dataset.source != "synth":
        path = Path(cfg.dataset.source)
        manifest = datasets.load_manifest(path)
        ws.note_access(path, manifest.digest)
        return manifest
    root = ws.root / "dataset"
    path = root / "manifest.json"
    spec = synth_spec(cfg)
    if path.exists():
        manifest = datasets.load_manifest(path)
        want = json.loads(json.dumps({k: v for k, v in vars(spec).items() if k != "styles"}))
        if manifest.source.get("spec") == want and _split_of(manifest) == cfg.split_counts():
            ws.note_access(path, manifest.digest)
            return manifest
    manifest = datasets.synth_generate(spec, root, cfg.split_counts())
    ws.write_meta(root, "synth", {}, {"manifest": manifest.digest})
    return manifest


def _split_of(manifest) -> tuple:
    return tuple(len(manifest.split_classes(s)) for s in datasets.SPLITS)


def train_images(manifest) -> torch.Tensor:
    return torch.cat([manifest.images(e.class_id.index) for e in manifest.split_classes("train")])


# ---------------------------------------------------------------------------
# diffusion


@dataclass
class DiffusionResult:
    checkpoint: Path
    digest: str
    losses: list


def make_run_schedule(cfg: RunConfig) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(cfg.diffusion.T, *cfg.betas())


def run_train_diffusion(cfg: RunConfig, ws: Workspace | None = None) -> DiffusionResult:
    """Train the denoiser on training-split images only."""
    ws = ws or Workspace(cfg)
    manifest = prepare_dataset(cfg, ws)
    images = train_images(manifest)
    schedule = make_run_schedule(cfg)
    model = diffusion.build_denoiser(cfg.seed, images.shape[1], cfg.widths(), cfg.diffusion.time_embed_dim)
    d = cfg.diffusion
    losses = diffusion.train_denoiser(
        model, images, schedule, d.epochs, lr=d.lr, batch_size=d.batch_size, seed=derive_seed(cfg.seed, "diffusion"),
        on_epoch=lambda e, l: log.info("diffusion epoch %d loss %.5f", e, l))
    out = ws.stage_dir("diffusion")
    ckpt = out / "denoiser.ckpt"
    digest = diffusion.save_denoiser(ckpt, model, schedule)
    _write_csv(out / "loss.csv", ["epoch", "loss"], [[i, repr(l)] for i, l in enumerate(losses)])
    plotting.curve_figure({"train loss": losses}, out / "loss.png", "epoch", "noise-prediction MSE")
    ws.write_meta(out, "train-diffusion", {"dataset": manifest.digest}, {"denoiser.ckpt": digest})
    return DiffusionResult(ckpt, digest, losses)


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerateResult:
    augmented: metadm.AugmentedDataset
    manifest_path: Path
    counts: dict


def run_generate(cfg: RunConfig, checkpoint, ws: Workspace | None = None) -> GenerateResult:
    """Build and store the augmented training set from a denoiser checkpoint."""
    ws = ws or Workspace(cfg)
    if cfg.metadm.method != "metadm":
        raise ConfigError("generate needs metadm.method = metadm")
    manifest = prepare_dataset(cfg, ws)
    data = ws.read(checkpoint)
    model, schedule = diffusion.decode_denoiser(data)
    den_digest = nncore.digest_bytes(data)
    pool = manifest.pool("train")
    fake_start = max(e.class_id.index for e in manifest.classes) + 1
    mcfg = cfg.metadm.to_metadm(cfg.seed)
    aug = metadm.build_augmented_dataset(pool, model, mcfg, schedule, fake_start)
    out = ws.stage_dir("generated")
    path = metadm.write_augmented(aug, out, manifest, den_digest, mcfg)
    counts = {p.value: aug.count(p) for p in metadm.Provenance}
    counts["fake_classes"] = len(aug.fake_classes)
    plotting.sample_grid(aug, out / "samples.png")
    ws.write_meta(out, "generate", {"dataset": manifest.digest, "denoiser": den_digest},
                  {"augmented.json": aug.digest, "counts": counts})
    return GenerateResult(aug, path, counts)


# ---------------------------------------------------------------------------
# few-shot training and evaluation


@dataclass
class FSLResult:
    checkpoint: Path
    digest: str
    log: list
    best_val: float
    fake_ways_seen: int = 0


def build_embedding(cfg: RunConfig, channels: int = 3) -> episodic.ConvEmbedding:
    return episodic.build_embedding(cfg.seed, channels, cfg.fsl.hidden, image_size=cfg.dataset.image_size)


def run_train_fsl(cfg: RunConfig, augmented_path=None, ws: Workspace | None = None) -> FSLResult:
    """Episodic prototypical training; keeps the best-on-validation weights.

    The baseline method trains on the original training split and never
    touches generated data or the denoiser.
    """
    ws = ws or Workspace(cfg)
    manifest = prepare_dataset(cfg, ws)
    if cfg.metadm.method == "baseline":
        aug = metadm.plain_dataset(manifest.pool("train"))
        inputs = {"dataset": manifest.digest}
    else:
        if augmented_path is None:
            raise ConfigError("train-fsl with metadm.method = metadm needs an augmented manifest")
        ws.read(augmented_path)
        aug, doc = metadm.load_augmented(augmented_path)
        if doc["dataset_digest"] != manifest.digest:
            raise IntegrityError("augmented manifest was built from a different dataset")
        inputs = {"dataset": manifest.digest, "augmented": aug.digest}
    pool = aug.to_pool(cfg.metadm.good_as_query)
    val_pool = episodic.EpisodePool(manifest.pool("val"))
    model = build_embedding(cfg, manifest.image_shape[0])
    f = cfg.fsl
    rows, best, best_val = episodic.train_episodic(
        model, pool, f.n_way, f.k_shot, f.n_query_train, f.episodes_train, f.lr, f.lambda_reg,
        seed=derive_seed(cfg.seed, "fsl-train"), val_pool=val_pool, val_every=f.val_every,
        val_episodes=f.val_episodes, optimizer=f.optimizer, lr_decay_every=f.lr_decay_every)
    out = ws.stage_dir("fsl")
    data = nncore.encode_params(best)
    (out / "embedding.ckpt").write_bytes(data)
    digest = nncore.digest_bytes(data)
    _write_csv(out / "train_log.csv", ["episode", "loss", "fake_ways", "val_accuracy"],
               [[r.episode, repr(r.loss), r.fake_ways, "" if r.val_accuracy is None else repr(r.val_accuracy)]
                for r in rows])
    plotting.training_figure(rows, out / "train_log.png")
    fake_seen = sum(r.fake_ways for r in rows)
    ws.write_meta(out, "train-fsl", inputs, {"embedding.ckpt": digest, "best_val_accuracy": best_val,
                                             "fake_ways_sampled": fake_seen})
    return FSLResult(out / "embedding.ckpt", digest, rows, best_val, fake_seen)


def load_embedding(cfg: RunConfig, checkpoint, ws: Workspace, channels: int = 3) -> episodic.ConvEmbedding:
    params, end = nncore.decode_params(ws.read(checkpoint))
    model = build_embedding(cfg, channels)
    nncore.load_into(model, params)
    return model.eval()


def eval_shots(cfg: RunConfig) -> list:
    shots = [cfg.fsl.k_shot] + cfg.eval_shots()
    return list(dict.fromkeys(shots))


def test_pool(cfg: RunConfig, manifest, ws: Workspace, denoiser_checkpoint=None):
    """Test-class pool; with ``include_fake_ways_at_test`` bad twins join as support ways.

    Returns ``(pool, with_fakes, inputs)``.
    """
    pool = manifest.pool("test")
    if not cfg.fsl.include_fake_ways_at_test:
        return episodic.EpisodePool(pool), False, {}
    if denoiser_checkpoint is None:
        raise ConfigError("fsl.include_fake_ways_at_test needs a denoiser checkpoint")
    data = ws.read(denoiser_checkpoint)
    model, schedule = diffusion.decode_denoiser(data)
    mcfg = cfg.metadm.to_metadm(derive_seed(cfg.seed, "eval-fakes"))
    mcfg.augment_enabled, mcfg.sharpen_enabled = False, True
    aug = metadm.build_augmented_dataset(pool, model, mcfg, schedule,
                                         max(e.class_id.index for e in manifest.classes) + 1)
    return aug.to_pool(), True, {"denoiser": nncore.digest_bytes(data)}


def run_eval(cfg: RunConfig, checkpoint, ws: Workspace | None = None, denoiser_checkpoint=None) -> dict:
    """Evaluate on the test classes for every configured shot count.

    Queries always come from real test classes. Returns ``{k_shot:
    EvalReport}``; all shot counts share the episode seed.
    """
    ws = ws or Workspace(cfg)
    manifest = prepare_dataset(cfg, ws)
    model = load_embedding(cfg, checkpoint, ws, manifest.image_shape[0])
    pool, with_fakes, inputs = test_pool(cfg, manifest, ws, denoiser_checkpoint)
    out = ws.stage_dir("eval")
    digest = config_digest(cfg)
    reports, outputs = {}, {}
    for k in eval_shots(cfg):
        rep = episodic.evaluate(pool, model, cfg.fsl.episodes_eval, cfg.fsl.n_way, k, cfg.fsl.n_query,
                                seed=derive_seed(cfg.seed, "eval"), include_fakes=with_fakes,
                                config_digest=digest)
        rep.write(out / f"report_{k}shot.json", out / f"episodes_{k}shot.csv")
        reports[k] = rep
        outputs[f"report_{k}shot.json"] = nncore.digest_bytes((out / f"report_{k}shot.json").read_bytes())
    inputs.update({"embedding": nncore.digest_bytes(Path(checkpoint).read_bytes()), "dataset": manifest.digest})
    ws.write_meta(out, "eval", inputs, outputs)
    return reports


def run_pipeline(cfg: RunConfig, checkpoint=None) -> dict:
    """generate (Meta-DM only) -> train-fsl -> eval for one configuration."""
    ws = Workspace(cfg)
    aug_path = None
    if cfg.metadm.method == "metadm" or cfg.fsl.include_fake_ways_at_test:
        if checkpoint is None:
            checkpoint = run_train_diffusion(cfg, ws).checkpoint
    if cfg.metadm.method == "metadm":
        aug_path = run_generate(cfg, checkpoint, ws).manifest_path
    fsl = run_train_fsl(cfg, aug_path, ws)
    den = checkpoint if cfg.fsl.include_fake_ways_at_test else None
    return {"fsl": fsl, "reports": run_eval(cfg, fsl.checkpoint, ws, den)}


# ---------------------------------------------------------------------------
# ablations


AXES = ("module", "strength-good", "strength-bad", "bad-count")
MODULE_ARMS = ("neither", "good-only", "bad-only", "both")


def default_values(axis: str) -> list:
    return {"module": list(MODULE_ARMS), "strength-good": [0.05, 0.2, 0.5, 0.8],
            "strength-bad": [0.05, 0.2, 0.5, 0.8], "bad-count": [1, 5, 10, 20]}[axis]


def parse_values(axis: str, values) -> list:
    """Validate ablation values against the axis's legal domain."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
    if not values:
        raise ConfigError("ablation needs at least one value")
    out = []
    for v in values:
        if axis == "module":
            if v not in MODULE_ARMS:
                raise ConfigError(f"module arm must be one of {MODULE_ARMS}, got {v!r}")
            out.append(v)
        elif axis == "bad-count":
            n = int(float(v))
            if n < 1 or n != float(v):
                raise ConfigError(f"bad-count values must be positive integers, got {v!r}")
            out.append(n)
        else:
            x = float(v)
            if not 0.0 <= x <= 1.0:
                raise ConfigError(f"strength values must lie in [0, 1], got {v!r}")
            out.append(x)
    return out


def apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    cfg = copy_config(cfg)
    m = cfg.metadm
    if axis == "module":
        m.method = "baseline" if value == "neither" else "metadm"
        m.augment_enabled = value in ("good-only", "both")
        m.sharpen_enabled = value in ("bad-only", "both")
    elif axis == "strength-good":
        m.good_strength = value
    elif axis == "strength-bad":
        m.bad_strength = value
    elif axis == "bad-count":
        m.strategy = metadm.Strategy.SINGLE_EXTRA.value
        m.bad_per_class = value
    return cfg.validate()


@dataclass
class AblationRow:
    axis: str
    value: object
    seed: int
    mean_accuracy: float | None
    ci95_halfwidth: float | None
    status: str = "ok"
    other_shots: dict = field(default_factory=dict)


def run_ablation(cfg: RunConfig, axis: str, values=None, seeds=None, checkpoint=None, out_dir=None) -> list:
    """One full pipeline per (seed, value); a failing arm is recorded and skipped.

    All arms share one dataset and one denoiser (trained here with the first
    seed unless ``checkpoint`` is given). Writes ``<axis>.csv``, the plot
    series ``<axis>.json`` and ``<axis>.png`` under ``out_dir``.
    """
    values = parse_values(axis, values if values is not None else default_values(axis))
    seeds = list(seeds) if seeds else [cfg.seed]
    out = Path(out_dir) if out_dir else Path(cfg.output_dir) / f"ablation-{axis}"
    out.mkdir(parents=True, exist_ok=True)

    shared = copy_config(cfg)
    shared.output_dir = str(out / "shared")
    shared.seed = seeds[0]
    ws = Workspace(shared)
    prepare_dataset(shared, ws)
    needs_denoiser = cfg.fsl.include_fake_ways_at_test or any(
        apply_axis(cfg, axis, v).metadm.method == "metadm" for v in values)
    if checkpoint is None and needs_denoiser:
        checkpoint = run_train_diffusion(shared, ws).checkpoint

    rows = []
    for seed in seeds:
        for value in values:
            arm = apply_axis(cfg, axis, value)
            arm.seed = seed
            arm.output_dir = str(out / "arms" / f"seed{seed}" / str(value))
            try:
                res = run_pipeline(arm, checkpoint)
                reports = res["reports"]
                main = reports[arm.fsl.k_shot]
                others = {k: (r.mean_accuracy, r.ci95_halfwidth) for k, r in reports.items() if k != arm.fsl.k_shot}
                rows.append(AblationRow(axis, value, seed, main.mean_accuracy, main.ci95_halfwidth, "ok", others))
            except MetaDMError as exc:
                log.error("ablation arm %s=%s seed %d failed: %s", axis, value, seed, exc)
                rows.append(AblationRow(axis, value, seed, None, None, f"failed: {exc}"))
    write_ablation(rows, out, axis, cfg.fsl.k_shot)
    return rows


def write_ablation(rows, out: Path, axis: str, k_shot: int) -> None:
    extra = sorted({k for r in rows for k in r.other_shots})
    header = ["axis", "value", "seed", "k_shot", "mean_accuracy", "ci95_halfwidth"]
    header += [f"mean_accuracy_{k}shot" for k in extra] + [f"ci95_halfwidth_{k}shot" for k in extra] + ["status"]
    body = []
    for r in rows:
        fmt = lambda x: "" if x is None else repr(x)
        line = [r.axis, r.value, r.seed, k_shot, fmt(r.mean_accuracy), fmt(r.ci95_halfwidth)]
        line += [fmt(r.other_shots.get(k, (None, None))[0]) for k in extra]
        line += [fmt(r.other_shots.get(k, (None, None))[1]) for k in extra]
        body.append(line + [r.status])
    _write_csv(out / f"{axis}.csv", header, body)
    series = []
    for seed in dict.fromkeys(r.seed for r in rows):
        mine = [r for r in rows if r.seed == seed and r.status == "ok"]
        series.append({"seed": seed, "x": [r.value for r in mine], "mean": [r.mean_accuracy for r in mine],
                       "ci95": [r.ci95_halfwidth for r in mine]})
    plot = {"axis": axis, "k_shot": k_shot, "series": series}
    (out / f"{axis}.json").write_text(json.dumps(plot, indent=2) + "\n")
    plotting.ablation_figure(plot, out / f"{axis}.png")
