"""Config-driven runs and the standard experiment protocols.

Everything here is a pure function of (config, seed, input files): datasets
are generated or loaded deterministically, backbones come from a checkpoint,
an inline source-pretraining recipe, or seeded random init, and every
repetition of a sweep derives its seeds from the base seed by offset.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import ops
from .backbone import Backbone, build_toy_cnn, build_toy_vit, pretrain_source
from .config import DataConfig, RunConfig
from .gradcheck import GradcheckReport, gradcheck
from .layers import ConvLayer, LinearLayer
from .pipeline import (
    LossSpec,
    StagePipeline,
    TrainReport,
    TuningStrategy,
    evaluate,
    train,
)
from .spm import ClassPrior, SpmParams, class_prior, spm_forward
from .tensor import Tensor


# ---------------------------------------------------------------------------
# config resolution

def resolve_datasets(dc: DataConfig) -> tuple[data_mod.SegDataset, data_mod.SegDataset | None]:
    if dc.dir:
        root = Path(dc.dir)
        if (root / "train").is_dir():
            train_ds = data_mod.load_dataset(root / "train")
            val_ds = data_mod.load_dataset(root / "val") if (root / "val").is_dir() else None
            return train_ds, val_ds
        return data_mod.load_dataset(root), None
    spec = dc.to_spec()
    return data_mod.generate(spec)


def build_backbone(cfg: RunConfig) -> Backbone:
    bc = cfg.backbone
    if bc.checkpoint:
        return Backbone.load(bc.checkpoint)
    if bc.kind == "cnn":
        bb = build_toy_cnn(bc.channels, bc.depths, bc.seed)
    else:
        bb = build_toy_vit(
            bc.embed_dim, bc.layers, bc.patch, bc.seed, bc.n_stages, bc.image_size
        )
    if bc.pretrain is not None:
        source_train, _ = resolve_datasets(bc.pretrain.data)
        pretrain_source(
            bb,
            source_train,
            steps=bc.pretrain.steps,
            lr=bc.pretrain.lr,
            batch=bc.pretrain.batch,
            seed=bc.pretrain.seed,
        )
    return bb


def build_pipeline(cfg: RunConfig, bb: Backbone, train_ds: data_mod.SegDataset) -> StagePipeline:
    prior = None
    if cfg.spm.stages:
        prior = class_prior(train_ds.labels, train_ds.num_classes, cfg.loss.ignore_index)
    pipe = StagePipeline.build(
        backbone=bb,
        num_classes=train_ds.num_classes,
        prior=prior,
        spm_stages=cfg.spm.stages,
        r=cfg.spm.r,
        seed=cfg.train.seed,
        strategy=TuningStrategy(
            tag=cfg.strategy.tag,
            side_channels=cfg.strategy.side_channels,
            side_groups=cfg.strategy.side_groups,
            prompt_lr_multiplier=cfg.strategy.prompt_lr_multiplier,
        ),
        loss_spec=LossSpec(
            stage_weights=cfg.loss.weights, ignore_index=cfg.loss.ignore_index
        ),
        spm_c=cfg.spm.c,
        dilations=cfg.spm.dilations,
        pdc_groups=cfg.spm.pdc_groups,
        conv1x1_groups=cfg.spm.conv1x1_groups,
        relu_inside=cfg.spm.relu_inside,
        head_hidden=cfg.head_hidden,
    )
    pipe.apply_strategy()
    return pipe


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))


@dataclass
class RunResult:
    pipeline: StagePipeline
    report: TrainReport
    manifest: dict
    train_ds: data_mod.SegDataset
    val_ds: data_mod.SegDataset | None


def _utc_stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _input_hash(resolved: dict, train_ds, bb: Backbone) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(resolved, sort_keys=True).encode())
    h.update(train_ds.sha256().encode())
    h.update(bb.state_hash().encode())
    return h.hexdigest()


def run_training(cfg: RunConfig, out_dir: str | Path | None = None, config_path: str = "<inline>") -> RunResult:
    """Execute one training run; optionally persist the full run directory."""
    started = _utc_stamp()
    train_ds, val_ds = resolve_datasets(cfg.data)
    bb = build_backbone(cfg)
    pipe = build_pipeline(cfg, bb, train_ds)
    resolved = cfg.to_json_dict()
    report = train(
        pipe,
        train_ds,
        steps=cfg.train.steps,
        lr=cfg.train.lr,
        seed=cfg.train.seed,
        batch=cfg.train.batch,
        momentum=cfg.train.momentum,
        weight_decay=cfg.train.weight_decay,
        val_dataset=val_ds,
        eval_every=cfg.train.eval_every,
        dice_class=cfg.train.dice_class,
    )
    manifest = {
        "config_path": str(config_path),
        "resolved_config": resolved,
        "seed": cfg.train.seed,
        "started": started,
        "finished": _utc_stamp(),
        "input_hash": _input_hash(resolved, train_ds, bb),
        "out_dir": str(out_dir) if out_dir else "",
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").unlink(missing_ok=True)  # stale failure marker
        pipe.save(out / "pipeline.ckpt")
        with (out / "report.ndjson").open("w") as fh:
            for rec in report.records:
                fh.write(json.dumps(rec) + "\n")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if report.final:
            (out / "metrics.json").write_text(json.dumps(report.final, indent=2))
    return RunResult(pipe, report, manifest, train_ds, val_ds)


# ---------------------------------------------------------------------------
# protocols

@dataclass
class SweepRow:
    label: str
    seeds: list[int]
    per_seed_miou: list[float]
    mean_miou: float
    std_miou: float
    prompt_params: int
    mean_dice: float | None = None


def _run_cell(cfg: RunConfig, bb: Backbone, train_ds, val_ds, seeds) -> tuple[list[float], int]:
    """Train one sweep cell once per seed on a shared frozen backbone."""
    mious, prompt_count = [], 0
    for seed in seeds:
        cell_cfg = with_seed(cfg, seed)
        pipe = build_pipeline(cell_cfg, bb, train_ds)
        prompt_count = pipe.param_counts()["prompt"]
        train(
            pipe,
            train_ds,
            steps=cell_cfg.train.steps,
            lr=cell_cfg.train.lr,
            seed=seed,
            batch=cell_cfg.train.batch,
            momentum=cell_cfg.train.momentum,
            weight_decay=cell_cfg.train.weight_decay,
        )
        mious.append(evaluate(pipe, val_ds)["miou"])
    return mious, prompt_count


def ablate(cfg: RunConfig, axis: str, n_seeds: int = 3) -> list[SweepRow]:
    """Sweep one ablation axis, n_seeds repetitions per cell."""
    train_ds, val_ds = resolve_datasets(cfg.data)
    if val_ds is None:
        raise ValueError("ablation sweeps need a validation split")
    bb = build_backbone(cfg)
    bb.freeze()
    seeds = [cfg.train.seed + k for k in range(n_seeds)]
    n_points = bb.n_stages + 1

    cells: list[tuple[str, RunConfig]] = []
    if axis == "stages":
        for j in range(1, n_points + 1):
            spm = dataclasses.replace(cfg.spm, stages=tuple(range(1, j + 1)))
            label = "1" if j == 1 else f"1-{j}"
            cells.append((label, dataclasses.replace(cfg, spm=spm)))
    elif axis == "recurrent":
        for r in (1, 2, 3):
            cells.append((f"R={r}", dataclasses.replace(cfg, spm=dataclasses.replace(cfg.spm, r=r))))
    elif axis == "spl":
        cells.append(("with-interim-supervision", cfg))
        zero = dataclasses.replace(cfg.loss, weights=tuple(0.0 for _ in cfg.loss.weights))
        cells.append(("without-interim-supervision", dataclasses.replace(cfg, loss=zero)))
    elif axis == "lscm":
        cells.append(("dilations-1-2-3-4", dataclasses.replace(cfg, spm=dataclasses.replace(cfg.spm, dilations=(1, 2, 3, 4)))))
        cells.append(("dilations-all-1", dataclasses.replace(cfg, spm=dataclasses.replace(cfg.spm, dilations=(1, 1, 1, 1)))))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")

    rows = []
    for label, cell_cfg in cells:
        mious, prompt_count = _run_cell(cell_cfg, bb, train_ds, val_ds, seeds)
        rows.append(
            SweepRow(
                label=label,
                seeds=seeds,
                per_seed_miou=[float(v) for v in mious],
                mean_miou=float(np.mean(mious)),
                std_miou=float(np.std(mious)),
                prompt_params=prompt_count,
            )
        )
    return rows


@dataclass
class TransferResult:
    prompt_mious: list[float]
    head_mious: list[float]

    @property
    def prompt_mean(self) -> float:
        return float(np.mean(self.prompt_mious))

    @property
    def head_mean(self) -> float:
        return float(np.mean(self.head_mious))

    @property
    def gap(self) -> float:
        return self.prompt_mean - self.head_mean


def transfer_experiment(cfg: RunConfig, n_seeds: int = 3) -> TransferResult:
    """Prompt-matched vs head-tuning on the same frozen backbone and budget."""
    train_ds, val_ds = resolve_datasets(cfg.data)
    if val_ds is None:
        raise ValueError("transfer experiment needs a validation split")
    bb = build_backbone(cfg)
    bb.freeze()
    seeds = [cfg.train.seed + k for k in range(n_seeds)]

    prompt_cfg = cfg
    head_cfg = dataclasses.replace(
        cfg,
        spm=dataclasses.replace(cfg.spm, stages=()),
        strategy=dataclasses.replace(cfg.strategy, tag="head"),
    )
    prompt_mious, _ = _run_cell(prompt_cfg, bb, train_ds, val_ds, seeds)
    head_mious, _ = _run_cell(head_cfg, bb, train_ds, val_ds, seeds)
    return TransferResult(prompt_mious, head_mious)


@dataclass
class OneShotResult:
    dices: list[float]
    mean: float
    std: float
    formatted: str  # percent, Table-style "76.07+/-0.57" with a real plus-minus


def one_shot_protocol(cfg: RunConfig, reps: int = 5, foreground_class: int = 1) -> OneShotResult:
    """Five one-shot repetitions on a thin-structure task, Dice mean +/- std.

    Each repetition draws a fresh single training sample from the pooled
    dataset (train and val splits merged), trains from the config's budget,
    and scores Dice on the remaining samples.
    """
    train_ds, val_ds = resolve_datasets(cfg.data)
    pool = train_ds
    if val_ds is not None and len(val_ds):
        pool = data_mod.SegDataset(
            np.concatenate([train_ds.images, val_ds.images]),
            np.concatenate([train_ds.labels, val_ds.labels]),
            train_ds.num_classes,
            train_ds.ignore_index,
            train_ds.tag,
        )
    bb = build_backbone(cfg)
    bb.freeze()
    dices = []
    for rep in range(reps):
        one, rest = data_mod.one_shot_split(pool, seed=cfg.train.seed + rep)
        rep_cfg = with_seed(cfg, cfg.train.seed + rep)
        pipe = build_pipeline(rep_cfg, bb, one)
        train(
            pipe,
            one,
            steps=rep_cfg.train.steps,
            lr=rep_cfg.train.lr,
            seed=rep_cfg.train.seed,
            batch=rep_cfg.train.batch,
            momentum=rep_cfg.train.momentum,
        )
        dices.append(evaluate(pipe, rest, dice_class=foreground_class)["dice"])
    mean = float(np.mean(dices))
    std = float(np.std(dices))
    return OneShotResult(
        dices=[float(d) for d in dices],
        mean=mean,
        std=std,
        formatted=f"{100 * mean:.2f}±{100 * std:.2f}",
    )


# ---------------------------------------------------------------------------
# parameter-count sweeps

def count_table(cfg: RunConfig) -> dict:
    """Per-strategy trainable counts plus the prompted-stage sweep."""
    bb = build_backbone_arch_only(cfg)
    if cfg.data.dir:
        meta = json.loads((Path(cfg.data.dir) / "meta.json").read_text())
        num_classes = meta["num_classes"]
    else:
        num_classes = cfg.data.to_spec().num_classes
    dummy_prior = ClassPrior(np.full(num_classes, 1.0 / num_classes))

    strategies = {}
    for tag in ("full", "scratch", "head", "bias", "side", "adapter", "prompt_matched"):
        stages = cfg.spm.stages if tag == "prompt_matched" else ()
        if tag == "prompt_matched" and not stages:
            stages = tuple(range(1, bb.n_stages + 2))
        try:
            pipe = StagePipeline.build(
                backbone=bb,
                num_classes=num_classes,
                prior=dummy_prior if stages else None,
                spm_stages=stages,
                r=cfg.spm.r,
                seed=0,
                strategy=TuningStrategy(tag=tag),
                loss_spec=LossSpec(stage_weights=cfg.loss.weights),
                spm_c=cfg.spm.c,
                dilations=cfg.spm.dilations,
                pdc_groups=cfg.spm.pdc_groups,
                conv1x1_groups=cfg.spm.conv1x1_groups,
                head_hidden=cfg.head_hidden,
            )
        except ValueError:
            continue  # side/adapter reject non-CNN backbones
        pipe.apply_strategy()
        strategies[tag] = pipe.param_counts()

    sweep = []
    for j in range(1, bb.n_stages + 2):
        stages = tuple(range(1, j + 1))
        pipe = StagePipeline.build(
            backbone=bb,
            num_classes=num_classes,
            prior=dummy_prior,
            spm_stages=stages,
            r=cfg.spm.r,
            seed=0,
            strategy=TuningStrategy(tag="prompt_matched"),
            loss_spec=LossSpec(stage_weights=cfg.loss.weights),
            spm_c=cfg.spm.c,
            dilations=cfg.spm.dilations,
            pdc_groups=cfg.spm.pdc_groups,
            conv1x1_groups=cfg.spm.conv1x1_groups,
            head_hidden=cfg.head_hidden,
        )
        pipe.apply_strategy()
        sweep.append({"stages": list(stages), "prompt": pipe.param_counts()["prompt"]})
    return {"strategies": strategies, "stage_sweep": sweep}


def build_backbone_arch_only(cfg: RunConfig) -> Backbone:
    """Backbone for counting: architecture only, no pretraining run."""
    bc = cfg.backbone
    if bc.checkpoint:
        return Backbone.load(bc.checkpoint)
    if bc.kind == "cnn":
        return build_toy_cnn(bc.channels, bc.depths, bc.seed)
    return build_toy_vit(bc.embed_dim, bc.layers, bc.patch, bc.seed, bc.n_stages, bc.image_size)


def brute_force_counts(pipe: StagePipeline) -> dict[str, int]:
    """Independent walk over every trainable tensor, summing shape products."""
    out = {"backbone": 0, "prompt": 0, "head": 0}
    for name, group, t in pipe.named_param_entries():
        if t.requires_grad:
            total = 1
            for extent in t.shape:
                total *= extent
            out[group] += total
    return out


# ---------------------------------------------------------------------------
# gradcheck scopes

def _layer_checks(seed: int) -> list[GradcheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def t(shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    conv3 = ConvLayer.build(4, 6, 3, rng, dilation=1 + seed % 4, groups=2)
    x = t((2, 4, 5, 6))
    reports.append(gradcheck(lambda a, w, b: ops.sum_all(ops.mul(ops.conv2d(a, conv3), ops.conv2d(a, conv3))), [x, conv3.weight, conv3.bias]))
    conv1 = ConvLayer.build(4, 4, 1, rng, groups=2 if seed % 2 else 1)
    reports.append(gradcheck(lambda a, w, b: ops.sum_all(ops.mul(ops.conv2d(a, conv1), ops.conv2d(a, conv1))), [t((1, 4, 4, 4)), conv1.weight, conv1.bias]))
    weights = Tensor(rng.standard_normal((1, 3, 4, 4)))
    reports.append(gradcheck(lambda a: ops.sum_all(ops.mul(ops.softmax_channels(a), weights)), [t((1, 3, 4, 4))]))
    reports.append(gradcheck(lambda a: ops.sum_all(ops.mul(ops.bilinear_resize(a, 5, 7), ops.bilinear_resize(a, 5, 7))), [t((1, 2, 3, 4))]))
    reports.append(gradcheck(lambda a: ops.sum_all(ops.mul(ops.avg_pool2(a), ops.avg_pool2(a))), [t((1, 2, 5, 5))]))
    a, b = t((1, 2, 3, 3)), t((1, 3, 3, 3))
    reports.append(gradcheck(lambda u, v: ops.sum_all(ops.mul(ops.concat_channels(u, v), ops.concat_channels(u, v))), [a, b]))
    reports.append(gradcheck(lambda u: ops.sum_all(ops.mul(ops.slice_channels(u, 1, 3), ops.slice_channels(u, 1, 3))), [t((1, 4, 3, 3))]))
    labels = rng.integers(0, 3, size=(1, 4, 4))
    reports.append(gradcheck(lambda l: ops.cross_entropy(l, labels, from_logits=True), [t((1, 3, 4, 4))]))
    reports.append(gradcheck(lambda l: ops.cross_entropy(ops.softmax_channels(l), labels, from_logits=False), [t((1, 3, 4, 4))]))
    fc = LinearLayer.build(5, 3, rng)
    reports.append(gradcheck(lambda u, w, bb_: ops.sum_all(ops.mul(ops.linear(u, fc), ops.linear(u, fc))), [t((2, 5)), fc.weight, fc.bias]))
    reports.append(gradcheck(lambda u: ops.sum_all(ops.mul(ops.expand_spatial(ops.global_max_pool(u), 3, 3), ops.expand_spatial(ops.global_max_pool(u), 3, 3))), [t((1, 3, 3, 3))]))
    return reports


def _spm_checks(seed: int) -> list[GradcheckReport]:
    # first seed exercises a full 1x8x6x6 / K=3 iteration; the rest draw
    # randomized smaller shapes to keep 20 seeds affordable
    rng = np.random.default_rng(1000 + seed)
    if seed == 0:
        c_f, k, hw = 8, 3, 6
    else:
        c_f = int(rng.choice([4, 6]))
        k = int(rng.choice([2, 3]))
        hw = int(rng.integers(4, 6))
    c = 8
    params = SpmParams.build(c_f, k, rng, c=c)
    f = Tensor(rng.standard_normal((1, c_f, hw, hw)), requires_grad=True, name="feature")
    m0 = ops.softmax_channels(Tensor(rng.standard_normal((1, k, hw, hw))))
    wf = Tensor(rng.standard_normal((1, c_f, hw, hw)))
    wm = Tensor(rng.standard_normal((1, k, hw, hw)))

    from .spm import SemanticMap

    def full_iteration(feat, *_params):
        f_out, m_out, _ = spm_forward(feat, SemanticMap(m0), params, r=1)
        return ops.add(ops.sum_all(ops.mul(f_out, wf)), ops.sum_all(ops.mul(m_out.values, wm)))

    targets = [f]
    for _, layer in params.layers():
        targets.extend([layer.weight, layer.bias])
    return [gradcheck(full_iteration, targets)]


def _pipeline_checks(seed: int) -> list[GradcheckReport]:
    rng = np.random.default_rng(2000 + seed)
    bb = build_toy_cnn(channels=(8, 16), stage_depths=(1, 1), seed=seed)
    bb.freeze()
    prior = ClassPrior(np.array([0.5, 0.3, 0.2]))
    pipe = StagePipeline.build(
        backbone=bb,
        num_classes=3,
        prior=prior,
        spm_stages=(1, 2, 3),
        r=2,
        seed=seed,
        spm_c=8,
        loss_spec=LossSpec(stage_weights=(0.2, 0.3, 0.4)),
        head_hidden=8,
    )
    pipe.apply_strategy()
    images = rng.random((1, 3, 16, 16))
    labels = rng.integers(0, 3, size=(1, 16, 16))

    def loss_fn(*_targets):
        logits, interim = pipe.forward(Tensor(images))
        return pipe.total_loss(logits, interim, labels)

    targets = []
    for point, params in pipe.spms.items():
        targets.extend([params.b2_out.weight, params.b1_out.bias, params.b2_out.bias])
    targets.append(pipe.head.conv2.bias)
    return [gradcheck(loss_fn, targets, rel_tol=1e-3)]


GRADCHECK_SCOPES = {
    "layers": (_layer_checks, 20, 1e-4),
    "spm": (_spm_checks, 20, 1e-4),
    "pipeline": (_pipeline_checks, 2, 1e-3),
}


def gradcheck_scope(scope: str, seed: int = 0) -> tuple[bool, list[dict]]:
    """Run one gradcheck scope; rows carry per-check worst errors."""
    if scope not in GRADCHECK_SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    fn, n_seeds, tol = GRADCHECK_SCOPES[scope]
    rows, ok = [], True
    for s in range(seed, seed + n_seeds):
        for rep in fn(s):
            passed = rep.max_rel_err < tol
            ok &= passed
            rows.append(
                {
                    "scope": scope,
                    "seed": s,
                    "max_rel_err": rep.max_rel_err,
                    "tol": tol,
                    "passed": passed,
                    "entries": [
                        {"name": e.name, "max_rel_err": e.max_rel_err} for e in rep.entries
                    ],
                }
            )
    return ok, rows
