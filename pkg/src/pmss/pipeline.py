"""Full pipeline: frozen stages + interleaved prompt matchers + seg head.

Insertion point i (1..N) transforms the feature entering stage i; point N+1
sits before the head. The trainable-parameter registry is the single source
of truth for what the optimizer touches, grouped into backbone / prompt /
head for parameter accounting.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import metrics, ops, spm as spm_mod
from .backbone import Backbone, CnnStage, build_from_arch
from .checkpoint import read_checkpoint, write_checkpoint
from .layers import ConvLayer
from .optim import SGD
from .spm import ClassPrior, SemanticMap, SpmParams, init_m0, spm_forward
from .tensor import ShapeError, Tensor, backward, first_nonfinite, no_grad

STRATEGY_TAGS = ("full", "scratch", "head", "bias", "side", "adapter", "prompt_matched")
DEFAULT_STAGE_WEIGHTS = (0.05, 0.1, 0.2, 0.3, 0.4)


class TrainAbort(RuntimeError):
    """Training hit a non-finite loss; carries the first offending op."""

    def __init__(self, step: int, culprit: tuple[str, int, tuple[int, ...]] | None):
        self.step = step
        self.culprit = culprit
        where = (
            f"op {culprit[0]!r} (record {culprit[1]}, shape {culprit[2]})"
            if culprit
            else "loss (no non-finite intermediate found)"
        )
        super().__init__(f"non-finite loss at step {step}; first non-finite tensor: {where}")


@dataclass
class TuningStrategy:
    """Which parameters train; side/adapter carry their bottleneck spec."""

    tag: str
    side_channels: int = 64
    side_groups: int = 4
    prompt_lr_multiplier: float = 1.0

    def __post_init__(self):
        if self.tag not in STRATEGY_TAGS:
            raise ValueError(f"unknown tuning strategy {self.tag!r}; expected one of {STRATEGY_TAGS}")


@dataclass
class LossSpec:
    """Deep-supervision weights: a_i / R per interim map of insertion point i."""

    stage_weights: tuple[float, ...] = DEFAULT_STAGE_WEIGHTS
    r: int = 1
    ignore_index: int | None = None

    def __post_init__(self):
        if any(w < 0 for w in self.stage_weights):
            raise ValueError("stage weights must be nonnegative")
        if self.r < 1:
            raise ValueError(f"loss spec needs R >= 1, got {self.r}")

    def weight_for(self, point: int) -> float:
        if point < 1 or point > len(self.stage_weights):
            raise ValueError(
                f"no loss weight for insertion point {point}; "
                f"got weights for 1..{len(self.stage_weights)}"
            )
        return self.stage_weights[point - 1] / self.r


@dataclass
class BottleneckModule:
    """3x3 grouped down-conv + relu + 1x1 up-conv, used by side/adapter tuning."""

    down: ConvLayer
    up: ConvLayer

    @classmethod
    def build(cls, channels: int, hidden: int, groups: int, rng: np.random.Generator):
        return cls(
            down=ConvLayer.build(channels, hidden, 3, rng, groups=groups),
            up=ConvLayer.build(hidden, channels, 1, rng),
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(ops.relu(ops.conv2d(x, self.down)), self.up)

    def layers(self):
        yield "down", self.down
        yield "up", self.up

    def named_params(self, prefix: str):
        for name, layer in self.layers():
            yield from layer.named_params(f"{prefix}.{name}")

    def set_trainable(self, flag: bool):
        for _, layer in self.layers():
            layer.set_trainable(flag)


@dataclass
class SegHead:
    """Two 3x3 convs then bilinear upsampling to the query resolution."""

    conv1: ConvLayer
    conv2: ConvLayer

    @classmethod
    def build(cls, in_channels: int, num_classes: int, rng, hidden: int = 64) -> "SegHead":
        return cls(
            conv1=ConvLayer.build(in_channels, hidden, 3, rng),
            # damped logit init: gentler first losses for every strategy
            conv2=ConvLayer.build(hidden, num_classes, 3, rng, init_scale=0.2),
        )

    @property
    def num_classes(self) -> int:
        return self.conv2.out_channels

    def forward(self, x: Tensor, out_h: int, out_w: int) -> Tensor:
        logits = ops.conv2d(ops.relu(ops.conv2d(x, self.conv1)), self.conv2)
        return ops.bilinear_resize(logits, out_h, out_w)

    def layers(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2

    def named_params(self, prefix: str = "head"):
        for name, layer in self.layers():
            yield from layer.named_params(f"{prefix}.{name}")

    def set_trainable(self, flag: bool):
        for _, layer in self.layers():
            layer.set_trainable(flag)


@dataclass
class RegistryEntry:
    name: str
    group: str  # backbone | prompt | head
    tensor: Tensor


class Registry:
    """Enumerated trainable set; exactly what the optimizer may touch."""

    def __init__(self, entries: list[RegistryEntry]):
        self.entries = entries

    def tensors(self) -> list[Tensor]:
        return [e.tensor for e in self.entries]

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def group_tensors(self, group: str) -> list[Tensor]:
        return [e.tensor for e in self.entries if e.group == group]

    def counts(self) -> dict[str, int]:
        out = {"backbone": 0, "prompt": 0, "head": 0}
        for e in self.entries:
            out[e.group] += e.tensor.size
        return out

    def __len__(self) -> int:
        return len(self.entries)


class StagePipeline:
    """Frozen backbone + optional matcher per insertion point + trainable head."""

    def __init__(
        self,
        backbone: Backbone,
        head: SegHead,
        spms: dict[int, SpmParams],
        r: int,
        prior: ClassPrior | None,
        strategy: TuningStrategy,
        loss_spec: LossSpec,
        seed: int,
        spm_config: dict,
        head_hidden: int,
    ):
        self.backbone = backbone
        self.head = head
        self.spms = dict(sorted(spms.items()))
        self.r = r
        self.prior = prior
        self.strategy = strategy
        self.loss_spec = loss_spec
        self.seed = seed
        self.spm_config = spm_config
        self.head_hidden = head_hidden
        self.side_modules: dict[tuple[int, int], BottleneckModule] = {}
        self.adapter_modules: dict[tuple[int, int], BottleneckModule] = {}
        self.registry: Registry | None = None

    # -- construction ------------------------------------------------------

    @classmethod
    def build(
        cls,
        backbone: Backbone,
        num_classes: int,
        prior: ClassPrior | None,
        spm_stages: tuple[int, ...] = (),
        r: int = 1,
        seed: int = 0,
        strategy: TuningStrategy | None = None,
        loss_spec: LossSpec | None = None,
        spm_c: int = 256,
        dilations: tuple[int, ...] = spm_mod.DEFAULT_DILATIONS,
        pdc_groups: int | None = None,
        conv1x1_groups: int = 1,
        relu_inside: bool = True,
        head_hidden: int = 64,
    ) -> "StagePipeline":
        strategy = strategy or TuningStrategy(tag="prompt_matched")
        if r < 1:
            raise ValueError(f"recurrent iteration count must be >= 1, got {r}")
        spm_stages = tuple(sorted(set(int(s) for s in spm_stages)))
        n = backbone.n_stages
        if spm_stages and strategy.tag != "prompt_matched":
            raise ValueError(f"matcher stages configured but strategy is {strategy.tag!r}")
        for s in spm_stages:
            if not 1 <= s <= n + 1:
                raise ValueError(f"insertion point {s} outside 1..{n + 1}")
        if spm_stages and prior is None:
            raise ValueError("prompt_matched pipelines need a class prior for the initial map")
        if loss_spec is None:
            loss_spec = LossSpec()
        loss_spec = dataclasses.replace(loss_spec, r=r)
        for s in spm_stages:
            loss_spec.weight_for(s)  # missing weights reject at build

        rng = np.random.default_rng(seed)
        bb_channels = backbone.stage_channels()
        head = SegHead.build(bb_channels[-1], num_classes, rng, hidden=head_hidden)
        spms: dict[int, SpmParams] = {}
        spm_config = {
            "c": spm_c,
            "dilations": tuple(dilations),
            "pdc_groups": pdc_groups,
            "conv1x1_groups": conv1x1_groups,
            "relu_inside": relu_inside,
        }
        for s in spm_stages:
            spms[s] = SpmParams.build(
                c_f=bb_channels[s - 1],
                k=num_classes,
                rng=rng,
                c=spm_c,
                dilations=tuple(dilations),
                pdc_groups=pdc_groups,
                conv1x1_groups=conv1x1_groups,
                relu_inside=relu_inside,
            )
        pipe = cls(
            backbone, head, spms, r, prior, strategy, loss_spec, seed, spm_config, head_hidden
        )
        if strategy.tag in ("side", "adapter"):
            pipe._build_bottlenecks(rng)
        return pipe

    def _build_bottlenecks(self, rng: np.random.Generator) -> None:
        target = self.side_modules if self.strategy.tag == "side" else self.adapter_modules
        hidden, groups = self.strategy.side_channels, self.strategy.side_groups
        for i, stage in enumerate(self.backbone.stages, start=1):
            if not isinstance(stage, CnnStage):
                raise ValueError("side/adapter tuning requires residual CNN stages")
            for b, block in enumerate(stage.blocks):
                target[(i, b)] = BottleneckModule.build(block.channels, hidden, groups, rng)

    # -- parameter enumeration ---------------------------------------------

    def named_param_entries(self) -> Iterator[tuple[str, str, Tensor]]:
        """Every tensor in the pipeline as (name, group, tensor)."""
        for name, t in self.backbone.named_params():
            yield name, "backbone", t
        for point, params in self.spms.items():
            for name, t in params.named_params(f"spm{point}"):
                yield name, "prompt", t
        for key, mods in (("side", self.side_modules), ("adapter", self.adapter_modules)):
            for (i, b), mod in sorted(mods.items()):
                for name, t in mod.named_params(f"{key}.stage{i}.block{b}"):
                    yield name, "prompt", t
        for name, t in self.head.named_params():
            yield name, "head", t

    def entries(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, _, t in self.named_param_entries()}

    # -- strategy ------------------------------------------------------------

    def apply_strategy(self) -> Registry:
        """Set trainability to match the strategy and enumerate the registry."""
        tag = self.strategy.tag
        if tag in ("full", "scratch"):
            if tag == "scratch":
                arch = dict(self.backbone.arch)
                arch["seed"] = (int(arch["seed"]) * 1000003 + self.seed + 1) % (2**31)
                fresh = build_from_arch(arch)
                fresh.provenance = f"scratch-reinit(seed={arch['seed']})"
                self.backbone = fresh
            self.backbone.set_trainable(True)
        else:
            self.backbone.freeze()
        if tag == "bias":
            for layer in self.backbone.layer_values():
                layer.bias.requires_grad = True
                layer.bias._needs = True
        for params in self.spms.values():
            params.set_trainable(tag == "prompt_matched")
        for mods in (self.side_modules, self.adapter_modules):
            for mod in mods.values():
                mod.set_trainable(tag in ("side", "adapter"))
        self.head.set_trainable(True)

        entries = [
            RegistryEntry(name, group, t)
            for name, group, t in self.named_param_entries()
            if t.requires_grad
        ]
        self.registry = Registry(entries)
        return self.registry

    def param_counts(self) -> dict[str, int]:
        """Trainable counts by group; requires an applied strategy."""
        if self.registry is None:
            raise RuntimeError("apply_strategy() before counting trainable parameters")
        return self.registry.counts()

    # -- forward / loss ------------------------------------------------------

    def forward(self, images: Tensor | np.ndarray) -> tuple[Tensor, dict[int, list[SemanticMap]]]:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4:
            raise ShapeError(f"pipeline input must be NxCxHxW, got shape {x.shape}")
        n, _, img_h, img_w = x.shape
        hook = self._block_hook if (self.side_modules or self.adapter_modules) else None

        try:
            f = self.backbone.run_stage(0, x)
        except ShapeError as e:
            raise ShapeError(f"stem: {e}") from e
        m: SemanticMap | None = None
        if self.spms:
            m = init_m0(self.prior, n, f.shape[2], f.shape[3])
        interim: dict[int, list[SemanticMap]] = {}
        for i in range(1, self.backbone.n_stages + 1):
            if i in self.spms:
                try:
                    f, m, maps = spm_forward(f, m, self.spms[i], self.r)
                except ShapeError as e:
                    raise ShapeError(f"matcher at insertion point {i}: {e}") from e
                interim[i] = maps
            try:
                f = self.backbone.run_stage(i, f, hook)
            except ShapeError as e:
                raise ShapeError(f"stage {i}: {e}") from e
        head_point = self.backbone.n_stages + 1
        if head_point in self.spms:
            try:
                f, m, maps = spm_forward(f, m, self.spms[head_point], self.r)
            except ShapeError as e:
                raise ShapeError(f"matcher at insertion point {head_point}: {e}") from e
            interim[head_point] = maps
        logits = self.head.forward(f, img_h, img_w)
        return logits, interim

    def _block_hook(self, stage_idx: int, block_idx: int, x_in: Tensor, x_out: Tensor) -> Tensor:
        side = self.side_modules.get((stage_idx, block_idx))
        if side is not None:
            x_out = ops.add(x_out, side.forward(x_in))
        adapter = self.adapter_modules.get((stage_idx, block_idx))
        if adapter is not None:
            x_out = ops.add(x_out, adapter.forward(x_out))
        return x_out

    def total_loss(
        self,
        logits: Tensor,
        interim: dict[int, list[SemanticMap]],
        target: np.ndarray,
    ) -> Tensor:
        """CE on the head logits plus (a_i / R)-weighted CE on every interim map."""
        spec = self.loss_spec
        loss = ops.cross_entropy(logits, target, spec.ignore_index, from_logits=True)
        h, w = logits.shape[2], logits.shape[3]
        for point, maps in sorted(interim.items()):
            a = spec.weight_for(point)
            if a == 0.0:
                continue
            for m in maps:
                up = ops.bilinear_resize(m.values, h, w)
                term = ops.cross_entropy(up, target, spec.ignore_index, from_logits=False)
                loss = ops.add(loss, ops.scale(term, a))
        return loss

    # -- inference / persistence ---------------------------------------------

    def predict(self, images: np.ndarray, batch: int = 16) -> np.ndarray:
        """Argmax labels for a stack of images, taped off."""
        out = []
        with no_grad():
            for lo in range(0, images.shape[0], batch):
                logits, _ = self.forward(Tensor(images[lo : lo + batch]))
                out.append(logits.data.argmax(axis=1))
        return np.concatenate(out, axis=0)

    def config_echo(self) -> dict:
        return {
            "backbone": dict(self.backbone.arch),
            "backbone_provenance": self.backbone.provenance,
            "num_classes": self.head.num_classes,
            "spm": {
                "stages": list(self.spms.keys()),
                "C": self.spm_config["c"],
                "R": self.r,
                "dilations": list(self.spm_config["dilations"]),
                "pdc_groups": self.spm_config["pdc_groups"],
                "conv1x1_groups": self.spm_config["conv1x1_groups"],
                "relu_inside": self.spm_config["relu_inside"],
            },
            "strategy": {
                "tag": self.strategy.tag,
                "side_channels": self.strategy.side_channels,
                "side_groups": self.strategy.side_groups,
                "prompt_lr_multiplier": self.strategy.prompt_lr_multiplier,
            },
            "loss": {
                "weights": list(self.loss_spec.stage_weights),
                "ignore_index": self.loss_spec.ignore_index,
            },
            "head_hidden": self.head_hidden,
            "seed": self.seed,
            "prior": list(self.prior.probs) if self.prior is not None else None,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        write_checkpoint(path, self.entries())
        path.with_suffix(".json").write_text(json.dumps(self.config_echo(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "StagePipeline":
        path = Path(path)
        echo = json.loads(path.with_suffix(".json").read_text())
        bb = build_from_arch(echo["backbone"])
        bb.provenance = echo.get("backbone_provenance", "unknown")
        prior = ClassPrior(np.array(echo["prior"])) if echo.get("prior") else None
        pipe = cls.build(
            backbone=bb,
            num_classes=echo["num_classes"],
            prior=prior,
            spm_stages=tuple(echo["spm"]["stages"]),
            r=echo["spm"]["R"],
            seed=echo["seed"],
            strategy=TuningStrategy(
                tag=echo["strategy"]["tag"],
                side_channels=echo["strategy"]["side_channels"],
                side_groups=echo["strategy"]["side_groups"],
                prompt_lr_multiplier=echo["strategy"]["prompt_lr_multiplier"],
            ),
            loss_spec=LossSpec(
                stage_weights=tuple(echo["loss"]["weights"]),
                ignore_index=echo["loss"]["ignore_index"],
            ),
            spm_c=echo["spm"]["C"],
            dilations=tuple(echo["spm"]["dilations"]),
            pdc_groups=echo["spm"]["pdc_groups"],
            conv1x1_groups=echo["spm"]["conv1x1_groups"],
            relu_inside=echo["spm"]["relu_inside"],
            head_hidden=echo["head_hidden"],
        )
        entries = read_checkpoint(path)
        for name, _, t in pipe.named_param_entries():
            if name not in entries:
                raise KeyError(f"checkpoint missing entry {name!r}")
            if entries[name].shape != t.shape:
                raise ShapeError(f"entry {name!r} shape {entries[name].shape} != {t.shape}")
            t.data = entries[name].astype(np.float64)
        pipe.apply_strategy()
        return pipe


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)


def evaluate(
    pipeline: StagePipeline,
    dataset,
    batch: int = 16,
    dice_class: int | None = None,
) -> dict:
    preds = pipeline.predict(dataset.images, batch=batch)
    per_class, mean = metrics.miou(
        preds, dataset.labels, dataset.num_classes, dataset.ignore_index
    )
    out = {
        "miou": mean,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
    }
    if dice_class is not None:
        out["dice"] = metrics.dice(preds, dataset.labels, dice_class)
    return out


def train(
    pipeline: StagePipeline,
    dataset,
    steps: int,
    lr: float,
    seed: int = 0,
    batch: int = 4,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    val_dataset=None,
    eval_every: int = 0,
    dice_class: int | None = None,
) -> TrainReport:
    """Deterministic SGD loop over uniformly sampled batches.

    Aborts with ``TrainAbort`` (naming the first non-finite tensor) if the
    loss leaves the reals. Evaluation runs every ``eval_every`` steps when a
    validation set is given, and always once at the end.
    """
    if pipeline.registry is None:
        raise RuntimeError("apply_strategy() before training")
    if dataset.images.shape[0] == 0:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(seed)
    prompt = pipeline.registry.group_tensors("prompt")
    rest = [t for t in pipeline.registry.tensors() if t not in prompt]
    mult = pipeline.strategy.prompt_lr_multiplier
    opt = SGD(
        param_groups=[(rest, lr), (prompt, lr * mult)],
        momentum=momentum,
        weight_decay=weight_decay,
    )
    report = TrainReport()
    for step in range(1, steps + 1):
        idx = rng.integers(0, dataset.images.shape[0], size=batch)
        logits, interim = pipeline.forward(Tensor(dataset.images[idx]))
        loss = pipeline.total_loss(logits, interim, dataset.labels[idx])
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainAbort(step, first_nonfinite())
        backward(loss)
        opt.step()
        rec = {"step": step, "loss": loss_val}
        if val_dataset is not None and eval_every and step % eval_every == 0:
            ev = evaluate(pipeline, val_dataset, dice_class=dice_class)
            rec["miou"] = ev["miou"]
            if "dice" in ev:
                rec["dice"] = ev["dice"]
        report.records.append(rec)
    if val_dataset is not None:
        report.final = evaluate(pipeline, val_dataset, dice_class=dice_class)
    return report
