"""Stage-partitioned feature extractors with freezable weights.

Two desk-scale architectures share one interface: a residual CNN whose
stages halve resolution, and an attention-free token-mixing network whose
stages keep the patch grid. Stage boundaries expose NxCxHxW features in both
cases, so prompt modules slot in without knowing the architecture. Residual
branches are initialized at 1/10 scale (there are no norm layers) to keep
deep chains stable; the final prompt projections elsewhere rely on the same
mechanism at scale 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import ops
from .checkpoint import read_checkpoint, sha256_entries, write_checkpoint
from .layers import ConvLayer, LinearLayer
from .tensor import ShapeError, Tensor

BlockHook = Callable[[int, int, Tensor, Tensor], Tensor]
RESIDUAL_INIT_SCALE = 0.1


@dataclass
class ResidualBlock:
    """x + conv3x3(relu(conv3x3(x))), channel-preserving."""

    conv1: ConvLayer
    conv2: ConvLayer

    @classmethod
    def build(cls, channels: int, rng: np.random.Generator) -> "ResidualBlock":
        return cls(
            conv1=ConvLayer.build(channels, channels, 3, rng),
            conv2=ConvLayer.build(channels, channels, 3, rng, init_scale=RESIDUAL_INIT_SCALE),
        )

    @property
    def channels(self) -> int:
        return self.conv1.in_channels

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, ops.conv2d(ops.relu(ops.conv2d(x, self.conv1)), self.conv2))

    def layers(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2


@dataclass
class CnnStage:
    """Optional 2x pool + channel projection, then residual blocks."""

    index: int
    in_channels: int
    out_channels: int
    stride: int
    proj: ConvLayer | None
    blocks: list[ResidualBlock]

    def forward(self, x: Tensor, block_hook: BlockHook | None = None) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"stage {self.index}: input has {x.shape[1]} channels, expects {self.in_channels}"
            )
        if self.stride == 2:
            x = ops.avg_pool2(x)
        if self.proj is not None:
            x = ops.conv2d(x, self.proj)
        for b, block in enumerate(self.blocks):
            out = block.forward(x)
            if block_hook is not None:
                out = block_hook(self.index, b, x, out)
            x = out
        return x

    def layers(self):
        if self.proj is not None:
            yield "proj", self.proj
        for b, block in enumerate(self.blocks):
            for name, layer in block.layers():
                yield f"block{b}.{name}", layer


@dataclass
class CnnStem:
    """3x3 conv + relu + 2x pool: images to half-resolution features."""

    conv: ConvLayer

    out_channels: int = field(init=False)

    def __post_init__(self):
        self.out_channels = self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return ops.avg_pool2(ops.relu(ops.conv2d(x, self.conv)))

    def layers(self):
        yield "conv", self.conv


def tokens_to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    """(N, T, C) -> (N, C, h, w) with T == h*w."""
    n, t, c = tokens.shape
    if t != h * w:
        raise ShapeError(f"tokens_to_grid: {t} tokens cannot fill a {h}x{w} grid")
    return ops.reshape(ops.permute(tokens, (0, 2, 1)), (n, c, h, w))


def grid_to_tokens(grid: Tensor) -> Tensor:
    """(N, C, h, w) -> (N, h*w, C)."""
    n, c, h, w = grid.shape
    return ops.permute(ops.reshape(grid, (n, c, h * w)), (0, 2, 1))


@dataclass
class MixerBlock:
    """Residual token-mixing + channel MLP over a fixed token count."""

    token_fc: LinearLayer
    fc1: LinearLayer
    fc2: LinearLayer

    @classmethod
    def build(cls, tokens: int, channels: int, rng: np.random.Generator) -> "MixerBlock":
        return cls(
            token_fc=LinearLayer.build(tokens, tokens, rng, init_scale=RESIDUAL_INIT_SCALE),
            fc1=LinearLayer.build(channels, channels, rng),
            fc2=LinearLayer.build(channels, channels, rng, init_scale=RESIDUAL_INIT_SCALE),
        )

    def forward(self, tokens: Tensor) -> Tensor:
        mixed = ops.permute(ops.linear(ops.permute(tokens, (0, 2, 1)), self.token_fc), (0, 2, 1))
        tokens = ops.add(tokens, mixed)
        return ops.add(tokens, ops.linear(ops.relu(ops.linear(tokens, self.fc1)), self.fc2))

    def layers(self):
        yield "token_fc", self.token_fc
        yield "fc1", self.fc1
        yield "fc2", self.fc2


@dataclass
class VitStage:
    """A run of token blocks; grid in, grid out, resolution unchanged."""

    index: int
    in_channels: int
    out_channels: int
    stride: int
    blocks: list[MixerBlock]

    def forward(self, x: Tensor, block_hook: BlockHook | None = None) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"stage {self.index}: input has {x.shape[1]} channels, expects {self.in_channels}"
            )
        n, c, h, w = x.shape
        tokens = grid_to_tokens(x)
        for block in self.blocks:
            tokens = block.forward(tokens)
        return tokens_to_grid(tokens, h, w)

    def layers(self):
        for b, block in enumerate(self.blocks):
            for name, layer in block.layers():
                yield f"block{b}.{name}", layer


@dataclass
class VitStem:
    """Non-overlapping patch embedding plus a learned position table."""

    patch: int
    embed: LinearLayer
    pos: Tensor
    grid_hw: tuple[int, int]

    out_channels: int = field(init=False)

    def __post_init__(self):
        self.out_channels = self.embed.out_features

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        p = self.patch
        if h % p or w % p:
            raise ShapeError(f"image {h}x{w} not divisible by patch {p}")
        if (h // p, w // p) != self.grid_hw:
            raise ShapeError(
                f"image {h}x{w} yields grid {(h // p, w // p)}, stem built for {self.grid_hw}"
            )
        patches = ops.reshape(
            ops.permute(ops.reshape(x, (n, c, h // p, p, w // p, p)), (0, 2, 4, 1, 3, 5)),
            (n, (h // p) * (w // p), c * p * p),
        )
        tokens = ops.add(ops.linear(patches, self.embed), ops.broadcast_to_batch(self.pos, n))
        return tokens_to_grid(tokens, *self.grid_hw)

    def layers(self):
        yield "embed", self.embed

    def extra_params(self):
        yield "pos", self.pos


class Backbone:
    """Frozen-able stage chain with a stem producing the stage-0 feature."""

    def __init__(self, kind: str, stem, stages: list, arch: dict):
        self.kind = kind
        self.stem = stem
        self.stages = stages
        self.arch = arch
        self.frozen = False
        self.provenance = "random-init"
        for i in range(1, len(stages)):
            if stages[i].in_channels != stages[i - 1].out_channels:
                raise ShapeError(
                    f"stage {i} expects {stages[i].in_channels} channels, "
                    f"stage {i - 1} yields {stages[i - 1].out_channels}"
                )

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def stage_channels(self) -> list[int]:
        """Channel count at each prompt insertion point 0..N."""
        return [self.stem.out_channels] + [s.out_channels for s in self.stages]

    def run_stage(self, i: int, x: Tensor, block_hook: BlockHook | None = None) -> Tensor:
        if i == 0:
            return self.stem.forward(x)
        if not 1 <= i <= self.n_stages:
            raise ShapeError(f"stage index {i} outside [0,{self.n_stages}]")
        return self.stages[i - 1].forward(x, block_hook)

    def forward(self, x: Tensor, block_hook: BlockHook | None = None) -> Tensor:
        for i in range(self.n_stages + 1):
            x = self.run_stage(i, x, block_hook)
        return x

    def _layer_items(self) -> Iterator[tuple[str, object]]:
        for name, layer in self.stem.layers():
            yield f"stem.{name}", layer
        for i, stage in enumerate(self.stages, start=1):
            for name, layer in stage.layers():
                yield f"stage{i}.{name}", layer

    def layer_values(self):
        for _, layer in self._layer_items():
            yield layer

    def named_params(self, prefix: str = "backbone") -> Iterator[tuple[str, Tensor]]:
        for name, layer in self._layer_items():
            yield from layer.named_params(f"{prefix}.{name}")
        if hasattr(self.stem, "extra_params"):
            for name, t in self.stem.extra_params():
                yield f"{prefix}.stem.{name}", t

    def freeze(self) -> None:
        for layer in self.layer_values():
            layer.set_trainable(False)
        if hasattr(self.stem, "extra_params"):
            for _, t in self.stem.extra_params():
                t.requires_grad = False
                t._needs = False
        self.frozen = True

    def set_trainable(self, flag: bool = True) -> None:
        for layer in self.layer_values():
            layer.set_trainable(flag)
        if hasattr(self.stem, "extra_params"):
            for _, t in self.stem.extra_params():
                t.requires_grad = flag
                t._needs = flag
        self.frozen = not flag

    def entries(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_params()}

    def state_hash(self) -> str:
        return sha256_entries(self.entries())

    def save(self, path: str | Path) -> None:
        path = Path(path)
        write_checkpoint(path, self.entries())
        sidecar = {"arch": self.arch, "frozen": self.frozen, "provenance": self.provenance}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Backbone":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        bb = build_from_arch(sidecar["arch"])
        entries = read_checkpoint(path)
        for name, t in bb.named_params():
            if name not in entries:
                raise KeyError(f"checkpoint missing backbone entry {name!r}")
            if entries[name].shape != t.shape:
                raise ShapeError(f"entry {name!r} shape {entries[name].shape} != {t.shape}")
            t.data = entries[name].astype(np.float64)
        bb.provenance = sidecar.get("provenance", "unknown")
        if sidecar.get("frozen"):
            bb.freeze()
        return bb


def build_toy_cnn(
    channels: tuple[int, ...] = (32, 64, 128, 256),
    stage_depths: tuple[int, ...] = (2, 2, 2, 2),
    seed: int = 0,
) -> Backbone:
    """Residual CNN: stem stride 2 then stage strides (1, 2, 2, ...)."""
    channels = tuple(int(c) for c in channels)
    stage_depths = tuple(int(d) for d in stage_depths)
    if len(channels) != len(stage_depths):
        raise ShapeError("channels and stage_depths must have the same length")
    if not channels:
        raise ShapeError("need at least one stage")
    if any(c <= 0 for c in channels) or any(d <= 0 for d in stage_depths):
        raise ShapeError("channel counts and stage depths must be positive")
    rng = np.random.default_rng(seed)
    stem = CnnStem(conv=ConvLayer.build(3, channels[0], 3, rng))
    stages: list[CnnStage] = []
    prev = channels[0]
    for i, (c, depth) in enumerate(zip(channels, stage_depths), start=1):
        stride = 1 if i == 1 else 2
        # linear projection (no relu follows): unit-gain init keeps feature variance flat
        proj = None if prev == c else ConvLayer.build(prev, c, 1, rng, init_scale=1 / np.sqrt(2))
        blocks = [ResidualBlock.build(c, rng) for _ in range(depth)]
        stages.append(CnnStage(i, prev, c, stride, proj, blocks))
        prev = c
    arch = {"kind": "cnn", "channels": list(channels), "depths": list(stage_depths), "seed": seed}
    return Backbone("cnn", stem, stages, arch)


def build_toy_vit(
    embed_dim: int = 64,
    layers: int = 12,
    patch: int = 8,
    seed: int = 0,
    n_stages: int = 3,
    image_size: int = 64,
) -> Backbone:
    """Token-mixing network partitioned evenly into grid-native stages."""
    if layers % n_stages:
        raise ShapeError(f"{layers} layers do not split evenly into {n_stages} stages")
    if image_size % patch:
        raise ShapeError(f"image size {image_size} not divisible by patch {patch}")
    rng = np.random.default_rng(seed)
    side = image_size // patch
    tokens = side * side
    embed = LinearLayer.build(3 * patch * patch, embed_dim, rng)
    pos = Tensor(rng.normal(0.0, 0.02, size=(tokens, embed_dim)), requires_grad=True)
    stem = VitStem(patch=patch, embed=embed, pos=pos, grid_hw=(side, side))
    per_stage = layers // n_stages
    stages = [
        VitStage(
            index=i,
            in_channels=embed_dim,
            out_channels=embed_dim,
            stride=1,
            blocks=[MixerBlock.build(tokens, embed_dim, rng) for _ in range(per_stage)],
        )
        for i in range(1, n_stages + 1)
    ]
    arch = {
        "kind": "vit",
        "embed_dim": embed_dim,
        "layers": layers,
        "patch": patch,
        "seed": seed,
        "n_stages": n_stages,
        "image_size": image_size,
    }
    return Backbone("vit", stem, stages, arch)


def build_from_arch(arch: dict) -> Backbone:
    if arch["kind"] == "cnn":
        return build_toy_cnn(tuple(arch["channels"]), tuple(arch["depths"]), arch["seed"])
    if arch["kind"] == "vit":
        return build_toy_vit(
            arch["embed_dim"],
            arch["layers"],
            arch["patch"],
            arch["seed"],
            arch["n_stages"],
            arch["image_size"],
        )
    raise ValueError(f"unknown backbone kind {arch['kind']!r}")


def pretrain_source(
    backbone: Backbone,
    source_dataset,
    steps: int,
    lr: float,
    batch: int = 4,
    seed: int = 0,
    momentum: float = 0.9,
) -> Backbone:
    """Train backbone + throwaway head on the source task, then freeze.

    The head is discarded; only the adapted backbone weights survive, with a
    provenance tag recording the run. Rejects an already-frozen backbone.
    """
    if backbone.frozen:
        raise ValueError("backbone is already frozen; pretraining must come first")
    from .pipeline import LossSpec, StagePipeline, TuningStrategy, train

    pipeline = StagePipeline.build(
        backbone=backbone,
        num_classes=source_dataset.num_classes,
        prior=None,
        spm_stages=(),
        r=1,
        seed=seed,
        strategy=TuningStrategy(tag="full"),
        loss_spec=LossSpec(ignore_index=source_dataset.ignore_index),
    )
    pipeline.apply_strategy()
    if steps > 0:
        train(pipeline, source_dataset, steps=steps, lr=lr, seed=seed, batch=batch, momentum=momentum)
    backbone.freeze()
    backbone.provenance = (
        f"source-pretrain(data={source_dataset.tag}, steps={steps}, lr={lr}, seed={seed})"
    )
    return backbone
