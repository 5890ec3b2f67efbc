"""Semantic prompt matcher: recurrent map-guided feature prompting.

One matcher instance sits at a stage boundary and owns two branches that
share a pyramid-dilation context block design. The refine branch predicts a
per-pixel class distribution from the concatenated feature and running map;
the prompt branch turns the refined map into a multiplicative weight W,
forms the prompt P = F (*) W, and hands F + P to the next frozen stage. All
parameters are shared across the R recurrent iterations, so the parameter
count is independent of R. The prompt projection is zero-initialized: at
step 0 every matcher is the identity on features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import ConvLayer, LinearLayer
from .tensor import ShapeError, Tensor

DEFAULT_DILATIONS = (1, 2, 3, 4)
PDC_GROUP_CAP = 16
MAP_LOGIT_INIT_SCALE = 0.2


class SemanticMap:
    """Per-pixel class distribution stored as an NxKxHxW tensor."""

    __slots__ = ("values",)

    def __init__(self, values: Tensor):
        if values.ndim != 4:
            raise ShapeError(f"SemanticMap needs NxKxHxW values, got shape {values.shape}")
        self.values = values

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def check(self, tol: float = 1e-6) -> None:
        """Raise unless every pixel is a nonnegative distribution summing to 1."""
        data = self.values.data
        if data.min() < 0.0:
            raise ValueError(f"semantic map has negative entry {data.min()}")
        sums = data.sum(axis=1)
        err = np.abs(sums - 1.0).max()
        if err > tol:
            raise ValueError(f"semantic map per-pixel sums off by {err:.3e} (> {tol})")


@dataclass
class ClassPrior:
    """Empirical class distribution of a training set's pixels."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ShapeError("class prior must be a flat vector")
        if self.probs.min() < 0.0 or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("class prior must be a distribution (sum 1 within 1e-9)")

    @property
    def k(self) -> int:
        return self.probs.size


def class_prior(train_labels, k: int, ignore_index: int | None = None) -> ClassPrior:
    """Pixel frequency of each class over the training labels."""
    labels = [np.asarray(l) for l in train_labels] if isinstance(train_labels, (list, tuple)) else [np.asarray(train_labels)]
    counts = np.zeros(k, dtype=np.int64)
    for arr in labels:
        flat = arr.reshape(-1)
        if ignore_index is not None:
            flat = flat[flat != ignore_index]
        if flat.size and (flat.min() < 0 or flat.max() >= k):
            raise ValueError(f"label outside [0,{k}) in class_prior input")
        counts += np.bincount(flat, minlength=k)
    total = counts.sum()
    if total == 0:
        raise ValueError("class_prior: no non-ignored pixels")
    return ClassPrior(counts / total)


def init_m0(prior: ClassPrior, n: int, h: int, w: int) -> SemanticMap:
    """Spatially uniform map equal to the prior at every location."""
    data = np.broadcast_to(prior.probs[None, :, None, None], (n, prior.k, h, w)).copy()
    return SemanticMap(Tensor(data))


@dataclass
class PdcParams:
    """Four-branch dilated grouped 3x3 block fused by a 1x1 convolution.

    The input splits into four channel chunks; chunk j runs through the
    dilation-d_j branch; the concatenated result is fused back to the input
    width, so output shape always equals input shape.
    """

    convs: list[ConvLayer]
    fuse: ConvLayer
    dilations: tuple[int, ...]
    relu_inside: bool = True

    @classmethod
    def build(
        cls,
        channels: int,
        rng: np.random.Generator,
        dilations: tuple[int, ...] = DEFAULT_DILATIONS,
        groups: int | None = None,
        relu_inside: bool = True,
    ) -> "PdcParams":
        if len(dilations) != 4:
            raise ShapeError(f"pyramid block needs exactly 4 dilations, got {len(dilations)}")
        if channels % 4:
            raise ShapeError(f"pyramid block channels must divide by 4, got {channels}")
        chunk = channels // 4
        if groups is None:
            # 16 groups whenever the chunk allows it, else the largest
            # divisor below the cap (e.g. C=96 -> chunk 24 -> 12 groups)
            groups = next(
                g for g in range(min(PDC_GROUP_CAP, chunk), 0, -1) if chunk % g == 0
            )
        if chunk % groups:
            raise ShapeError(f"chunk width {chunk} not divisible by groups {groups}")
        convs = [
            ConvLayer.build(chunk, chunk, 3, rng, dilation=d, groups=groups) for d in dilations
        ]
        fuse = ConvLayer.build(channels, channels, 1, rng)
        return cls(convs=convs, fuse=fuse, dilations=tuple(dilations), relu_inside=relu_inside)

    @property
    def channels(self) -> int:
        return self.fuse.in_channels

    def layers(self):
        for j, conv in enumerate(self.convs, start=1):
            yield f"d{j}", conv
        yield "fuse", self.fuse


def pdc(x: Tensor, params: PdcParams) -> Tensor:
    c = params.channels
    if x.shape[1] != c:
        raise ShapeError(f"pdc: input has {x.shape[1]} channels, block expects {c}")
    chunk = c // 4
    outs = []
    for j, conv in enumerate(params.convs):
        piece = ops.conv2d(ops.slice_channels(x, j * chunk, (j + 1) * chunk), conv)
        outs.append(ops.relu(piece) if params.relu_inside else piece)
    return ops.conv2d(ops.concat_channels(*outs), params.fuse)


@dataclass
class SpmParams:
    """Shared parameter set of one matcher instance (both branches)."""

    b1_in: ConvLayer
    b1_pdc: PdcParams
    b1_out: ConvLayer
    b2_in: ConvLayer
    b2_pdc: PdcParams
    b2_out: ConvLayer
    c: int
    c_f: int
    k: int

    @classmethod
    def build(
        cls,
        c_f: int,
        k: int,
        rng: np.random.Generator,
        c: int = 256,
        dilations: tuple[int, ...] = DEFAULT_DILATIONS,
        pdc_groups: int | None = None,
        conv1x1_groups: int = 1,
        relu_inside: bool = True,
    ) -> "SpmParams":
        cat = c_f + k
        return cls(
            b1_in=ConvLayer.build(cat, c, 1, rng, groups=conv1x1_groups),
            b1_pdc=PdcParams.build(c, rng, dilations, pdc_groups, relu_inside),
            # damped init keeps the first refined maps near-uniform; full-scale
            # init saturates them and the -1/p loss gradient explodes
            b1_out=ConvLayer.build(c, k, 1, rng, init_scale=MAP_LOGIT_INIT_SCALE),
            b2_in=ConvLayer.build(cat, c, 1, rng, groups=conv1x1_groups),
            b2_pdc=PdcParams.build(c, rng, dilations, pdc_groups, relu_inside),
            b2_out=ConvLayer.build(c, c_f, 1, rng, init_scale=0.0),
            c=c,
            c_f=c_f,
            k=k,
        )

    def layers(self):
        yield "b1_in", self.b1_in
        for name, layer in self.b1_pdc.layers():
            yield f"b1_pdc_{name}", layer
        yield "b1_out", self.b1_out
        yield "b2_in", self.b2_in
        for name, layer in self.b2_pdc.layers():
            yield f"b2_pdc_{name}", layer
        yield "b2_out", self.b2_out

    def named_params(self, prefix: str):
        for name, layer in self.layers():
            yield from layer.named_params(f"{prefix}.{name}")

    def param_count(self) -> int:
        return sum(layer.param_count() for _, layer in self.layers())

    def set_trainable(self, flag: bool) -> None:
        for _, layer in self.layers():
            layer.set_trainable(flag)


def _check_pair(f_prev: Tensor, m_values: Tensor, params) -> None:
    if f_prev.shape[1] != params.c_f:
        raise ShapeError(f"feature has {f_prev.shape[1]} channels, matcher expects {params.c_f}")
    if m_values.shape[1] != params.k:
        raise ShapeError(f"map has {m_values.shape[1]} classes, matcher expects {params.k}")
    if f_prev.shape[0] != m_values.shape[0] or f_prev.shape[2:] != m_values.shape[2:]:
        raise ShapeError(
            f"feature {f_prev.shape} and map {m_values.shape} disagree; resize the map first"
        )


def refine_map(f_prev: Tensor, m_prev: SemanticMap, params: SpmParams) -> SemanticMap:
    """Refine branch: softmax(1x1(PDC(1x1(F (+) M))))."""
    _check_pair(f_prev, m_prev.values, params)
    h = ops.conv2d(ops.concat_channels(f_prev, m_prev.values), params.b1_in)
    logits = ops.conv2d(pdc(h, params.b1_pdc), params.b1_out)
    return SemanticMap(ops.softmax_channels(logits))


def generate_prompt(
    f_prev: Tensor, m_ref: SemanticMap, params: SpmParams
) -> tuple[Tensor, Tensor, Tensor]:
    """Prompt branch: W = 1x1(PDC(1x1(F (+) M))); P = F (*) W; F' = F + P."""
    _check_pair(f_prev, m_ref.values, params)
    h = ops.conv2d(ops.concat_channels(f_prev, m_ref.values), params.b2_in)
    w = ops.conv2d(pdc(h, params.b2_pdc), params.b2_out)
    p = ops.mul(f_prev, w)
    return ops.add(f_prev, p), p, w


def spm_forward(
    f_prev: Tensor, m_prev: SemanticMap, params: SpmParams, r: int
) -> tuple[Tensor, SemanticMap, list[SemanticMap]]:
    """Run R recurrent iterations with shared parameters.

    The incoming map is bilinearly resized to the feature's spatial size
    (simplex preserving), then each iteration refines the map and prompts
    the feature. Returns the final feature (same shape as the input feature),
    the final map, and all R interim maps for deep supervision.
    """
    if r < 1:
        raise ValueError(f"recurrent iteration count must be >= 1, got {r}")
    n, _, h, w = f_prev.shape
    values = m_prev.values
    if values.shape[2:] != (h, w):
        values = ops.bilinear_resize(values, h, w)
    m = SemanticMap(values)
    f = f_prev
    interim: list[SemanticMap] = []
    for _ in range(r):
        m = refine_map(f, m, params)
        f, _, _ = generate_prompt(f, m, params)
        interim.append(m)
    return f, m, interim


# ---------------------------------------------------------------------------
# recognition mode: the map becomes a per-image class-probability vector

@dataclass
class SpmRecognitionParams:
    """Matcher variant whose refine branch emits a class vector via GMP+FC."""

    b1_in: ConvLayer
    b1_pdc: PdcParams
    b1_fc: LinearLayer
    b2_in: ConvLayer
    b2_pdc: PdcParams
    b2_out: ConvLayer
    c: int
    c_f: int
    num_classes: int

    @classmethod
    def build(
        cls,
        c_f: int,
        num_classes: int,
        rng: np.random.Generator,
        c: int = 96,
        dilations: tuple[int, ...] = DEFAULT_DILATIONS,
        pdc_groups: int | None = None,
        relu_inside: bool = True,
    ) -> "SpmRecognitionParams":
        cat = c_f + num_classes
        return cls(
            b1_in=ConvLayer.build(cat, c, 1, rng),
            b1_pdc=PdcParams.build(c, rng, dilations, pdc_groups, relu_inside),
            b1_fc=LinearLayer.build(c, num_classes, rng, init_scale=MAP_LOGIT_INIT_SCALE),
            b2_in=ConvLayer.build(cat, c, 1, rng),
            b2_pdc=PdcParams.build(c, rng, dilations, pdc_groups, relu_inside),
            b2_out=ConvLayer.build(c, c_f, 1, rng, init_scale=0.0),
            c=c,
            c_f=c_f,
            num_classes=num_classes,
        )

    def layers(self):
        yield "b1_in", self.b1_in
        for name, layer in self.b1_pdc.layers():
            yield f"b1_pdc_{name}", layer
        yield "b1_fc", self.b1_fc
        yield "b2_in", self.b2_in
        for name, layer in self.b2_pdc.layers():
            yield f"b2_pdc_{name}", layer
        yield "b2_out", self.b2_out

    def named_params(self, prefix: str):
        for name, layer in self.layers():
            yield from layer.named_params(f"{prefix}.{name}")

    def param_count(self) -> int:
        return sum(layer.param_count() for _, layer in self.layers())

    def set_trainable(self, flag: bool) -> None:
        for _, layer in self.layers():
            layer.set_trainable(flag)


def vector_prior(prior: ClassPrior, n: int) -> Tensor:
    """Initial class vector: training-set label frequencies, per batch row."""
    return Tensor(np.broadcast_to(prior.probs[None, :], (n, prior.k)).copy())


def spm_forward_recognition(
    f_prev: Tensor, v_prev: Tensor, params: SpmRecognitionParams, r: int
) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Recurrent matcher over (feature, class-vector) state.

    Branch 1: 1x1(expand(V) (+) F) -> PDC -> global max pool -> FC ->
    softmax -> refined vector. Branch 2 mirrors the segmentation prompt
    branch with the expanded refined vector in place of the map.
    """
    if r < 1:
        raise ValueError(f"recurrent iteration count must be >= 1, got {r}")
    if v_prev.ndim != 2 or v_prev.shape[1] != params.num_classes:
        raise ShapeError(f"class vector shape {v_prev.shape} != (N, {params.num_classes})")
    n, _, h, w = f_prev.shape
    f, v = f_prev, v_prev
    interim: list[Tensor] = []
    for _ in range(r):
        spread = ops.expand_spatial(v, h, w)
        h1 = ops.conv2d(ops.concat_channels(spread, f), params.b1_in)
        pooled = ops.global_max_pool(pdc(h1, params.b1_pdc))
        v = ops.softmax_vec(ops.linear(pooled, params.b1_fc))
        spread_ref = ops.expand_spatial(v, h, w)
        h2 = ops.conv2d(ops.concat_channels(f, spread_ref), params.b2_in)
        wmap = ops.conv2d(pdc(h2, params.b2_pdc), params.b2_out)
        f = ops.add(f, ops.mul(f, wmap))
        interim.append(v)
    return f, v, interim
