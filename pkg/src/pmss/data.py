"""Procedural synthetic segmentation tasks.

Images contain anti-aliased geometric shapes over a textured background:
class 1 disks, class 2 rectangles, class 3 triangles, class 4 two-pixel-wide
curves (the thin-structure class); class 0 is background. The palette id
permutes the class-to-color assignment and the texture id switches the
background family, which is how the source and downstream domains differ
while sharing the shape vocabulary. Labels come pixel-exact from the
rasterizer (a pixel belongs to the last shape covering its center); image
blending uses 4x4 supersampled coverage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import pack_entry, read_checkpoint_bytes

_BASE_COLORS = np.array(
    [
        (0.86, 0.22, 0.20),
        (0.22, 0.68, 0.32),
        (0.25, 0.38, 0.86),
        (0.92, 0.78, 0.22),
        (0.70, 0.30, 0.80),
        (0.20, 0.78, 0.78),
        (0.95, 0.50, 0.20),
        (0.55, 0.55, 0.55),
    ]
)


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic recipe for one synthetic dataset."""

    seed: int = 0
    size: int = 64
    num_classes: int = 5
    shapes_min: int = 3
    shapes_max: int = 6
    palette_id: int = 0
    texture_id: int = 0
    train_count: int = 256
    val_count: int = 64
    thin_only: bool = False
    ignore_index: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes (background + one shape)")
        if self.size < 16:
            raise ValueError("image size must be at least 16")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ValueError("bad shapes-per-image range")
        if self.num_classes - 1 > len(_BASE_COLORS):
            raise ValueError(f"at most {len(_BASE_COLORS) + 1} classes supported")
        if self.train_count < 1 or self.val_count < 0:
            raise ValueError("split sizes must be positive / nonnegative")

    @property
    def tag(self) -> str:
        return (
            f"synth(seed={self.seed},size={self.size},k={self.num_classes},"
            f"palette={self.palette_id},texture={self.texture_id},thin={self.thin_only})"
        )


@dataclass
class SegDataset:
    """A stack of images (N,3,H,W) float64 with labels (N,H,W) int64."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    ignore_index: int | None
    tag: str

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "SegDataset":
        idx = np.asarray(idx)
        return SegDataset(
            self.images[idx], self.labels[idx], self.num_classes, self.ignore_index, self.tag
        )

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def _palette(spec: SynthSpec) -> np.ndarray:
    colors = _BASE_COLORS[: spec.num_classes - 1].copy()
    if spec.palette_id:
        perm = np.random.default_rng(spec.palette_id).permutation(len(colors))
        colors = colors[perm]
    return colors


def _background(rng: np.random.Generator, size: int, texture_id: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    if texture_id == 0:
        # smooth directional waves
        for c in range(3):
            fx, fy = rng.uniform(0.5, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            base = rng.uniform(0.25, 0.55)
            amp = rng.uniform(0.05, 0.15)
            img[c] = base + amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    else:
        # blocky value noise upsampled to full resolution
        cells = 6
        grid = rng.uniform(0.15, 0.7, size=(3, cells, cells))
        pos = np.linspace(0, cells - 1, size)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, cells - 1)
        f = pos - i0
        for c in range(3):
            rows = grid[c][i0][:, i0] * np.outer(1 - f, 1 - f)
            rows += grid[c][i0][:, i1] * np.outer(1 - f, f)
            rows += grid[c][i1][:, i0] * np.outer(f, 1 - f)
            rows += grid[c][i1][:, i1] * np.outer(f, f)
            img[c] = rows
        checker = ((np.mgrid[0:size, 0:size] // 4).sum(axis=0) % 2) * 0.06
        img += checker[None]
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


class _Shape:
    def __init__(self, kind: str, cls: int, color: np.ndarray):
        self.kind = kind
        self.cls = cls
        self.color = color
        self.params: dict = {}

    def bbox(self, size: int) -> tuple[int, int, int, int]:
        """Conservative (x0, x1, y0, y1) pixel bounds, clipped to the image."""
        p = self.params
        if self.kind == "disk":
            x0, x1 = p["cx"] - p["r"], p["cx"] + p["r"]
            y0, y1 = p["cy"] - p["r"], p["cy"] + p["r"]
        elif self.kind == "rect":
            x0, x1 = p["cx"] - p["hx"], p["cx"] + p["hx"]
            y0, y1 = p["cy"] - p["hy"], p["cy"] + p["hy"]
        elif self.kind == "triangle":
            v = p["verts"]
            x0, x1 = v[:, 0].min(), v[:, 0].max()
            y0, y1 = v[:, 1].min(), v[:, 1].max()
        else:
            pts, hw = p["points"], p["hw"]
            x0, x1 = pts[:, 0].min() - hw, pts[:, 0].max() + hw
            y0, y1 = pts[:, 1].min() - hw, pts[:, 1].max() + hw
        return (
            max(0, int(np.floor(x0)) - 1),
            min(size, int(np.ceil(x1)) + 1),
            max(0, int(np.floor(y0)) - 1),
            min(size, int(np.ceil(y1)) + 1),
        )

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "disk":
            return (x - p["cx"]) ** 2 + (y - p["cy"]) ** 2 <= p["r"] ** 2
        if self.kind == "rect":
            return (np.abs(x - p["cx"]) <= p["hx"]) & (np.abs(y - p["cy"]) <= p["hy"])
        if self.kind == "triangle":
            (x0, y0), (x1, y1), (x2, y2) = p["verts"]

            def side(ax, ay, bx, by):
                return (bx - ax) * (y - ay) - (by - ay) * (x - ax)

            d0 = side(x0, y0, x1, y1)
            d1 = side(x1, y1, x2, y2)
            d2 = side(x2, y2, x0, y0)
            neg = (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
            pos = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
            return neg | pos
        if self.kind == "curve":
            pts = p["points"]  # (S, 2) polyline along a quadratic Bezier
            a, b = pts[:-1], pts[1:]
            ab = b - a
            denom = np.maximum((ab**2).sum(axis=1), 1e-12)
            px = x.reshape(-1, 1) - a[None, :, 0]
            py = y.reshape(-1, 1) - a[None, :, 1]
            t = np.clip((px * ab[None, :, 0] + py * ab[None, :, 1]) / denom[None], 0.0, 1.0)
            dx = px - t * ab[None, :, 0]
            dy = py - t * ab[None, :, 1]
            dist2 = (dx**2 + dy**2).min(axis=1)
            return (dist2 <= p["hw"] ** 2).reshape(x.shape)
        raise ValueError(self.kind)


def _sample_shape(rng: np.random.Generator, spec: SynthSpec, palette: np.ndarray) -> _Shape:
    s = spec.size
    cls = 1 if spec.thin_only else int(rng.integers(1, spec.num_classes))
    kind = "curve" if spec.thin_only else ("disk", "rect", "triangle", "curve")[(cls - 1) % 4]
    color = np.clip(palette[cls - 1] + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
    shape = _Shape(kind, cls, color)
    if kind == "disk":
        shape.params = {
            "cx": rng.uniform(0.15 * s, 0.85 * s),
            "cy": rng.uniform(0.15 * s, 0.85 * s),
            "r": rng.uniform(0.06 * s, 0.14 * s),
        }
    elif kind == "rect":
        shape.params = {
            "cx": rng.uniform(0.15 * s, 0.85 * s),
            "cy": rng.uniform(0.15 * s, 0.85 * s),
            "hx": rng.uniform(0.05 * s, 0.13 * s),
            "hy": rng.uniform(0.05 * s, 0.13 * s),
        }
    elif kind == "triangle":
        while True:
            cx, cy = rng.uniform(0.2 * s, 0.8 * s, size=2)
            ang = rng.uniform(0, 2 * np.pi, size=3) + np.array([0, 2.1, 4.2])
            rad = rng.uniform(0.07 * s, 0.16 * s, size=3)
            verts = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
            area = 0.5 * abs(
                (verts[1, 0] - verts[0, 0]) * (verts[2, 1] - verts[0, 1])
                - (verts[2, 0] - verts[0, 0]) * (verts[1, 1] - verts[0, 1])
            )
            if area > (0.04 * s) ** 2:
                shape.params = {"verts": verts}
                break
    else:  # curve
        p0 = rng.uniform(0.1 * s, 0.9 * s, size=2)
        p2 = p0 + rng.uniform(-0.5 * s, 0.5 * s, size=2)
        p2 = np.clip(p2, 0.05 * s, 0.95 * s)
        mid = (p0 + p2) / 2 + rng.uniform(-0.2 * s, 0.2 * s, size=2)
        t = np.linspace(0.0, 1.0, 48)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * mid + t**2 * p2
        shape.params = {"points": pts, "hw": 1.0}
    return shape


def _render_sample(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    s = spec.size
    palette = _palette(spec)
    img = _background(rng, s, spec.texture_id)
    labels = np.zeros((s, s), dtype=np.int64)

    centers = np.arange(s) + 0.5
    fine = (np.arange(4 * s) + 0.5) / 4.0
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(n_shapes):
        shape = _sample_shape(rng, spec, palette)
        x0, x1, y0, y1 = shape.bbox(s)
        if x0 >= x1 or y0 >= y1:
            continue
        fx, fy = np.meshgrid(fine[4 * x0 : 4 * x1], fine[4 * y0 : 4 * y1])
        cover = shape.inside(fx, fy).reshape(y1 - y0, 4, x1 - x0, 4).mean(axis=(1, 3))
        gx, gy = np.meshgrid(centers[x0:x1], centers[y0:y1])
        win = (slice(y0, y1), slice(x0, x1))
        labels[win][shape.inside(gx, gy)] = shape.cls
        img[:, win[0], win[1]] = (
            img[:, win[0], win[1]] * (1 - cover[None]) + shape.color[:, None, None] * cover[None]
        )
    img = np.clip(img + rng.normal(0.0, 0.01, size=img.shape), 0.0, 1.0)
    return img, labels


def generate(spec: SynthSpec) -> tuple[SegDataset, SegDataset]:
    """Materialize the (train, val) splits; bitwise deterministic per spec."""
    total = spec.train_count + spec.val_count
    images = np.empty((total, 3, spec.size, spec.size))
    labels = np.empty((total, spec.size, spec.size), dtype=np.int64)
    for i in range(total):
        images[i], labels[i] = _render_sample(spec, i)
    train = SegDataset(
        images[: spec.train_count],
        labels[: spec.train_count],
        spec.num_classes,
        spec.ignore_index,
        spec.tag,
    )
    val = SegDataset(
        images[spec.train_count :],
        labels[spec.train_count :],
        spec.num_classes,
        spec.ignore_index,
        spec.tag,
    )
    return train, val


def save_dataset(ds: SegDataset, out_dir: str | Path, spec: SynthSpec | None = None) -> None:
    """One directory: meta.json plus per-sample raw tensor entries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "count": len(ds),
        "num_classes": ds.num_classes,
        "ignore_index": ds.ignore_index,
        "tag": ds.tag,
        "spec": asdict(spec) if spec is not None else None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    for i in range(len(ds)):
        (out / f"img_{i:05d}.bin").write_bytes(pack_entry(f"img_{i:05d}", ds.images[i]))
        (out / f"lab_{i:05d}.bin").write_bytes(
            pack_entry(f"lab_{i:05d}", ds.labels[i].astype(np.float64))
        )


def _read_entry(path: Path) -> np.ndarray:
    # each file holds exactly one container entry; wrap with a header to reuse the reader
    blob = path.read_bytes()
    framed = b"PMSS" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + blob
    (arr,) = read_checkpoint_bytes(framed).values()
    return arr


def load_dataset(in_dir: str | Path) -> SegDataset:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    count = meta["count"]
    images, labels = [], []
    for i in range(count):
        images.append(_read_entry(src / f"img_{i:05d}.bin"))
        labels.append(_read_entry(src / f"lab_{i:05d}.bin").astype(np.int64))
    return SegDataset(
        np.stack(images),
        np.stack(labels),
        meta["num_classes"],
        meta["ignore_index"],
        meta["tag"],
    )


def one_shot_split(ds: SegDataset, seed: int) -> tuple[SegDataset, SegDataset]:
    """Pick one training sample at random; everything else becomes the test set."""
    n = len(ds)
    if n < 2:
        raise ValueError("one-shot split needs at least two samples")
    rng = np.random.default_rng(seed)
    pick = int(rng.integers(0, n))
    rest = np.array([i for i in range(n) if i != pick])
    return ds.subset(np.array([pick])), ds.subset(rest)


# domain presets -------------------------------------------------------------

def source_spec(seed: int = 101, size: int = 64, train: int = 256, val: int = 64) -> SynthSpec:
    return SynthSpec(
        seed=seed, size=size, palette_id=0, texture_id=0, train_count=train, val_count=val
    )


def downstream_spec(seed: int = 202, size: int = 64, train: int = 256, val: int = 64) -> SynthSpec:
    """Same shape vocabulary, permuted colors, different background family."""
    return SynthSpec(
        seed=seed, size=size, palette_id=3, texture_id=1, train_count=train, val_count=val
    )


def thin_spec(seed: int = 303, size: int = 64, train: int = 8, val: int = 24) -> SynthSpec:
    """Binary vessel-like task: background + thin curves only."""
    return SynthSpec(
        seed=seed,
        size=size,
        num_classes=2,
        shapes_min=3,
        shapes_max=5,
        palette_id=2,
        texture_id=1,
        train_count=train,
        val_count=val,
        thin_only=True,
    )
