"""Procedural two-domain scenes with box annotations, and their on-disk format.

Domain ``A`` ("day") and ``B`` ("night") share one geometry distribution: for
a given seed both domains place the same shapes at the same boxes, only the
palette differs. Training draws unpaired seeds per domain; the paired
property is for evaluation.

On-disk layout::

    DIR/images/<id>.ppm       8-bit binary PPM (P6)
    DIR/annotations.jsonl     {"file", "domain", "boxes": [[cx, cy, w, h], ...]} per line
    DIR/manifest.json         {"count", "image_size", "domains"}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import BoundingBox
from .engine import Tensor

logger = logging.getLogger(__name__)

DOMAINS = ("A", "B")
SHAPE_KINDS = ("rectangle", "disc")
MIN_AREA, MAX_AREA = 0.04, 0.25
# instance areas are drawn from a narrower band so several shapes fit without overlap
DRAW_AREA = (0.04, 0.16)
MAX_RETRIES = 100

# [-1, 1] RGB; backgrounds are vertical (top, bottom) gradients
BACKGROUND = {
    "A": (np.array([0.06, 0.62, 0.84]), np.array([0.25, 0.18, 0.10])),
    "B": (np.array([-0.92, -0.92, -0.84]), np.array([-0.84, -0.76, -0.30])),
}
INSTANCE_COLORS_A = np.array([
    [0.90, -0.70, -0.70],
    [0.90, 0.80, -0.80],
    [-0.70, 0.75, -0.60],
    [0.95, 0.20, -0.85],
    [0.85, -0.75, 0.70],
    [-0.20, -0.80, 0.80],
])
NIGHT_RIM = np.array([0.95, 0.92, 0.70])


def night_tone(color: np.ndarray) -> np.ndarray:
    """Desaturated, darker version of a day colour."""
    return 0.55 * color - 0.1


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    image_size: int = 64
    n_instances: int = 2
    domain: str = "A"
    kinds: tuple[str, ...] = SHAPE_KINDS

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if not 0 <= self.n_instances <= 6:
            raise ValueError("n_instances must be in [0, 6]")
        if self.image_size % 4 or self.image_size < 8:
            raise ValueError("image_size must be divisible by 4 and >= 8")
        if not set(self.kinds) <= set(SHAPE_KINDS) or not self.kinds:
            raise ValueError(f"shape kinds must be a non-empty subset of {SHAPE_KINDS}")


@dataclass
class Sample:
    image: np.ndarray              # 3×H×W in [-1, 1]
    boxes: list[BoundingBox]
    domain: str
    id: str = ""
    kinds: list[str] = field(default_factory=list)


def background(domain: str, size: int) -> np.ndarray:
    top, bottom = BACKGROUND[domain]
    t = ((np.arange(size) + 0.5) / size)[None, :, None]
    img = top[:, None, None] * (1 - t) + bottom[:, None, None] * t
    return np.broadcast_to(img, (3, size, size)).copy()


def _overlaps(a, b) -> bool:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    return ax0 < bx0 + bw and bx0 < ax0 + aw and ay0 < by0 + bh and by0 < ay0 + ah


def _draw_box(rng: np.random.Generator, size: int, kind: str):
    area = rng.uniform(*DRAW_AREA) * size * size
    if kind == "disc":
        w = h = int(round(np.sqrt(area)))
    else:
        aspect = rng.uniform(0.6, 1.6)
        w = int(round(np.sqrt(area * aspect)))
        h = int(round(area / max(w, 1)))
    w, h = min(max(w, 2), size), min(max(h, 2), size)
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    return x0, y0, w, h


def _shape_mask(kind: str, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if kind == "rectangle":
        mask[y0:y0 + h, x0:x0 + w] = True
        return mask
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = x0 + w / 2, y0 + h / 2
    mask[((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0] = True
    return mask


def _rim(mask: np.ndarray) -> np.ndarray:
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    inner[0, :] = inner[-1, :] = False
    inner[:, 0] = inner[:, -1] = False
    return mask & ~inner


def gen_scene(spec: SceneSpec) -> Sample:
    """Render one scene; deterministic in ``spec``.

    Geometry and colour indices come from the seed alone, so the two domains
    with equal seeds differ only in palette.
    """
    size = spec.image_size
    rng = np.random.default_rng(spec.seed)
    placed, kinds, colors = [], [], []
    for i in range(spec.n_instances):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        color = int(rng.integers(len(INSTANCE_COLORS_A)))
        for _ in range(MAX_RETRIES):
            box = _draw_box(rng, size, kind)
            frac = box[2] * box[3] / (size * size)
            if MIN_AREA <= frac <= MAX_AREA and not any(_overlaps(box, p) for p in placed):
                placed.append(box)
                kinds.append(kind)
                colors.append(color)
                break
        else:
            logger.warning("gen_scene(seed=%d): placed %d of %d instances", spec.seed, i,
                           spec.n_instances)
            break

    img = background(spec.domain, size)
    for (x0, y0, w, h), kind, ci in zip(placed, kinds, colors):
        mask = _shape_mask(kind, x0, y0, w, h, size)
        day = INSTANCE_COLORS_A[ci]
        if spec.domain == "A":
            img[:, mask] = day[:, None]
        else:
            img[:, mask] = night_tone(day)[:, None]
            img[:, _rim(mask)] = NIGHT_RIM[:, None]
    boxes = [BoundingBox(x0 + w / 2, y0 + h / 2, float(w), float(h)) for x0, y0, w, h in placed]
    return Sample(np.clip(img, -1.0, 1.0), boxes, spec.domain, f"{spec.domain}{spec.seed:06d}", kinds)


def make_domain(domain: str, n: int, seed: int, image_size: int = 64,
                max_instances: int = 4) -> list[Sample]:
    """``n`` scenes with 1..max_instances shapes; per-scene seeds derive from ``seed``."""
    seeds = np.random.default_rng([seed, DOMAINS.index(domain)]).integers(0, 2**31 - 1, size=n)
    counts = np.random.default_rng([seed, DOMAINS.index(domain), 1]).integers(1, max_instances + 1, size=n)
    return [gen_scene(SceneSpec(int(s), image_size, int(k), domain)) for s, k in zip(seeds, counts)]


# -- PPM / dataset I/O --------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    v = (np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * 255.0
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0 * 2.0 - 1.0


def write_ppm(path, img: np.ndarray) -> None:
    """Write a 3×H×W [-1, 1] image as binary P6."""
    q = to_uint8(img)
    _, h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} bytes of pixels, found {data.size}")
    return from_uint8(data.reshape(h, w, 3).transpose(2, 0, 1))


def write_dataset(samples, directory) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/{s.id}.ppm"
        write_ppm(d / rel, s.image)
        lines.append(json.dumps({"file": rel, "domain": s.domain,
                                 "boxes": [b.as_list() for b in s.boxes]}))
    (d / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))
    sizes = sorted({int(s.image.shape[-1]) for s in samples})
    manifest = {"count": len(samples), "image_size": sizes[0] if len(sizes) == 1 else sizes,
                "domains": sorted({s.domain for s in samples})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_dataset(directory) -> list[Sample]:
    d = Path(directory)
    ann = d / "annotations.jsonl"
    if not ann.exists():
        if d.is_dir() and not any(d.iterdir()):
            return []
        raise FileNotFoundError(f"missing annotation file {ann}")
    samples = []
    for lineno, line in enumerate(ann.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rel, domain, boxes = rec["file"], rec["domain"], rec["boxes"]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise ValueError(f"{ann}:{lineno}: malformed annotation ({err})") from None
        path = d / rel
        if not path.exists():
            raise FileNotFoundError(f"{ann}:{lineno}: missing image {path}")
        samples.append(Sample(read_ppm(path), [BoundingBox(*map(float, b)) for b in boxes],
                              domain, Path(rel).stem))
    return samples


def load_batch(samples, indices, dtype=None) -> tuple[Tensor, list[list[BoundingBox]]]:
    """Stack the selected images; boxes stay a ragged per-sample list."""
    chosen = [samples[i] for i in indices]
    shapes = {s.image.shape for s in chosen}
    if len(shapes) > 1:
        raise ValueError(f"load_batch: heterogeneous image sizes {sorted(shapes)}")
    arr = np.stack([s.image for s in chosen])
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr), [list(s.boxes) for s in chosen]
