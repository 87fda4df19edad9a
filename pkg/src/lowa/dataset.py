"""Annotation records, JSON/PPM ingestion and the synthetic shapes generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class AnnotationError(ValueError):
    pass


@dataclass
class Instance:
    id: int
    box: tuple  # cx, cy, w, h normalised
    class_label: str
    attributes: list = field(default_factory=list)

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        seen, attrs = set(), []
        for a in self.attributes:
            if a not in seen:
                seen.add(a)
                attrs.append(a)
        self.attributes = attrs


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray | None
    instances: list
    file: str | None = None

    def load_pixels(self, root=None) -> np.ndarray:
        if self.pixels is None:
            path = Path(self.file) if root is None else Path(root) / self.file
            self.pixels = read_ppm(path)
        return self.pixels


# ---------------------------------------------------------------------------
# validation and JSON schema
# ---------------------------------------------------------------------------

def validate_box(box, where: str) -> tuple:
    try:
        cx, cy, w, h = (float(v) for v in box)
    except (TypeError, ValueError):
        raise AnnotationError(f"{where}: bbox must be four numbers, got {box!r}") from None
    if not all(math.isfinite(v) for v in (cx, cy, w, h)):
        raise AnnotationError(f"{where}: bbox has non-finite values")
    if w <= 0 or h <= 0:
        raise AnnotationError(f"{where}: zero-area bbox (w={w}, h={h}) rejected")
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        raise AnnotationError(f"{where}: bbox centre ({cx}, {cy}) outside [0, 1]")
    return cx, cy, w, h


def _parse_instance(obj, image_id) -> Instance:
    where = f"image {image_id!r}"
    if not isinstance(obj, dict):
        raise AnnotationError(f"{where}: instance must be an object")
    if "id" not in obj:
        raise AnnotationError(f"{where}: instance missing field 'id'")
    where = f"image {image_id!r} instance {obj['id']!r}"
    for key in ("bbox", "class"):
        if key not in obj:
            raise AnnotationError(f"{where}: missing field {key!r}")
    cls = obj["class"]
    if not isinstance(cls, str) or not cls.strip():
        raise AnnotationError(f"{where}: field 'class' must be a non-empty string")
    attrs = obj.get("attributes", [])
    if not isinstance(attrs, list) or not all(isinstance(a, str) and a for a in attrs):
        raise AnnotationError(f"{where}: field 'attributes' must be a list of strings")
    return Instance(obj["id"], validate_box(obj["bbox"], where), cls, attrs)


def resize_nearest(pixels: np.ndarray, size: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if h == size and w == size:
        return pixels
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return pixels[rows][:, cols]


def records_from_json(doc: dict, root=None, image_size: int | None = None) -> list[ImageRecord]:
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise AnnotationError("top level must be an object with an 'images' list")
    records = []
    for k, img in enumerate(doc["images"]):
        if not isinstance(img, dict) or "id" not in img:
            raise AnnotationError(f"images[{k}]: missing field 'id'")
        iid = img["id"]
        insts = img.get("instances")
        if not isinstance(insts, list):
            raise AnnotationError(f"image {iid!r}: field 'instances' must be a list")
        instances = [_parse_instance(o, iid) for o in insts]
        ids = [i.id for i in instances]
        if len(set(ids)) != len(ids):
            raise AnnotationError(f"image {iid!r}: duplicate instance ids")
        pixels, file = None, img.get("file")
        if "pixels" in img:
            pixels = np.asarray(img["pixels"], dtype=np.float64)
            if pixels.ndim != 3:
                raise AnnotationError(f"image {iid!r}: field 'pixels' must be H x W x C")
        elif file is None:
            raise AnnotationError(f"image {iid!r}: needs 'file' or 'pixels'")
        rec = ImageRecord(str(iid), pixels, instances, file)
        if pixels is None and root is not None:
            rec.load_pixels(root)
        if image_size is not None and rec.pixels is not None:
            rec.pixels = resize_nearest(rec.pixels, image_size)
        records.append(rec)
    return records


def load_annotations(path, image_size: int | None = None) -> list[ImageRecord]:
    """Read and validate an annotation JSON file; PPM files resolve next to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON ({exc})") from None
    return records_from_json(doc, root=path.parent, image_size=image_size)


def records_to_json(records: Sequence[ImageRecord], embed_pixels: bool = False) -> dict:
    images = []
    for r in records:
        entry = {"id": r.id}
        if embed_pixels:
            entry["pixels"] = np.asarray(r.pixels).tolist()
        else:
            entry["file"] = r.file
        entry["instances"] = [
            {"id": i.id, "bbox": list(i.box), "class": i.class_label, "attributes": list(i.attributes)}
            for i in r.instances
        ]
        images.append(entry)
    return {"images": images}


def save_annotations(records: Sequence[ImageRecord], path, image_dir: str | None = "images") -> None:
    """Write annotations; with ``image_dir`` the pixels go to PPM files beside the JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image_dir is not None:
        (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
        for r in records:
            r.file = f"{image_dir}/{r.id}.ppm"
            write_ppm(path.parent / r.file, r.pixels)
    doc = records_to_json(records, embed_pixels=image_dir is None)
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")


def write_ppm(path, pixels: np.ndarray) -> None:
    px = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts, pos = [], 0
    while len(parts) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        parts.append(blob[pos:end])
        pos = end
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise AnnotationError(f"{path}: only binary 8-bit PPM (P6) is supported")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(blob[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise AnnotationError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "orange": (1.00, 0.55, 0.00),
    "purple": (0.60, 0.15, 0.80),
}
SHAPES = ("square", "circle", "triangle", "bar")
SIZES = {"small": (14, 18), "large": (24, 30)}
FILLS = ("solid", "hollow")
ORIENTATIONS = ("upright", "on its side")
ATTRIBUTE_CATEGORIES = {
    "color": tuple(PALETTE),
    "size": tuple(SIZES),
    "fill": FILLS,
    "orientation": ORIENTATIONS,
}
# class x colour pairs never rendered in the training split
WITHHELD = (("square", "blue"), ("circle", "red"), ("triangle", "green"), ("bar", "yellow"))


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    num_images: int = 1000
    min_objects: int = 1
    max_objects: int = 3
    split: str = "train"  # train | heldout
    withheld: tuple = WITHHELD
    novel_fraction: float = 0.3
    supersample: int = 4
    gap: int = 1


def attribute_category(attribute: str) -> str:
    for cat, values in ATTRIBUTE_CATEGORIES.items():
        if attribute in values:
            return cat
    return "other"


def _extent(shape: str, side: float, orientation: str | None):
    if shape == "bar":
        short = side * 0.4
        return (short, side) if orientation == "upright" else (side, short)
    return side, side


def _sdf(shape, xs, ys, cx, cy, w, h):
    """Signed distance-like field: negative inside, ~distance to the edge."""
    if shape == "circle":
        return np.hypot(xs - cx, ys - cy) - w / 2
    if shape == "triangle":
        x0, x1, top, base = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
        edges = [((x0, base), (cx, top)), ((cx, top), (x1, base)), ((x1, base), (x0, base))]
        d = np.full(xs.shape, -np.inf)
        for (ax, ay), (bx, by) in edges:
            nx, ny = by - ay, ax - bx  # outward for clockwise-in-image order
            norm = math.hypot(nx, ny)
            d = np.maximum(d, ((xs - ax) * nx + (ys - ay) * ny) / norm)
        return d
    dx = np.abs(xs - cx) - w / 2
    dy = np.abs(ys - cy) - h / 2
    outside = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
    return outside + np.minimum(np.maximum(dx, dy), 0)


def _render(canvas, shape, color, fill, cx, cy, w, h, ss):
    size = canvas.shape[0]
    x0, x1 = max(int(cx - w / 2) - 1, 0), min(int(math.ceil(cx + w / 2)) + 1, size)
    y0, y1 = max(int(cy - h / 2) - 1, 0), min(int(math.ceil(cy + h / 2)) + 1, size)
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).ravel()
    X, Y = np.meshgrid(xs, ys)
    d = _sdf(shape, X, Y, cx, cy, w, h)
    inside = d <= 0
    if fill == "hollow":
        thickness = 1.5 if shape == "bar" else max(1.5, 0.12 * min(w, h))
        inside &= d > -thickness
    cov = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    region = canvas[y0:y1, x0:x1]
    region[:] = region * (1 - cov[..., None]) + np.asarray(color) * cov[..., None]


def _draw_instance(rng, spec: SyntheticSpec, combo_ok):
    for _ in range(1000):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = tuple(PALETTE)[int(rng.integers(len(PALETTE)))]
        if combo_ok(shape, color):
            break
    else:  # pragma: no cover - only with a pathological withheld list
        raise ValueError("cannot draw a class/colour pair under the withheld constraints")
    size = tuple(SIZES)[int(rng.integers(len(SIZES)))]
    fill = FILLS[int(rng.integers(len(FILLS)))]
    orientation = ORIENTATIONS[int(rng.integers(len(ORIENTATIONS)))] if shape == "bar" else None
    lo, hi = SIZES[size]
    side = (lo + (hi - lo) * rng.random()) * spec.image_size / 64.0
    w, h = _extent(shape, side, orientation)
    attrs = [color, size, fill] + ([orientation] if orientation else [])
    return shape, color, fill, attrs, w, h


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[ImageRecord]:
    """Render ``spec.num_images`` images of non-overlapping coloured shapes.

    Pixels are quantised to multiples of 1/255 so PPM export round-trips.
    """
    S = spec.image_size
    biggest = SIZES["large"][1] * S / 64.0
    if biggest + 2 * spec.gap > S or spec.min_objects < 0 or spec.max_objects < spec.min_objects:
        raise ValueError("synthetic spec cannot place its objects without occlusion")
    if spec.max_objects * (biggest + spec.gap) ** 2 > 0.9 * S * S:
        raise ValueError("synthetic spec asks for more object area than the image holds")
    rng = np.random.default_rng([seed, 0 if spec.split == "train" else 1])
    withheld = set(spec.withheld)
    records = []
    for n in range(spec.num_images):
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        for _attempt in range(200):
            placed = []
            ok = True
            for _ in range(count):
                if spec.split == "train":
                    combo_ok = lambda s, c: (s, c) not in withheld
                elif rng.random() < spec.novel_fraction:
                    combo_ok = lambda s, c: (s, c) in withheld
                else:
                    combo_ok = lambda s, c: True
                shape, color, fill, attrs, w, h = _draw_instance(rng, spec, combo_ok)
                for _try in range(50):
                    cx = w / 2 + spec.gap + rng.random() * (S - w - 2 * spec.gap)
                    cy = h / 2 + spec.gap + rng.random() * (S - h - 2 * spec.gap)
                    if all(abs(cx - px) * 2 >= w + pw + 2 * spec.gap or abs(cy - py) * 2 >= h + ph + 2 * spec.gap
                           for (_, _, _, _, px, py, pw, ph) in placed):
                        placed.append((shape, color, fill, attrs, cx, cy, w, h))
                        break
                else:
                    ok = False
                    break
            if ok:
                break
        else:
            raise ValueError(f"could not place {count} objects in image {n}")
        level = 0.25 + 0.35 * rng.random()
        noise = rng.normal(0.0, 0.04, size=(S, S, 1))
        canvas = np.repeat(np.clip(level + noise, 0, 1), 3, axis=2)
        instances = []
        for k, (shape, color, fill, attrs, cx, cy, w, h) in enumerate(placed):
            rgb = np.clip(np.asarray(PALETTE[color]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
            _render(canvas, shape, rgb, fill, cx, cy, w, h, spec.supersample)
            instances.append(Instance(k, (cx / S, cy / S, w / S, h / S), shape, attrs))
        pixels = np.rint(canvas * 255.0) / 255.0
        records.append(ImageRecord(f"{spec.split}{n:05d}", pixels, instances))
    return records


def dominant_color(pixels: np.ndarray, box_cxcywh, min_saturation: float = 0.3) -> str | None:
    """Majority palette colour among saturated pixels inside a box."""
    S = pixels.shape[0]
    cx, cy, w, h = box_cxcywh
    x0, x1 = int(max((cx - w / 2) * S, 0)), int(math.ceil(min((cx + w / 2) * S, S)))
    y0, y1 = int(max((cy - h / 2) * S, 0)), int(math.ceil(min((cy + h / 2) * S, S)))
    patch = pixels[y0:y1, x0:x1].reshape(-1, 3)
    sat = patch.max(axis=1) - patch.min(axis=1)
    patch = patch[sat > min_saturation]
    if len(patch) == 0:
        return None
    names = list(PALETTE)
    ref = np.array([PALETTE[n] for n in names])
    nearest = np.argmin(((patch[:, None, :] - ref[None]) ** 2).sum(-1), axis=1)
    return names[int(np.bincount(nearest, minlength=len(names)).argmax())]


def label_sets(records: Sequence[ImageRecord]):
    classes, attributes = set(), set()
    for r in records:
        for i in r.instances:
            classes.add(i.class_label)
            attributes.update(i.attributes)
    return sorted(classes), sorted(attributes)


def combos(records: Sequence[ImageRecord]) -> set:
    """All (class, attribute) pairs that occur."""
    return {(i.class_label, a) for r in records for i in r.instances for a in i.attributes}


# ---------------------------------------------------------------------------
# frequency strata
# ---------------------------------------------------------------------------

@dataclass
class AttributeFrequencyTable:
    counts: dict
    split: dict  # attribute -> head | medium | tail

    def members(self, name: str) -> list:
        return sorted(a for a, s in self.split.items() if s == name)


def attribute_counts(records: Sequence[ImageRecord]) -> dict:
    counts: dict = {}
    for r in records:
        for i in r.instances:
            for a in i.attributes:
                counts[a] = counts.get(a, 0) + 1
    return counts


def frequency_split(records, head_pct: float = 2 / 3, tail_pct: float = 1 / 3,
                    override: dict | None = None) -> AttributeFrequencyTable:
    """Partition attributes by occurrence rank.

    Ranking is by count descending, ties by name.  ``head_pct``/``tail_pct``
    are cut points on the ascending-frequency percentile scale: the top
    ``1 - head_pct`` share is head, the bottom ``tail_pct`` share is tail.
    """
    if not 0 < tail_pct < head_pct < 1:
        raise ValueError("need 0 < tail_pct < head_pct < 1")
    counts = records if isinstance(records, dict) else attribute_counts(records)
    ranked = sorted(counts, key=lambda a: (-counts[a], a))
    n = len(ranked)
    n_head = n - math.floor(head_pct * n + 1e-9)
    n_tail = min(math.floor(tail_pct * n + 1e-9), n - n_head)
    split = {}
    for k, a in enumerate(ranked):
        split[a] = "head" if k < n_head else ("tail" if k >= n - n_tail else "medium")
    if override:
        for a, s in override.items():
            if s not in ("head", "medium", "tail"):
                raise ValueError(f"override split for {a!r} must be head/medium/tail, got {s!r}")
            if a in split:
                split[a] = s
    return AttributeFrequencyTable(dict(counts), split)


def load_split_override(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'attribute<TAB>split'")
            out[parts[0]] = parts[1].strip()
    return out
