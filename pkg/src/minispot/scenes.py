"""Deterministic synthetic panel-scene generator.

Each scene is a grayscale image of glyph strings laid out along Catmull-Rom
centerlines, with exact annotations (control points, transcription, box).
Digits render as 7-segment patterns; every other symbol gets a fixed
procedurally generated stroke skeleton, so no font files are involved and
output bytes depend only on (config, seed).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError, InfeasibleConfigError
from .splines import sample_curve

__all__ = [
    "ALPHABET",
    "char_to_id",
    "SceneConfig",
    "SceneAnnotation",
    "TextInstance",
    "generate_scene",
    "generate_dataset",
    "write_dataset",
    "load_dataset",
    "dataset_stats",
    "write_pgm",
    "read_pgm",
]

# 96 symbols: digits, letters, ASCII punctuation, plus two panel-style marks
ALPHABET = string.digits + string.ascii_uppercase + string.ascii_lowercase \
    + string.punctuation + "°±"
assert len(ALPHABET) == 96

_CHAR_TO_ID = {ch: i for i, ch in enumerate(ALPHABET)}


def char_to_id(ch: str) -> int:
    if ch not in _CHAR_TO_ID:
        raise DataError(f"character {ch!r} not in the alphabet")
    return _CHAR_TO_ID[ch]


# -- glyph stroke tables -------------------------------------------------------

# classic 7-segment layout in a unit box, y pointing down
_SEGS = {
    "A": ((0.0, 0.0), (1.0, 0.0)),
    "B": ((1.0, 0.0), (1.0, 0.5)),
    "C": ((1.0, 0.5), (1.0, 1.0)),
    "D": ((0.0, 1.0), (1.0, 1.0)),
    "E": ((0.0, 0.5), (0.0, 1.0)),
    "F": ((0.0, 0.0), (0.0, 0.5)),
    "G": ((0.0, 0.5), (1.0, 0.5)),
}
_DIGIT_SEGS = {
    "0": "ABCDEF", "1": "BC", "2": "ABGED", "3": "ABGCD", "4": "FGBC",
    "5": "AFGCD", "6": "AFGECD", "7": "ABC", "8": "ABCDEFG", "9": "ABCDFG",
}

_LATTICE = [(x, y) for y in (0.0, 0.5, 1.0) for x in (0.0, 0.5, 1.0)]


def _skeleton_strokes(char_index: int) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Fixed pseudo-random 4-stroke skeleton on a 3x3 lattice."""
    rng = np.random.default_rng([char_index, 0x5E6])
    path = [int(rng.integers(9))]
    while len(path) < 5:
        nxt = int(rng.integers(9))
        if nxt != path[-1]:
            path.append(nxt)
    return [(_LATTICE[a], _LATTICE[b]) for a, b in zip(path, path[1:])]


def _glyph_strokes(ch: str) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    if ch in _DIGIT_SEGS:
        return [_SEGS[s] for s in _DIGIT_SEGS[ch]]
    return _skeleton_strokes(char_to_id(ch))


_GLYPH_CACHE = {ch: _glyph_strokes(ch) for ch in ALPHABET}


# -- configuration and annotations ---------------------------------------------


@dataclass
class SceneConfig:
    image_size: int = 256
    instance_range: tuple[int, int] = (16, 22)
    glyph_height_range: tuple[float, float] = (6.0, 24.0)   # pixels
    text_length_range: tuple[int, int] = (2, 6)
    spacing: float = 2.0              # min pixel gap between instances
    max_bow: float = 0.10             # centerline bow, fraction of text length
    background: int = 200
    brightness_jitter: int = 30
    contrast_range: tuple[int, int] = (90, 170)
    max_place_tries: int = 60

    def to_dict(self) -> dict:
        d = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        kwargs = {}
        for k, f in cls.__dataclass_fields__.items():
            if k in d:
                v = d[k]
                kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


def overfit_config() -> SceneConfig:
    """Small sparse scenes for quick-overfit training runs."""
    return SceneConfig(image_size=128, instance_range=(2, 3),
                       glyph_height_range=(12.0, 16.0),
                       text_length_range=(2, 3), spacing=2.0,
                       max_place_tries=200)


@dataclass
class TextInstance:
    control_points: np.ndarray     # [4, 2] normalized
    transcription: str
    bbox: np.ndarray               # [4] normalized (cx, cy, w, h)

    def char_ids(self) -> np.ndarray:
        return np.array([char_to_id(c) for c in self.transcription], dtype=int)


@dataclass
class SceneAnnotation:
    image_id: str
    seed: int
    instances: list[TextInstance] = field(default_factory=list)


# -- rendering ------------------------------------------------------------------


def _curve_point(cp: np.ndarray, t: float) -> np.ndarray:
    dense = sample_curve(cp, 101)
    return dense[int(round(t * 100))]


def _instance_layout(rng: np.random.Generator, config: SceneConfig):
    """Draw one candidate instance: text, curve, glyph geometry (pixels)."""
    size = config.image_size
    length = int(rng.integers(config.text_length_range[0],
                              config.text_length_range[1] + 1))
    text = "".join(ALPHABET[i] for i in rng.integers(0, len(ALPHABET), size=length))
    h = float(rng.uniform(*config.glyph_height_range))
    gw = 0.62 * h
    advance = gw * 1.35
    total = advance * length

    angle = float(rng.uniform(-0.25, 0.25))
    direction = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-direction[1], direction[0]])
    margin = h + 2
    x_hi = size - margin - abs(total * direction[0])
    y_lo = margin + abs(total * direction[1])
    y_hi = size - margin - abs(total * direction[1])
    if x_hi <= margin or y_hi <= y_lo:
        return None  # candidate cannot fit at this scale; caller retries
    x0 = float(rng.uniform(margin, x_hi))
    y0 = float(rng.uniform(y_lo, y_hi))
    start = np.array([x0, y0])
    bow = float(rng.uniform(-config.max_bow, config.max_bow)) * total
    cp_px = np.stack([start + direction * (total * k / 3.0)
                      + normal * bow * np.sin(np.pi * k / 3.0)
                      for k in range(4)])
    cp = cp_px / size
    if np.any(cp < 0.02) or np.any(cp > 0.98):
        return None
    centers = sample_curve(cp, max(length, 2)) * size
    if length == 1:
        centers = np.array([_curve_point(cp, 0.5) * size])
    return text, cp, centers, h, gw


def _instance_extent(centers: np.ndarray, h: float, gw: float) -> tuple[float, float, float, float]:
    x0 = centers[:, 0].min() - gw / 2.0
    x1 = centers[:, 0].max() + gw / 2.0
    y0 = centers[:, 1].min() - h / 2.0
    y1 = centers[:, 1].max() + h / 2.0
    return x0, y0, x1, y1


def _boxes_overlap(a, b, pad: float) -> bool:
    return not (a[2] + pad <= b[0] or b[2] + pad <= a[0]
                or a[3] + pad <= b[1] or b[3] + pad <= a[1])


def generate_scene(config: SceneConfig, seed: int) -> tuple[np.ndarray, SceneAnnotation]:
    """Render one scene; identical (config, seed) pairs give identical bytes."""
    rng = np.random.default_rng([seed, 0xA11CE])
    size = config.image_size
    bg = int(np.clip(config.background
                     + rng.integers(-config.brightness_jitter,
                                    config.brightness_jitter + 1), 60, 255))
    img = Image.new("L", (size, size), color=bg)
    draw = ImageDraw.Draw(img)

    want = int(rng.integers(config.instance_range[0], config.instance_range[1] + 1))
    placed: list[tuple] = []
    extents: list[tuple[float, float, float, float]] = []
    tries = 0
    while len(placed) < want:
        tries += 1
        if tries > config.max_place_tries * want:
            raise InfeasibleConfigError(
                f"could not place {want} instances in a {size}px scene "
                f"(placed {len(placed)}); relax density or scale")
        layout = _instance_layout(rng, config)
        if layout is None:
            continue
        text, cp, centers, h, gw = layout
        ext = _instance_extent(centers, h, gw)
        if ext[0] < 1 or ext[1] < 1 or ext[2] > size - 1 or ext[3] > size - 1:
            continue
        if any(_boxes_overlap(ext, other, config.spacing) for other in extents):
            continue
        placed.append((text, cp, centers, h, gw))
        extents.append(ext)

    annotation = SceneAnnotation(image_id=f"{seed:08d}", seed=seed)
    for (text, cp, centers, h, gw), ext in zip(placed, extents):
        ink = max(0, bg - int(rng.integers(*config.contrast_range)))
        width = max(1, int(round(h / 7.0)))
        for ch, center in zip(text, centers):
            for (ax, ay), (bx, by) in _GLYPH_CACHE[ch]:
                draw.line(
                    [(center[0] + (ax - 0.5) * gw, center[1] + (ay - 0.5) * h),
                     (center[0] + (bx - 0.5) * gw, center[1] + (by - 0.5) * h)],
                    fill=ink, width=width)
        # box covers glyph extents and the sampled centerline
        curve = sample_curve(cp, 25) * size
        x0 = min(ext[0], curve[:, 0].min()) / size
        x1 = max(ext[2], curve[:, 0].max()) / size
        y0 = min(ext[1], curve[:, 1].min()) / size
        y1 = max(ext[3], curve[:, 1].max()) / size
        bbox = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0])
        annotation.instances.append(TextInstance(cp, text, bbox))

    return np.asarray(img, dtype=np.uint8), annotation


def generate_dataset(config: SceneConfig, count: int, base_seed: int):
    return [generate_scene(config, base_seed + i) for i in range(count)]


# -- PGM and dataset IO -----------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if not blob.startswith(b"P5"):
            raise ValueError("not a P5 PGM")
        parts = blob.split(b"\n", 3)
        w, h = (int(v) for v in parts[1].split())
        data = parts[3][: w * h]
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    except Exception as exc:
        raise DataError(f"malformed PGM file {path}: {exc}") from exc


def _annotation_to_json(ann: SceneAnnotation) -> dict:
    return {
        "image_id": ann.image_id,
        "seed": ann.seed,
        "instances": [
            {
                "control_points": inst.control_points.round(9).tolist(),
                "transcription": inst.transcription,
                "bbox": inst.bbox.round(9).tolist(),
            }
            for inst in ann.instances
        ],
    }


def _annotation_from_json(d: dict) -> SceneAnnotation:
    return SceneAnnotation(
        image_id=d["image_id"], seed=d["seed"],
        instances=[TextInstance(np.array(i["control_points"], dtype=np.float64),
                                i["transcription"],
                                np.array(i["bbox"], dtype=np.float64))
                   for i in d["instances"]])


def write_dataset(directory, config: SceneConfig,
                  scenes: list[tuple[np.ndarray, SceneAnnotation]]) -> None:
    """Layout: images/{id}.pgm, annotations.jsonl, config.json."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    with open(directory / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(directory / "annotations.jsonl", "w") as fh:
        for image, ann in scenes:
            write_pgm(directory / "images" / f"{ann.image_id}.pgm", image)
            fh.write(json.dumps(_annotation_to_json(ann), sort_keys=True))
            fh.write("\n")


def load_dataset(directory):
    directory = Path(directory)
    config_path = directory / "config.json"
    ann_path = directory / "annotations.jsonl"
    if not config_path.exists() or not ann_path.exists():
        raise DataError(f"{directory} is not a dataset directory")
    with open(config_path) as fh:
        config = SceneConfig.from_dict(json.load(fh))
    scenes = []
    with open(ann_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ann = _annotation_from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(
                    f"{ann_path}: line {lineno}: malformed annotation ({exc})") from exc
            image_path = directory / "images" / f"{ann.image_id}.pgm"
            if not image_path.exists():
                raise DataError(f"{ann_path}: line {lineno}: missing image "
                                f"{image_path}")
            image = read_pgm(image_path)
            scenes.append((image, ann))
    return config, scenes


def dataset_stats(scenes) -> dict:
    counts = [len(ann.instances) for _, ann in scenes]
    return {
        "num_scenes": len(scenes),
        "total_instances": int(np.sum(counts)) if counts else 0,
        "mean_instances_per_image": float(np.mean(counts)) if counts else 0.0,
    }
