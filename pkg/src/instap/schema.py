"""Dual-granularity sample schema and the shapes-world generator.

A sample is one image or clip with a scene-level caption plus a list of
grounded instances, each carrying a per-frame box trajectory and its own
caption.  Scenes are drawn from a deterministic generator so every box and
caption is exact ground truth.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 230),
    "yellow": (240, 220, 40),
    "purple": (150, 60, 200),
    "orange": (250, 140, 30),
    "white": (245, 245, 245),
    "pink": (250, 120, 180),
}
COLORS = tuple(PALETTE)
DIRECTIONS = {"right": (1, 0), "left": (-1, 0), "up": (0, -1), "down": (0, 1)}
SIZE_THRESHOLD = 12  # sizes below this are captioned "small"

SPECIAL_TOKENS = ("[CLS]", "[PAD]", "[MASK]", "[SEP]", "[UNK]")
CAPTION_WORDS = (
    "a", "the", "and", "it", "starts", "near", "moves", "stays", "still",
    "left", "right", "up", "down", "top", "middle", "bottom", "center",
    "small", "large",
) + SHAPES + COLORS


class DatasetFormatError(ValueError):
    """Raised when a manifest line cannot be parsed."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Box:
    t: int
    x: int
    y: int
    w: int
    h: int

    def as_dict(self) -> dict:
        return {"t": self.t, "x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass
class InstanceAnnotation:
    instance_id: int
    trajectory: list[Box]
    caption: list[str]


@dataclass(eq=False)
class Sample:
    """One image (T = 1) or video.

    ``frames`` is stored as uint8 (T, H, W, 3) so on-disk round trips are
    exact; ``frames01`` gives the [0, 1] float view used by the encoders.
    """

    sample_id: str
    kind: str
    frames: np.ndarray
    global_caption: list[str]
    instances: list[InstanceAnnotation]
    source_id: int

    @property
    def frames01(self) -> np.ndarray:
        return self.frames.astype(np.float64) / 255.0

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.kind == other.kind
            and self.source_id == other.source_id
            and self.global_caption == other.global_caption
            and self.instances == other.instances
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: int
    x: int  # top-left of the bounding square at t = 0
    y: int
    vx: int  # pixels per frame
    vy: int

    def position(self, t: int) -> tuple[int, int]:
        return self.x + self.vx * t, self.y + self.vy * t


@dataclass(frozen=True)
class SceneProgram:
    seed: int
    canvas: tuple[int, int]  # (H, W)
    T: int
    objects: tuple[SceneObject, ...]


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple[int, int] = (64, 64)
    T: int = 4
    object_count: tuple[int, int] = (1, 4)
    sizes: tuple[int, ...] = (8, 16)
    speeds: tuple[int, ...] = (1, 2)
    exclude_combos: tuple[tuple[str, str], ...] = ()
    require_combo: tuple[str, str] | None = None
    allow_overlap: bool = False


class Vocab:
    """Closed word list; the line number in the vocab file is the id."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if words[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise ValueError(f"vocab must start with {SPECIAL_TOKENS}")
        if len(set(words)) != len(words):
            raise ValueError("vocab words must be unique")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.words == other.words

    cls_id = property(lambda self: self.index["[CLS]"])
    pad_id = property(lambda self: self.index["[PAD]"])
    mask_id = property(lambda self: self.index["[MASK]"])
    sep_id = property(lambda self: self.index["[SEP]"])
    unk_id = property(lambda self: self.index["[UNK]"])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in SPECIAL_TOKENS)

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words))

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text().splitlines())


def default_vocab() -> Vocab:
    return Vocab(SPECIAL_TOKENS + CAPTION_WORDS)


# ---------------------------------------------------------------------------
# generation


def _motion_phrase(obj: SceneObject) -> str:
    for name, (dx, dy) in DIRECTIONS.items():
        if (np.sign(obj.vx), np.sign(obj.vy)) == (dx, dy):
            return f"moves {name}"
    return "stays still"


def _size_word(size: int) -> str:
    return "small" if size < SIZE_THRESHOLD else "large"


def _region_phrase(obj: SceneObject, canvas: tuple[int, int]) -> str:
    H, W = canvas
    cy, cx = 3 * (2 * obj.y + obj.size), 3 * (2 * obj.x + obj.size)
    vert = ("top", "middle", "bottom")[min(cy // (2 * H), 2)]
    horiz = ("left", "center", "right")[min(cx // (2 * W), 2)]
    return f"{vert} {horiz}"


def _overlaps(a: SceneObject, b: SceneObject, T: int) -> bool:
    for t in range(T):
        ax, ay = a.position(t)
        bx, by = b.position(t)
        if ax < bx + b.size and bx < ax + a.size and ay < by + b.size and by < ay + a.size:
            return True
    return False


def _place(rng, shape, color, size, config: SceneConfig, T: int) -> SceneObject:
    H, W = config.canvas
    if T > 1:
        direction = rng.integers(len(DIRECTIONS) + 1)
        speed = int(config.speeds[rng.integers(len(config.speeds))])
    else:
        direction, speed = len(DIRECTIONS), 0
    if direction == len(DIRECTIONS):
        vx = vy = 0
    else:
        dx, dy = list(DIRECTIONS.values())[direction]
        vx, vy = dx * speed, dy * speed
    travel_x, travel_y = vx * (T - 1), vy * (T - 1)
    x_lo, x_hi = max(0, -travel_x), W - size - max(0, travel_x)
    y_lo, y_hi = max(0, -travel_y), H - size - max(0, travel_y)
    if x_lo > x_hi or y_lo > y_hi:
        # path does not fit at this speed; keep the object still
        vx = vy = 0
        x_lo, x_hi, y_lo, y_hi = 0, W - size, 0, H - size
    x = int(rng.integers(x_lo, x_hi + 1))
    y = int(rng.integers(y_lo, y_hi + 1))
    return SceneObject(shape, color, int(size), x, y, int(vx), int(vy))


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> SceneProgram:
    """Draw a scene program; a pure function of ``(seed, config)``."""
    H, W = config.canvas
    lo, hi = config.object_count
    if config.T < 1:
        raise ValueError("T must be >= 1")
    if not (1 <= lo <= hi <= 8):
        raise ValueError(f"object count range {config.object_count} must lie within [1, 8]")
    too_big = [s for s in config.sizes if s > min(H, W) or s < 2]
    if too_big:
        raise ValueError(f"object size {too_big[0]} cannot be contained in a {H}x{W} canvas")

    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    combos = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in set(config.exclude_combos)]
    objects: list[SceneObject] = []
    for k in range(n):
        if k == 0 and config.require_combo is not None:
            color, shape = config.require_combo
        else:
            color, shape = combos[rng.integers(len(combos))]
        size = int(config.sizes[rng.integers(len(config.sizes))])
        for _ in range(64):
            obj = _place(rng, shape, color, size, config, config.T)
            if config.allow_overlap or not any(_overlaps(obj, o, config.T) for o in objects):
                break
        objects.append(obj)
    return SceneProgram(int(seed), (int(H), int(W)), int(config.T), tuple(objects))


def _tight_box(mask: np.ndarray, t: int, x0: int, y0: int) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(t, x0 + int(cols[0]), y0 + int(rows[0]),
               int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def global_caption_for(program: SceneProgram) -> list[str]:
    phrases = [f"a {o.color} {o.shape} {_motion_phrase(o)}" for o in program.objects]
    return [" and ".join(phrases[i:i + 2]) for i in range(0, len(phrases), 2)]


def instance_caption_for(obj: SceneObject, canvas: tuple[int, int]) -> list[str]:
    return [
        f"a {_size_word(obj.size)} {obj.color} {obj.shape} {_motion_phrase(obj)}",
        f"it starts near the {_region_phrase(obj, canvas)}",
    ]


def render_sample(program: SceneProgram, sample_id: str | None = None) -> Sample:
    H, W = program.canvas
    T = program.T
    objs = program.objects
    frames = np.zeros((T, H, W, 3), dtype=np.uint8)
    xs = np.array([[o.position(t)[0] for t in range(T)] for o in objs], dtype=np.int64).reshape(len(objs), T)
    ys = np.array([[o.position(t)[1] for t in range(T)] for o in objs], dtype=np.int64).reshape(len(objs), T)
    kernels.rasterize(
        frames,
        [SHAPES.index(o.shape) for o in objs],
        [o.size for o in objs],
        xs,
        ys,
        np.array([PALETTE[o.color] for o in objs], dtype=np.uint8).reshape(len(objs), 3),
    )
    instances = []
    for k, o in enumerate(objs):
        mask = kernels.object_mask(SHAPES.index(o.shape), o.size)
        traj = [_tight_box(mask, t, int(xs[k, t]), int(ys[k, t])) for t in range(T)]
        instances.append(InstanceAnnotation(k, traj, instance_caption_for(o, program.canvas)))
    return Sample(
        sample_id=sample_id or f"scene-{program.seed:016x}",
        kind="image" if T == 1 else "video",
        frames=frames,
        global_caption=global_caption_for(program),
        instances=instances,
        source_id=program.seed,
    )


SPLIT_CODES = {"train": 0, "test": 1, "zero": 2}
HELD_OUT_COMBO = ("purple", "triangle")


def scene_seed(seed: int, split: str, index: int) -> int:
    if not 0 <= index < 1 << 20:
        raise ValueError("scene index out of range")
    return (int(seed) << 24) | (SPLIT_CODES[split] << 20) | index


def generate_dataset(
    n_scenes: int,
    seed: int,
    split: str = "train",
    config: SceneConfig = SceneConfig(),
    image_fraction: float = 0.0,
) -> list[Sample]:
    """Render ``n_scenes`` samples for one split.

    ``train``/``test`` never contain the held-out colour/shape pair; ``zero``
    always contains it and uses a disjoint seed range.
    """
    if split == "zero":
        config = _replace(config, require_combo=HELD_OUT_COMBO, exclude_combos=())
    else:
        config = _replace(config, exclude_combos=tuple(config.exclude_combos) + (HELD_OUT_COMBO,))
    samples = []
    for i in range(n_scenes):
        s = scene_seed(seed, split, i)
        cfg = config
        if image_fraction > 0 and np.random.default_rng([s, 1]).random() < image_fraction:
            cfg = _replace(config, T=1)
        samples.append(render_sample(generate_scene(s, cfg), sample_id=f"{split}-{seed}-{i:06d}"))
    return sorted(samples, key=lambda smp: smp.sample_id)


def _replace(config: SceneConfig, **kw) -> SceneConfig:
    d = dict(config.__dict__)
    d.update(kw)
    return SceneConfig(**d)


# ---------------------------------------------------------------------------
# validation


def validate_sample(sample: Sample) -> list[str]:
    """Return every invariant violation; an empty list means the sample is valid."""
    out: list[str] = []
    frames = sample.frames
    if frames.ndim != 4 or frames.shape[-1] != 3:
        out.append(f"frames: FrameStack shape (T, H, W, 3) violated, got {frames.shape}")
        return out
    T, H, W, _ = frames.shape
    if frames.dtype != np.uint8 and (np.any(frames < 0) or np.any(frames > 1)):
        out.append("frames: values in [0, 1] violated")
    if sample.kind not in ("image", "video"):
        out.append(f"kind: Sample.kind in {{image, video}} violated ({sample.kind!r})")
    if sample.kind == "image" and T != 1:
        out.append(f"kind: Sample.kind = image => T = 1 violated (T={T})")
    if T < 1:
        out.append("frames: T >= 1 violated")
    seen_ids = set()
    for k, inst in enumerate(sample.instances):
        where = f"instances[{k}]"
        if inst.instance_id in seen_ids:
            out.append(f"{where}: unique instance_id violated ({inst.instance_id})")
        seen_ids.add(inst.instance_id)
        if not inst.trajectory:
            out.append(f"{where}: InstanceAnnotation.trajectory non-empty violated")
        ts = [b.t for b in inst.trajectory]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            out.append(f"{where}: InstanceAnnotation.trajectory frame indices strictly increasing violated ({ts})")
        if not inst.caption:
            out.append(f"{where}: InstanceAnnotation.caption at least one sentence violated")
        for j, sent in enumerate(inst.caption):
            if not sent.strip():
                out.append(f"{where}.caption[{j}]: sentence non-empty violated")
        for j, b in enumerate(inst.trajectory):
            bw = f"{where}.trajectory[{j}]"
            if b.t < 0 or b.t >= T:
                out.append(f"{bw}: Box.t in [0, T) violated (t={b.t}, T={T})")
            if b.w <= 0:
                out.append(f"{bw}: Box.w > 0 violated (w={b.w})")
            if b.h <= 0:
                out.append(f"{bw}: Box.h > 0 violated (h={b.h})")
            if b.x < 0:
                out.append(f"{bw}: Box.x >= 0 violated (x={b.x})")
            if b.y < 0:
                out.append(f"{bw}: Box.y >= 0 violated (y={b.y})")
            if b.w > 0 and b.x + b.w > W:
                out.append(f"{bw}: Box.x + Box.w <= frame width violated ({b.x}+{b.w} > {W})")
            if b.h > 0 and b.y + b.h > H:
                out.append(f"{bw}: Box.y + Box.h <= frame height violated ({b.y}+{b.h} > {H})")
    return out


# ---------------------------------------------------------------------------
# text


_WORD = re.compile(r"[a-z\[\]]+")


def split_words(sentence: str) -> list[str]:
    return _WORD.findall(sentence.lower())


def tokenize(sentence: str, vocab: Vocab, max_len: int) -> list[int]:
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [vocab.cls_id] + [vocab[w] for w in split_words(sentence)]
    ids = ids[:max_len]
    return ids + [vocab.pad_id] * (max_len - len(ids))


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    skip = {vocab.cls_id, vocab.pad_id}
    return " ".join(vocab.words[i] for i in ids if i not in skip)


def sample_caption_sentence(caption: Sequence[str], epoch: int, rng, cycling: bool = True) -> str:
    """Pick the sentence used for ``caption`` at ``epoch``.

    With cycling, the caption's sentence order is a permutation drawn from a
    copy of ``rng`` (the caller's generator is not advanced), so passing the
    same per-caption generator every epoch walks the full permutation once per
    ``len(caption)`` epochs.  Without cycling, a sentence is drawn uniformly.
    """
    if not caption:
        raise ValueError("caption has no sentences")
    n = len(caption)
    if n == 1:
        return caption[0]
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    if not cycling:
        return caption[int(rng.integers(n))]
    order = copy.deepcopy(rng).permutation(n)
    return caption[int(order[epoch % n])]


# ---------------------------------------------------------------------------
# on-disk format


MANIFEST = "manifest.jsonl"


def write_ppm(path, frame: np.ndarray) -> None:
    H, W, _ = frame.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (W, H))
        f.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DatasetFormatError(f"{path}: only 8-bit binary PPM (P6) is supported")
    W, H = int(fields[1]), int(fields[2])
    raster = data[pos:pos + W * H * 3]
    if len(raster) != W * H * 3:
        raise DatasetFormatError(f"{path}: raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(H, W, 3).copy()


def sample_to_record(sample: Sample, frame_paths: list[str]) -> dict:
    return {
        "sample_id": sample.sample_id,
        "kind": sample.kind,
        "source_id": int(sample.source_id),
        "frames": frame_paths,
        "global_caption": list(sample.global_caption),
        "instances": [
            {
                "instance_id": inst.instance_id,
                "caption": list(inst.caption),
                "trajectory": [b.as_dict() for b in inst.trajectory],
            }
            for inst in sample.instances
        ],
    }


def write_dataset(samples: Iterable[Sample], path) -> Path:
    """Write samples under directory ``path``; returns the manifest path."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for smp in samples:
        rel = []
        for t in range(smp.num_frames):
            name = f"frames/{smp.sample_id}_{t:03d}.ppm"
            write_ppm(root / name, smp.frames[t])
            rel.append(name)
        lines.append(json.dumps(sample_to_record(smp, rel), sort_keys=True))
    manifest = root / MANIFEST
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def _record_to_sample(rec: dict, root: Path) -> Sample:
    frames = []
    for rel in rec["frames"]:
        fp = root / rel
        if not fp.is_file():
            raise FileNotFoundError(f"missing frame file: {fp}")
        frames.append(read_ppm(fp))
    instances = [
        InstanceAnnotation(
            int(inst["instance_id"]),
            [Box(int(b["t"]), int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"])) for b in inst["trajectory"]],
            [str(s) for s in inst["caption"]],
        )
        for inst in rec["instances"]
    ]
    return Sample(
        sample_id=str(rec["sample_id"]),
        kind=str(rec["kind"]),
        frames=np.stack(frames) if frames else np.zeros((0, 0, 0, 3), dtype=np.uint8),
        global_caption=[str(s) for s in rec["global_caption"]],
        instances=instances,
        source_id=int(rec["source_id"]),
    )


def read_dataset(path) -> list[Sample]:
    """Read a dataset directory (or its manifest file)."""
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    root = manifest.parent
    samples = []
    with open(manifest) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(_record_to_sample(rec, root))
            except FileNotFoundError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{manifest}: line {lineno}: malformed record ({exc})") from exc
    return samples


def iter_instances(samples: Sequence[Sample]):
    """Yield (sample, instance) pairs in sample order."""
    for smp in samples:
        for inst in smp.instances:
            yield smp, inst


__all__ = [
    "Box", "InstanceAnnotation", "Sample", "SceneObject", "SceneProgram", "SceneConfig",
    "Vocab", "DatasetFormatError", "default_vocab", "generate_scene", "render_sample",
    "generate_dataset", "validate_sample", "tokenize", "detokenize", "sample_caption_sentence",
    "write_dataset", "read_dataset", "iter_instances", "HELD_OUT_COMBO",
]
