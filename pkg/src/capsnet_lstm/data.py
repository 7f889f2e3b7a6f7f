"""Frame-directory datasets: metadata, clip assembly, splitting, decoding and batching.

Dataset layout::

    root/metadata.json          {"<clip_id>": {"label": "REAL" | "FAKE"}, ...}
    root/<clip_id>/<frame>.ppm  frames sorted by filename (PNG also accepted)
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, DatasetError, ImageFormatError, ValidationError
from .tensor import seeded_rng
from .training import CLASS_NAMES, one_hot

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".ppm", ".png")
TARGET_SHAPE = (5, 128, 128, 3)


class MetadataParseError(DatasetError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    frame_paths: tuple
    label: str

    @property
    def label_index(self) -> int:
        return CLASS_NAMES.index(self.label)


@dataclass
class SplitPlan:
    train: list
    validation: list
    test: list
    seed: int
    test_ratio: float = 0.2
    val_ratio: float = 0.2

    def segment(self, name: str) -> list:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


# ---------------------------------------------------------------------------
# image codecs


def _ppm_header(data: bytes, path) -> tuple[int, int, int, int]:
    """Parse ``P6 <w> <h> <maxval>`` and return (w, h, maxval, payload offset)."""
    if data[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError as exc:
            raise ImageFormatError(f"{path}: malformed PPM header") from exc
    # exactly one whitespace byte separates the header from the raster
    return tokens[0], tokens[1], tokens[2], pos + 1


def decode_image(path) -> np.ndarray:
    """Decode a frame to a ``uint8`` array ``[H, W, 3]``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read frame ({exc})") from exc
    if data[:2] == b"P6":
        width, height, maxval, off = _ppm_header(data, path)
        if maxval != 255:
            raise ImageFormatError(f"{path}: unsupported PPM maxval {maxval} (only 255)")
        if width < 1 or height < 1:
            raise ImageFormatError(f"{path}: empty image {width}x{height}")
        n = width * height * 3
        if len(data) - off < n:
            raise ImageFormatError(f"{path}: truncated PPM raster")
        return np.frombuffer(data, dtype=np.uint8, count=n, offset=off).reshape(height, width, 3).copy()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(path)
    raise ImageFormatError(f"{path}: unrecognised image format")


def _decode_png(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "RGB":
                raise ValidationError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
            return np.asarray(img, dtype=np.uint8).copy()
    except ValidationError:
        raise
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise ImageFormatError(f"{path}: cannot decode PNG ({exc})") from exc


def encode_ppm(rgb: np.ndarray, path) -> None:
    """Write a ``uint8`` ``[H, W, 3]`` array as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"expected uint8 [H, W, 3], got {rgb.dtype} {rgb.shape}")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(rgb).tobytes())


def bilinear_resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize ``[H, W, ...]`` with half-pixel-centre bilinear sampling and edge clamping."""
    h, w = img.shape[:2]
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.astype(np.float64)

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    src = img.astype(np.float64)
    extra = (1,) * (img.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# metadata and clips


def load_metadata(root) -> dict[str, str]:
    """Map clip id to label for every labelled clip directory present under ``root``."""
    root = Path(root)
    meta_path = root / "metadata.json"
    if not meta_path.is_file():
        raise DatasetError(f"{root}: missing metadata.json")
    raw = meta_path.read_bytes()
    try:
        text = raw.decode("utf-8")
        meta = json.loads(text)
    except UnicodeDecodeError as exc:
        raise MetadataParseError(f"{meta_path}: not UTF-8", exc.start) from exc
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise MetadataParseError(f"{meta_path}: {exc.msg}", offset) from exc
    if not isinstance(meta, dict):
        raise MetadataParseError(f"{meta_path}: top level must be an object", 0)
    if not meta:
        log.warning("%s: metadata.json lists no clips", root)
    labels = {}
    for clip_id, entry in meta.items():
        label = entry.get("label") if isinstance(entry, dict) else None
        if label not in CLASS_NAMES:
            raise ValidationError(f"clip {clip_id!r}: label must be 'REAL' or 'FAKE', got {label!r}")
        if not (root / clip_id).is_dir():
            log.warning("clip %r is labelled but has no directory; skipped", clip_id)
            continue
        labels[clip_id] = label
    for sub in sorted(p.name for p in root.iterdir() if p.is_dir()):
        if sub not in meta:
            log.warning("directory %r has no label in metadata.json; skipped", sub)
    return labels


def build_clips(root, labels: Mapping[str, str], frames_per_clip: int = 5) -> list[ClipRecord]:
    """Pick the first ``frames_per_clip`` frames of each clip, repeating the last if short."""
    root = Path(root)
    clips = []
    for clip_id in sorted(labels):
        frames = sorted(p for p in (root / clip_id).iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
        if not frames:
            raise ValidationError(f"clip {clip_id!r}: no frame images found")
        frames = frames[:frames_per_clip]
        frames += [frames[-1]] * (frames_per_clip - len(frames))
        clips.append(ClipRecord(clip_id, tuple(frames), labels[clip_id]))
    return clips


def pad_frame_list(frames: Sequence, frames_per_clip: int = 5) -> list:
    frames = list(frames)[:frames_per_clip]
    return frames + [frames[-1]] * (frames_per_clip - len(frames))


def _allocate(total: int, counts: list[int]) -> list[int]:
    """Split ``total`` across groups proportionally (floor, then largest remainder)."""
    n = sum(counts)
    exact = [total * c / n for c in counts]
    alloc = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(counts)), key=lambda k: (-(exact[k] - alloc[k]), k))
    for k in order[: total - sum(alloc)]:
        alloc[k] += 1
    return alloc


def split_dataset(labels: Mapping[str, str], seed: int, test_ratio: float = 0.2,
                  val_ratio: float = 0.2) -> SplitPlan:
    """Stratified train / validation / test split.

    The test set takes ``floor(test_ratio * N)`` clips, then validation takes
    ``floor(val_ratio * remaining)``; each is at least one clip.
    """
    n = len(labels)
    if n < 3:
        raise DatasetError(f"need at least 3 clips to form train/validation/test, got {n}")
    rng = seeded_rng(seed)
    by_class = {}
    for name in sorted(set(labels.values())):
        ids = sorted(cid for cid, lab in labels.items() if lab == name)
        by_class[name] = [ids[k] for k in rng.permutation(len(ids))]
    classes = list(by_class)

    def carve(pools: dict, ratio: float):
        total = sum(len(v) for v in pools.values())
        take = max(1, int(np.floor(ratio * total)))
        alloc = _allocate(take, [len(pools[c]) for c in classes])
        carved = {c: pools[c][:a] for c, a in zip(classes, alloc)}
        rest = {c: pools[c][a:] for c, a in zip(classes, alloc)}
        return carved, rest

    test, pool = carve(by_class, test_ratio)
    val, train = carve(pool, val_ratio)
    flat = lambda d: sorted(cid for ids in d.values() for cid in ids)  # noqa: E731
    return SplitPlan(flat(train), flat(val), flat(test), seed, test_ratio, val_ratio)


# ---------------------------------------------------------------------------
# tensors and batches


def load_clip(clip: ClipRecord, target: tuple = TARGET_SHAPE) -> np.ndarray:
    """Decode, resize and rescale one clip to ``float32 [T, H, W, 3]`` in [0, 1]."""
    t, h, w, c = target
    if len(clip.frame_paths) != t:
        raise ValidationError(f"clip {clip.clip_id!r}: {len(clip.frame_paths)} frames, expected {t}")
    out = np.empty(target, dtype=np.float32)
    for k, path in enumerate(clip.frame_paths):
        img = decode_image(path)
        if img.ndim != 3 or img.shape[2] != c:
            raise ValidationError(f"{path}: expected {c} colour channels")
        if img.shape[:2] != (h, w):
            out[k] = bilinear_resize(img, (h, w)) / 255.0
        else:
            out[k] = img.astype(np.float32) / 255.0
    return out


class ClipSet:
    """Anything that can hand out labelled clip tensors by index."""

    def __len__(self) -> int:
        raise NotImplementedError

    def labels(self) -> np.ndarray:
        raise NotImplementedError

    def ids(self) -> list[str]:
        raise NotImplementedError

    def load(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def batches(self, batch_size: int = 4, shuffle_seed: int | None = None,
                workers: int = 1) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
        """Yield ``(x, onehot, clip_ids)``; the last batch may be short.

        Order depends only on ``shuffle_seed``, never on ``workers``.
        """
        if batch_size < 1:
            raise ValidationError(f"batch size must be positive, got {batch_size}")
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = seeded_rng(shuffle_seed).permutation(len(self))
        labels, ids = self.labels(), self.ids()
        chunks = [order[k:k + batch_size] for k in range(0, len(order), batch_size)]
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                for chunk in chunks:
                    xs = list(pool.map(self.load, chunk))
                    yield np.stack(xs), one_hot(labels[chunk]), [ids[i] for i in chunk]
        else:
            for chunk in chunks:
                xs = [self.load(i) for i in chunk]
                yield np.stack(xs), one_hot(labels[chunk]), [ids[i] for i in chunk]


@dataclass
class FileClips(ClipSet):
    clips: list
    target: tuple = TARGET_SHAPE

    def __len__(self):
        return len(self.clips)

    def labels(self):
        return np.array([c.label_index for c in self.clips], dtype=np.int64)

    def ids(self):
        return [c.clip_id for c in self.clips]

    def load(self, index):
        return load_clip(self.clips[index], self.target)


@dataclass
class ArrayClips(ClipSet):
    """In-memory clips ``x[N, T, H, W, 3]`` with integer labels (1 = FAKE)."""

    x: np.ndarray
    y: np.ndarray
    clip_ids: list = field(default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.clip_ids is None:
            self.clip_ids = [f"clip{k:05d}" for k in range(len(self.y))]

    def __len__(self):
        return len(self.y)

    def labels(self):
        return self.y

    def ids(self):
        return list(self.clip_ids)

    def load(self, index):
        return self.x[index]


def batch_iterator(clips: Sequence[ClipRecord], batch_size: int = 4, target: tuple = TARGET_SHAPE,
                   shuffle_seed: int | None = None, workers: int = 1):
    yield from FileClips(list(clips), target).batches(batch_size, shuffle_seed, workers)


# ---------------------------------------------------------------------------
# synthetic planted-pattern data


def planted_clips(n: int, size: int = 32, frames: int = 5, patch: int = 8, seed: int = 0,
                  noise: float = 0.3):
    """Noise clips where every FAKE clip carries a bright square patch.

    Returns ``(x uint8 [n, frames, size, size, 3], labels int [n], corners [n, 2])``;
    labels alternate REAL/FAKE, corners are ``(-1, -1)`` for REAL clips.
    """
    rng = seeded_rng(seed)
    x = (rng.uniform(0, noise, size=(n, frames, size, size, 3)) * 255).astype(np.uint8)
    labels = np.arange(n) % 2
    corners = np.full((n, 2), -1, dtype=np.int64)
    for k in range(n):
        if labels[k] == 1:
            r, c = rng.integers(0, size - patch + 1, size=2)
            x[k, :, r:r + patch, c:c + patch, :] = 255
            corners[k] = (r, c)
    return x, labels, corners


def write_planted_dataset(root, n: int, size: int = 32, frames: int = 5, seed: int = 0) -> Path:
    """Materialise :func:`planted_clips` as a dataset directory of PPM frames."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    x, labels, _ = planted_clips(n, size, frames, seed=seed)
    meta = {}
    for k in range(n):
        cid = f"clip{k:05d}"
        (root / cid).mkdir(exist_ok=True)
        for t in range(frames):
            encode_ppm(x[k, t], root / cid / f"frame{t:03d}.ppm")
        meta[cid] = {"label": CLASS_NAMES[labels[k]]}
    (root / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
    return root
