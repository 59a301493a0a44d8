"""Raster I/O, dataset manifests, the synthetic corpus and class histograms.

Images are binary RGB pixmaps (P6) and labels binary graymaps (P5) whose
byte values are class ids, both with maxval 255.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .classes import ClassTable
from .errors import ConfigError, FormatError

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)

_WS = b" \t\n\r\v\f"


def _parse_header(buf: bytes, path) -> Tuple[bytes, int, int, int, int]:
    """Return ``(magic, width, height, maxval, payload_offset)``."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: offset 0: not a binary PGM/PPM file")
    fields, pos = [], 2
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError(f"{path}: offset {pos}: truncated header")
        ch = buf[pos:pos + 1]
        if ch in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"{path}: offset {pos}: unterminated header comment")
            pos = end + 1
        else:
            m = re.compile(rb"\d+").match(buf, pos)
            if not m:
                raise FormatError(f"{path}: offset {pos}: expected a decimal header field")
            fields.append(int(m.group()))
            pos = m.end()
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError(f"{path}: offset {pos}: missing whitespace after header")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: offset {pos}: empty raster {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: offset {pos}: maxval {maxval} unsupported (need 255)")
    return buf[:2], width, height, maxval, pos + 1


def read_pnm(path) -> np.ndarray:
    """Decode a P5 (``h x w``) or P6 (``h x w x 3``) file into ``uint8``."""
    buf = Path(path).read_bytes()
    magic, width, height, _, off = _parse_header(buf, path)
    depth = 3 if magic == b"P6" else 1
    need = width * height * depth
    if len(buf) - off < need:
        raise FormatError(f"{path}: offset {len(buf)}: truncated payload, {need} bytes expected from offset {off}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return data.reshape(height, width, 3) if depth == 3 else data.reshape(height, width)


def _encode(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def write_ppm(path, rgb: np.ndarray):
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM needs an h x w x 3 array, got {rgb.shape}")
    Path(path).write_bytes(_encode(b"P6", rgb))


def write_pgm(path, gray: np.ndarray):
    if gray.ndim != 2:
        raise FormatError(f"PGM needs an h x w array, got {gray.shape}")
    Path(path).write_bytes(_encode(b"P5", gray))


def normalize(rgb: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    """``h x w x 3`` bytes to a ``(1, 3, h, w)`` float32 tensor."""
    x = rgb.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
    m = np.asarray(mean, np.float32)[None, :, None, None]
    s = np.asarray(std, np.float32)[None, :, None, None]
    return (x - m) / s


def denormalize(x: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    m = np.asarray(mean, np.float32)[None, :, None, None]
    s = np.asarray(std, np.float32)[None, :, None, None]
    rgb = np.clip(np.rint((x * s + m) * 255.0), 0, 255).astype(np.uint8)
    return rgb[0].transpose(1, 2, 0)


def load_image(path, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    rgb = read_pnm(path)
    if rgb.ndim != 3:
        raise FormatError(f"{path}: offset 0: expected an RGB pixmap (P6)")
    return normalize(rgb, mean, std)


def load_label(path, n_classes: int) -> np.ndarray:
    """Decode a P5 label map into a ``(1, 1, h, w)`` int64 array of class ids."""
    gray = read_pnm(path)
    if gray.ndim != 2:
        raise FormatError(f"{path}: offset 0: expected a graymap (P5) label file")
    bad = np.flatnonzero(gray >= n_classes)
    if bad.size:
        header = Path(path).read_bytes()
        off = _parse_header(header, path)[4] + int(bad[0])
        raise FormatError(f"{path}: offset {off}: label value {int(gray.flat[bad[0]])} >= {n_classes} classes")
    return gray.astype(np.int64)[None, None]


def save_color_map(pred: np.ndarray, palette: Sequence[Tuple[int, int, int]], path):
    labels = np.asarray(pred).reshape(np.asarray(pred).shape[-2:])
    lut = np.asarray(palette, dtype=np.uint8)
    if labels.max(initial=0) >= len(lut) or labels.min(initial=0) < 0:
        raise FormatError(f"label ids exceed the {len(lut)}-entry palette")
    write_ppm(path, lut[labels])


def labels_from_color(rgb: np.ndarray, palette: Sequence[Tuple[int, int, int]]) -> np.ndarray:
    """Inverse of :func:`save_color_map`; only defined for injective palettes."""
    keys = [tuple(int(v) for v in c) for c in palette]
    if len(set(keys)) != len(keys):
        raise FormatError("palette is not injective; colour-to-label lookup is unsupported")
    code = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    table = {(r << 16) | (g << 8) | b: i for i, (r, g, b) in enumerate(keys)}
    out = np.full(code.shape, -1, dtype=np.int64)
    for k, i in table.items():
        out[code == k] = i
    if np.any(out < 0):
        raise FormatError("image contains colours outside the palette")
    return out


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    root: Path
    pairs: List[Tuple[Path, Path]]
    split: str = "train"
    class_table: Optional[Path] = None
    path: Optional[Path] = None

    def __len__(self):
        return len(self.pairs)


def write_manifest(path, pairs: Sequence[Tuple[str, str]]):
    Path(path).write_text("".join(f"{img}\t{lab}\n" for img, lab in pairs))


def load_manifest(path, split: str = "train", class_table=None, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}: line {lineno}: expected 'image<TAB>label'")
        img, lab = (root / p.strip() for p in parts)
        if check_files:
            for f in (img, lab):
                if not f.is_file():
                    raise FormatError(f"{path}: line {lineno}: missing file {f}")
        pairs.append((img, lab))
    if not pairs:
        raise FormatError(f"{path}: manifest lists no image/label pairs")
    pairs.sort()
    return DatasetManifest(root, pairs, split, Path(class_table) if class_table else None, path)


def load_samples(manifest: DatasetManifest, n_classes: int, mean=DEFAULT_MEAN, std=DEFAULT_STD):
    """Decode every pair; return ``(images (N,3,h,w), labels (N,1,h,w), ids)``."""
    images, labels, ids = [], [], []
    for img, lab in manifest.pairs:
        x = load_image(img, mean, std)
        y = load_label(lab, n_classes)
        if x.shape[2:] != y.shape[2:]:
            raise FormatError(f"{lab}: offset 0: label size {y.shape[2:]} differs from image {x.shape[2:]}")
        images.append(x)
        labels.append(y)
        ids.append(img.stem)
    sizes = {x.shape for x in images}
    if len(sizes) != 1:
        raise FormatError(f"{manifest.path}: images have differing sizes {sorted(sizes)}")
    return np.concatenate(images), np.concatenate(labels), ids


def _manifest_key(manifest: DatasetManifest, n_classes: int, ignore_index) -> str:
    h = hashlib.sha256()
    for img, lab in manifest.pairs:
        h.update(f"{img}\t{lab}\n".encode())
    h.update(f"{n_classes}:{ignore_index}".encode())
    return h.hexdigest()


def class_histogram(manifest: DatasetManifest, n_classes: int, ignore_index: Optional[int] = None,
                    cache: bool = True) -> np.ndarray:
    """Pixel counts per class over all labels, ignore class excluded (count 0).

    Results are cached in a ``<manifest>.hist`` key-value sidecar keyed by a
    hash of the manifest contents.
    """
    if not manifest.pairs:
        raise ConfigError("cannot compute a histogram of an empty manifest")
    key = _manifest_key(manifest, n_classes, ignore_index)
    sidecar = Path(f"{manifest.path}.hist") if (cache and manifest.path) else None
    if sidecar and sidecar.is_file():
        kv = dict(line.split("=", 1) for line in sidecar.read_text().splitlines() if "=" in line)
        if kv.get("manifest_sha256") == key and int(kv.get("n_classes", -1)) == n_classes:
            return np.array([int(kv[f"count.{i}"]) for i in range(n_classes)], dtype=np.int64)
    counts = np.zeros(n_classes, dtype=np.int64)
    for _, lab in manifest.pairs:
        counts += np.bincount(load_label(lab, n_classes).reshape(-1), minlength=n_classes)
    if ignore_index is not None:
        counts[ignore_index] = 0
    if sidecar:
        lines = [f"manifest_sha256={key}", f"n_classes={n_classes}", f"ignore_index={ignore_index}"]
        lines += [f"count.{i}={int(c)}" for i, c in enumerate(counts)]
        sidecar.write_text("\n".join(lines) + "\n")
    return counts


# ---------------------------------------------------------------- synthetic corpus


def class_colours(n_classes: int) -> np.ndarray:
    """Well separated base colours in [0, 1] for the synthetic classes."""
    hues = np.arange(n_classes) / n_classes
    out = np.empty((n_classes, 3))
    for i, hue in enumerate(hues):
        k = (np.array([5.0, 3.0, 1.0]) + hue * 6) % 6
        out[i] = 1 - np.clip(np.minimum(k, 4 - k), 0, 1)
    out[0] = (0.15, 0.15, 0.15)
    return out * 0.8 + 0.1


def synth_image(rng: np.random.Generator, h: int, w: int, classes: Sequence[int], colours: np.ndarray):
    label = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[:h, :w]
    for cls in classes:
        sh = int(rng.integers(max(8, h // 4), max(9, 2 * h // 3) + 1))
        sw = int(rng.integers(max(8, w // 6), max(9, w // 2) + 1))
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        if rng.random() < 0.5:
            mask = (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
        else:
            cy, cx = y0 + (sh - 1) / 2, x0 + (sw - 1) / 2
            mask = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
        label[mask] = cls
    img = colours[label] + rng.normal(0.0, 0.05, size=(h, w, 3))
    rgb = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return rgb, label


def synth_dataset(out_dir, seed: int, count: int, size: Tuple[int, int], n_classes: int,
                  split: str = "train") -> DatasetManifest:
    """Write ``count`` seeded image/label pairs plus ``<split>.txt`` and ``classes.csv``.

    Class 0 is background; every image carries 1-4 rectangles or ellipses
    whose classes cycle through ``1..n_classes-1`` across the corpus.
    """
    h, w = size
    if h < 16 or w < 16:
        raise ConfigError(f"synthetic images need at least 16x16 pixels, got {h}x{w}")
    if n_classes < 2 or n_classes > 256:
        raise ConfigError("synthetic corpus needs 2..256 classes")
    if count < 1:
        raise ConfigError("count must be positive")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    colours = class_colours(n_classes)
    table = ClassTable.generic(n_classes)
    table_path = out / "classes.csv"
    table.save(table_path)
    pairs = []
    cursor = 0
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        k = int(rng.integers(1, 5))
        classes = [1 + (cursor + j) % (n_classes - 1) for j in range(k)]
        cursor += k
        rgb, label = synth_image(rng, h, w, classes, colours)
        img_name, lab_name = f"{split}_{i:05d}.ppm", f"{split}_{i:05d}_label.pgm"
        write_ppm(out / img_name, rgb)
        write_pgm(out / lab_name, label)
        pairs.append((img_name, lab_name))
    manifest_path = out / f"{split}.txt"
    write_manifest(manifest_path, pairs)
    return load_manifest(manifest_path, split, table_path)
