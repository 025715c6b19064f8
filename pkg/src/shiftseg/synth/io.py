"""On-disk dataset format.

Directory layout::

    manifest.txt
    scene_<index:05d>.pgm    binary PGM (P5), 8-bit grey
    scene_<index:05d>.ann    plain-text annotations

``manifest.txt`` grammar (one record per line, space separated)::

    shiftseg-dataset <version>
    scenes <count>
    spec <key> <value>            one line per SceneSpec field
    file <name> <sha256-hex>      one line per data file

``.ann`` grammar::

    shiftseg-ann <version>
    size <height> <width>
    instances <count>
    instance <id>                 repeated <count> times, each followed by
    box <x0> <y0> <x1> <y1>         pixel bounds, x1/y1 exclusive
    empty <0|1>
    polygon <K> <x> <y> ...         K vertex pairs, shortest round-trip float repr
    rle <R> <r1> ... <rR>           row-major runs alternating 0/1, first run is 0s
    end

PGM headers are ``P5\\n<width> <height>\\n255\\n`` followed by raw bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

import numpy as np

from .scene import InstanceAnnotation, Scene, SceneSpec

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"


class DatasetCorruptionError(IOError):
    def __init__(self, name: str, reason: str = "checksum mismatch"):
        super().__init__(f"{name}: {reason}")
        self.name = name


def scene_stem(index: int) -> str:
    return f"scene_{index:05d}"


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def encode_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1  # single whitespace before the raster
    if tokens[0] != "P5" or tokens[3] != "255":
        raise ValueError("only 8-bit binary PGM (P5, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise ValueError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Run-length masks and annotations
# ---------------------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list:
    flat = mask.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def rle_decode(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, value = 0, False
    for r in runs:
        if value:
            flat[pos:pos + r] = True
        pos += r
        value = not value
    if pos != flat.size:
        raise ValueError(f"run lengths sum to {pos}, expected {flat.size}")
    return flat.reshape(shape)


def encode_annotations(scene: Scene) -> str:
    h, w = scene.image.shape
    lines = [f"shiftseg-ann {FORMAT_VERSION}", f"size {h} {w}", f"instances {len(scene.instances)}"]
    for ann in scene.instances:
        coords = " ".join(repr(float(v)) for v in ann.polygon.reshape(-1))
        runs = rle_encode(ann.mask)
        lines += [
            f"instance {ann.id}",
            "box " + " ".join(str(int(v)) for v in ann.box),
            f"empty {int(ann.empty)}",
            f"polygon {len(ann.polygon)} {coords}",
            f"rle {len(runs)} " + " ".join(map(str, runs)),
            "end",
        ]
    return "\n".join(lines) + "\n"


def decode_annotations(text: str) -> list:
    lines = iter(text.splitlines())

    def record(tag):
        parts = next(lines).split()
        if not parts or parts[0] != tag:
            raise ValueError(f"expected '{tag}' record, got {parts[:1]}")
        return parts[1:]

    if int(record("shiftseg-ann")[0]) != FORMAT_VERSION:
        raise ValueError("unsupported annotation version")
    h, w = map(int, record("size"))
    out = []
    for _ in range(int(record("instances")[0])):
        inst_id = int(record("instance")[0])
        box = tuple(int(v) for v in record("box"))
        empty = bool(int(record("empty")[0]))
        poly = record("polygon")
        polygon = np.array([float(v) for v in poly[1:]], dtype=np.float64).reshape(int(poly[0]), 2)
        rle = record("rle")
        mask = rle_decode([int(v) for v in rle[1:1 + int(rle[0])]], (h, w))
        record("end")
        out.append(InstanceAnnotation(inst_id, mask, polygon, box, empty))
    return out


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(scenes, directory, spec: SceneSpec | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = spec or SceneSpec()
    lines = [f"shiftseg-dataset {FORMAT_VERSION}", f"scenes {len(scenes)}"]
    lines += [f"spec {f.name} {getattr(spec, f.name)!r}" for f in dataclasses.fields(spec)]
    for scene in scenes:
        stem = scene_stem(scene.index)
        for name, data in ((stem + ".pgm", encode_pgm(scene.image)),
                           (stem + ".ann", encode_annotations(scene).encode("ascii"))):
            (directory / name).write_bytes(data)
            lines.append(f"file {name} {_sha256(data)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")
    return directory


def read_manifest(directory):
    directory = Path(directory)
    try:
        text = (directory / MANIFEST).read_text(encoding="ascii")
    except FileNotFoundError:
        raise DatasetCorruptionError(MANIFEST, "missing manifest") from None
    count, spec_kv, files = None, {}, {}
    for i, line in enumerate(text.splitlines()):
        parts = line.split()
        if i == 0:
            if parts[:1] != ["shiftseg-dataset"] or int(parts[1]) != FORMAT_VERSION:
                raise DatasetCorruptionError(MANIFEST, "bad header")
        elif parts[0] == "scenes":
            count = int(parts[1])
        elif parts[0] == "spec":
            spec_kv[parts[1]] = parts[2]
        elif parts[0] == "file":
            files[parts[1]] = parts[2]
    types = {f.name: type(f.default) for f in dataclasses.fields(SceneSpec)}
    spec = SceneSpec(**{k: types[k](v) for k, v in spec_kv.items() if k in types})
    return count, spec, files


def read_dataset(directory) -> list:
    directory = Path(directory)
    count, _, files = read_manifest(directory)
    blobs = {}
    for name, digest in files.items():
        path = directory / name
        if not path.exists():
            raise DatasetCorruptionError(name, "listed file is missing")
        data = path.read_bytes()
        if _sha256(data) != digest:
            raise DatasetCorruptionError(name)
        blobs[name] = data
    stems = sorted({name.rsplit(".", 1)[0] for name in files})
    if len(stems) != count:
        raise DatasetCorruptionError(MANIFEST, f"lists {len(stems)} scenes, header says {count}")
    scenes = []
    for stem in stems:
        image = decode_pgm(blobs[stem + ".pgm"])
        instances = decode_annotations(blobs[stem + ".ann"].decode("ascii"))
        scenes.append(Scene(int(stem.split("_")[1]), image, instances))
    return scenes
