"""Seeded synthetic traffic-like videos with ground truth.

Textured rectangles of two classes drift across a smooth static background.
Transient bars occlude them for a few frames; optional horizontal motion blur
and Gaussian noise degrade individual frames.  Everything is a pure function
of the :class:`SceneSpec`.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .tensor_core import fftn

MAX_STEP = 2.5  # continuous px per frame; rendered boxes then move <= 3 px per axis
PROFILES = ("easy", "occlusion_heavy", "small_objects")
GT_COLUMNS = ("sequence_id", "frame_id", "class", "x_min", "y_min", "x_max", "y_max", "occluded_fraction")


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed within the retry budget."""


@dataclass(frozen=True)
class ObjectTrack:
    cls: int
    cx: float
    cy: float
    w: int
    h: int
    vx: float = 0.0
    vy: float = 0.0
    jitter: float = 0.0
    texture_seed: int = 0


@dataclass(frozen=True)
class Occluder:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    start: int
    end: int  # inclusive
    opacity: float = 1.0
    shade: float = 0.5

    def active(self, t: int) -> bool:
        return self.start <= t <= self.end


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    length: int = 40
    num_objects: tuple[int, int] = (2, 4)
    size_range: tuple[int, int] = (10, 18)
    max_speed: float = 2.0
    jitter: float = 0.5
    num_occluders: tuple[int, int] = (0, 0)
    occluder_opacity: tuple[float, float] = (0.85, 1.0)
    occluder_width: tuple[int, int] = (10, 16)
    dwell: tuple[int, int] = (3, 5)
    blur_prob: float = 0.0
    blur_width: int = 3
    noise_sigma: float = 0.0
    objects: Optional[tuple[ObjectTrack, ...]] = None
    occluders: Optional[tuple[Occluder, ...]] = None


@dataclass(frozen=True)
class GTBox:
    cls: int
    box: tuple[int, int, int, int]
    occluded: float
    track: int = -1


@dataclass
class Sequence:
    sequence_id: str
    frames: np.ndarray  # T x 3 x H x W, float32 in [0, 1]
    gt: list[list[GTBox]]

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class Dataset:
    profile: str
    seed: int
    splits: dict[str, list[Sequence]] = field(default_factory=dict)

    def sequences(self, split: Optional[str] = None) -> list[Sequence]:
        if split is not None:
            return self.splits.get(split, [])
        return [s for name in ("train", "val", "test") for s in self.splits.get(name, [])]

    def content_hash(self) -> str:
        return dataset_hash(self)


# ----------------------------------------------------------------------------
# generation

def _sample_objects(spec: SceneSpec, rng: np.random.Generator) -> tuple[ObjectTrack, ...]:
    lo, hi = spec.num_objects
    count = int(rng.integers(lo, hi + 1))
    tracks: list[ObjectTrack] = []
    for _ in range(count):
        for _attempt in range(100):
            w = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            h = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            cx = float(rng.uniform(w / 2 + 1, spec.width - w / 2 - 1))
            cy = float(rng.uniform(h / 2 + 1, spec.height - h / 2 - 1))
            if all(abs(cx - t.cx) > (w + t.w) / 2 or abs(cy - t.cy) > (h + t.h) / 2 for t in tracks):
                break
        else:
            raise PlacementError(f"could not place {count} non-overlapping objects in {spec.width}x{spec.height}")
        speed = float(rng.uniform(0.3, spec.max_speed))
        angle = float(rng.uniform(0, 2 * np.pi))
        tracks.append(ObjectTrack(
            cls=int(rng.integers(0, 2)), cx=cx, cy=cy, w=w, h=h,
            vx=speed * np.cos(angle), vy=speed * np.sin(angle),
            jitter=spec.jitter, texture_seed=int(rng.integers(0, 2**31)),
        ))
    return tuple(tracks)


def _trajectory(track: ObjectTrack, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Centre positions (T x 2), bouncing off the borders, steps capped at MAX_STEP."""
    pos = np.empty((spec.length, 2))
    x, y, vx, vy = track.cx, track.cy, track.vx, track.vy
    half_w, half_h = track.w / 2, track.h / 2
    for t in range(spec.length):
        pos[t] = x, y
        step = np.array([vx, vy]) + rng.uniform(-track.jitter, track.jitter, 2) * (track.jitter > 0)
        norm = float(np.hypot(*step))
        if norm > MAX_STEP:
            step *= MAX_STEP / norm
        nx, ny = x + step[0], y + step[1]
        if not half_w <= nx <= spec.width - half_w:
            vx, nx = -vx, x - step[0]
        if not half_h <= ny <= spec.height - half_h:
            vy, ny = -vy, y - step[1]
        x = min(max(nx, half_w), spec.width - half_w)
        y = min(max(ny, half_h), spec.height - half_h)
    return pos


def _box_at(track: ObjectTrack, centre: np.ndarray, spec: SceneSpec) -> tuple[int, int, int, int]:
    x0 = int(np.floor(centre[0] - track.w / 2 + 0.5))
    y0 = int(np.floor(centre[1] - track.h / 2 + 0.5))
    x0 = min(max(x0, 0), spec.width - track.w)
    y0 = min(max(y0, 0), spec.height - track.h)
    return x0, y0, x0 + track.w, y0 + track.h


def _sample_occluders(spec: SceneSpec, tracks, boxes, rng: np.random.Generator) -> tuple[Occluder, ...]:
    lo, hi = spec.num_occluders
    count = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    if count == 0 or not tracks:
        return ()
    out = []
    for _ in range(count):
        dwell = int(rng.integers(spec.dwell[0], spec.dwell[1] + 1))
        start = int(rng.integers(0, max(1, spec.length - dwell + 1)))
        end = min(start + dwell - 1, spec.length - 1)
        target = int(rng.integers(0, len(tracks)))
        x0, y0, x1, y1 = boxes[target][(start + end) // 2]
        width = int(rng.integers(spec.occluder_width[0], spec.occluder_width[1] + 1))
        if rng.uniform() < 0.5:
            cx = (x0 + x1) // 2
            ox0 = min(max(cx - width // 2, 0), spec.width - width)
            occ = (ox0, 0, ox0 + width, spec.height)
        else:
            cy = (y0 + y1) // 2
            oy0 = min(max(cy - width // 2, 0), spec.height - width)
            occ = (0, oy0, spec.width, oy0 + width)
        out.append(Occluder(*occ, start=start, end=end,
                            opacity=float(rng.uniform(*spec.occluder_opacity)),
                            shade=float(rng.uniform(0.35, 0.65))))
    return tuple(out)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.6, (3, 8, 8))
    zoom = (1, spec.height / 8, spec.width / 8)
    return np.clip(ndimage.zoom(coarse, zoom, order=1, mode="nearest"), 0, 1)


def _texture(track: ObjectTrack) -> np.ndarray:
    rng = np.random.default_rng(track.texture_seed)
    yy, xx = np.mgrid[0:track.h, 0:track.w]
    tint = rng.uniform(-0.08, 0.08, 3)
    if track.cls == 0:
        # warm horizontal stripes
        a, b = np.array([0.92, 0.35, 0.2]), np.array([0.55, 0.12, 0.1])
        pattern = (yy // 2) % 2
    else:
        # cool checkerboard
        a, b = np.array([0.2, 0.45, 0.95]), np.array([0.9, 0.9, 0.35])
        pattern = ((yy // 3) + (xx // 3)) % 2
    tex = np.where(pattern[None] == 0, (a + tint)[:, None, None], (b + tint)[:, None, None])
    return np.clip(tex, 0, 1)


def generate(spec: SceneSpec) -> tuple[np.ndarray, list[list[GTBox]]]:
    """Render ``spec`` into (frames T x 3 x H x W float32, per-frame ground truth)."""
    if spec.length < 1 or spec.height < 1 or spec.width < 1:
        raise ValueError("scene extents and length must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    tracks = spec.objects if spec.objects is not None else _sample_objects(spec, rng)
    for tr in tracks:
        if tr.w < 1 or tr.h < 1 or tr.w > spec.width or tr.h > spec.height:
            raise PlacementError(f"object of size {tr.w}x{tr.h} does not fit the frame")
    boxes = [[_box_at(tr, c, spec) for c in _trajectory(tr, spec, rng)] for tr in tracks]
    occluders = spec.occluders if spec.occluders is not None else _sample_occluders(spec, tracks, boxes, rng)
    background = _background(spec, rng)
    textures = [_texture(tr) for tr in tracks]

    frames = np.empty((spec.length, 3, spec.height, spec.width), dtype=np.float32)
    gt: list[list[GTBox]] = []
    for t in range(spec.length):
        img = background.copy()
        for tex, bx in zip(textures, boxes):
            x0, y0, x1, y1 = bx[t]
            img[:, y0:y1, x0:x1] = tex
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        for occ in occluders:
            if occ.active(t):
                region = img[:, occ.y_min:occ.y_max, occ.x_min:occ.x_max]
                region *= 1 - occ.opacity
                region += occ.opacity * occ.shade
                mask[occ.y_min:occ.y_max, occ.x_min:occ.x_max] = True
        if spec.blur_prob > 0 and rng.uniform() < spec.blur_prob:
            img = ndimage.uniform_filter1d(img, size=spec.blur_width, axis=2, mode="nearest")
        if spec.noise_sigma > 0:
            img = img + rng.normal(0, spec.noise_sigma, img.shape)
        frames[t] = np.clip(img, 0, 1)
        gt.append([GTBox(tr.cls, bx[t], float(mask[bx[t][1]:bx[t][3], bx[t][0]:bx[t][2]].mean()), i)
                   for i, (tr, bx) in enumerate(zip(tracks, boxes))])
    return frames, gt


# ----------------------------------------------------------------------------
# benchmark profiles

def profile_spec(profile: str, seed: int, length: int = 40, size: int = 64) -> SceneSpec:
    base = SceneSpec(seed=seed, height=size, width=size, length=length)
    if profile == "easy":
        return replace(base, num_objects=(2, 3), size_range=(12, 18), noise_sigma=0.02)
    if profile == "occlusion_heavy":
        return replace(base, num_objects=(2, 4), size_range=(10, 18), num_occluders=(3, 5),
                       dwell=(3, 6), occluder_opacity=(0.8, 0.95), blur_prob=0.2, noise_sigma=0.03)
    if profile == "small_objects":
        return replace(base, num_objects=(3, 6), size_range=(6, 10), num_occluders=(0, 1), noise_sigma=0.03)
    raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def benchmark_suite(profile: str, seed: int, n_train: int = 20, n_val: int = 4, n_test: int = 6,
                    length: int = 40, size: int = 64) -> Dataset:
    """Fixed train/val/test split by sequence for one difficulty profile."""
    ds = Dataset(profile, seed)
    counts = (("train", n_train), ("val", n_val), ("test", n_test))
    seeds = np.random.SeedSequence([seed, PROFILES.index(profile) if profile in PROFILES else 99])
    children = seeds.spawn(n_train + n_val + n_test)
    i = 0
    for split, count in counts:
        seqs = []
        for j in range(count):
            child_seed = int(children[i].generate_state(1, dtype=np.uint64)[0])
            frames, gt = generate(profile_spec(profile, child_seed, length, size))
            seqs.append(Sequence(f"{split}_{j:03d}", frames, gt))
            i += 1
        ds.splits[split] = seqs
    return ds


def occlusion_events(seq: Sequence) -> int:
    """Number of maximal runs of occluded frames, summed over object tracks."""
    runs = 0
    tracks = {b.track for frame in seq.gt for b in frame}
    for tr in tracks:
        prev = False
        for frame in seq.gt:
            occ = any(b.track == tr and b.occluded > 0 for b in frame)
            runs += occ and not prev
            prev = occ
    return runs


# ----------------------------------------------------------------------------
# serialization

def gt_rows(seq: Sequence) -> list[dict]:
    return [
        {"sequence_id": seq.sequence_id, "frame_id": t, "class": b.cls,
         "x_min": b.box[0], "y_min": b.box[1], "x_max": b.box[2], "y_max": b.box[3],
         "occluded_fraction": repr(round(b.occluded, 6))}
        for t, frame in enumerate(seq.gt) for b in frame
    ]


def gt_csv(seqs: list[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(GT_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for seq in seqs:
        writer.writerows(gt_rows(seq))
    return buf.getvalue()


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    for split in ("train", "val", "test"):
        for seq in ds.splits.get(split, []):
            h.update(f"{split}/{seq.sequence_id}/{seq.frames.shape}".encode())
            h.update(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())
            h.update(gt_csv([seq]).encode())
    return h.hexdigest()


def write_ppm(path: Path, frame: np.ndarray) -> None:
    rgb = np.clip(np.rint(frame.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    rgb = np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return (rgb.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def save_dataset(ds: Dataset, out: Union[str, Path], frame_format: str = "fftn") -> str:
    """Write frames, ``gt.csv`` and ``splits.csv``; returns the content hash."""
    if frame_format not in ("fftn", "ppm"):
        raise ValueError(f"unknown frame format {frame_format!r}")
    root = Path(out)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    split_rows = []
    for seq in ds.sequences():
        split = seq.sequence_id.rsplit("_", 1)[0]
        split_rows.append(f"{seq.sequence_id},{split}")
        if frame_format == "fftn":
            fftn.save(root / "frames" / f"{seq.sequence_id}.fftn", seq.frames)
        else:
            d = root / "frames" / seq.sequence_id
            d.mkdir(exist_ok=True)
            for t, frame in enumerate(seq.frames):
                write_ppm(d / f"{t:04d}.ppm", frame)
    (root / "splits.csv").write_text("sequence_id,split\n" + "".join(r + "\n" for r in split_rows))
    (root / "gt.csv").write_text(gt_csv(ds.sequences()))
    digest = dataset_hash(ds)
    (root / "dataset.txt").write_text(f"profile={ds.profile} seed={ds.seed} hash={digest} frames={frame_format}\n")
    return digest


def read_gt_csv(path: Union[str, Path]) -> dict[str, dict[int, list[GTBox]]]:
    out: dict[str, dict[int, list[GTBox]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = tuple(int(float(row[k])) for k in ("x_min", "y_min", "x_max", "y_max"))
            gt = GTBox(int(row["class"]), box, float(row.get("occluded_fraction") or 0.0))
            out.setdefault(row.get("sequence_id", "0"), {}).setdefault(int(row["frame_id"]), []).append(gt)
    return out


def load_dataset(root: Union[str, Path]) -> Dataset:
    root = Path(root)
    meta = dict(item.split("=", 1) for item in (root / "dataset.txt").read_text().split())
    ds = Dataset(meta.get("profile", "unknown"), int(meta.get("seed", 0)))
    gt = read_gt_csv(root / "gt.csv")
    with open(root / "splits.csv", newline="") as fh:
        split_of = [(r["sequence_id"], r["split"]) for r in csv.DictReader(fh)]
    for seq_id, split in split_of:
        path = root / "frames" / f"{seq_id}.fftn"
        if path.exists():
            frames = fftn.load(path)
        else:
            ppms = sorted((root / "frames" / seq_id).glob("*.ppm"))
            frames = np.stack([read_ppm(p) for p in ppms]) if ppms else np.zeros((0, 3, 1, 1), np.float32)
        per_frame = gt.get(seq_id, {})
        boxes = [per_frame.get(t, []) for t in range(frames.shape[0])]
        ds.splits.setdefault(split, []).append(Sequence(seq_id, frames, boxes))
    return ds
