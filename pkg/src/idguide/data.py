"""Synthetic identity + pose clips and their on-disk format.

Each clip shows one colored glyph (the "face") drifting over a smooth,
identity-independent background. The glyph's color and shape are the
identity; its per-frame position is the pose track; the glyph footprint is
the face mask.

Clip file layout (little endian)::

    b"SCLP" | u32 version | u32 frames | u32 height | u32 width | u32 channels
    float32 pixels [frames, height, width, channels]
    mask bits, one frame after another, packed 8 per byte (MSB first)
    u32 n | n bytes of UTF-8 JSON metadata
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedError, UnsupportedVersionError
from .numerics.rng import SeededRng

CLIP_MAGIC = b"SCLP"
CLIP_VERSION = 1
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

SHAPES = ("square", "diamond")
GLYPH_SIZE = 6  # bounding box side in pixels for both shapes
BACKGROUND_GRAY = 0.45


@dataclass
class SyntheticClip:
    frames: np.ndarray  # [F, H, W, 3] in [0, 1]
    identity_id: int
    identity_params: np.ndarray  # (r, g, b, shape_code)
    pose_track: np.ndarray  # [F, 2] glyph center (x, y) in pixels
    face_mask_pixel: np.ndarray  # [F, H, W] bool

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def pose_unit(self) -> np.ndarray:
        """Pose track scaled to unit coordinates."""
        h, w = self.frames.shape[1:3]
        return self.pose_track / np.array([w, h], dtype=np.float64)


@dataclass
class DataConfig:
    height: int = 16
    width: int = 16
    frames: int = 8
    identities: int = 8
    clips_per_identity: int = 8
    heldout_per_identity: int = 3

    def validate(self) -> None:
        if self.identities < 2:
            raise ValueError("need at least 2 identities")
        if self.height < 8 or self.width < 8:
            raise ValueError("frame dims must be at least 8x8")
        if self.frames < 1:
            raise ValueError("clips need at least one frame")
        if self.clips_per_identity < 0 or self.heldout_per_identity < 0:
            raise ValueError("clip counts must be non-negative")


@dataclass
class DatasetManifest:
    clip_count: int
    identity_count: int
    height: int
    width: int
    frames: int
    seed: int
    format_version: int = DATASET_VERSION
    clips: list[dict] = field(default_factory=list)

    def split(self, name: str) -> list[dict]:
        return [c for c in self.clips if c["split"] == name]


# -- rendering --------------------------------------------------------------

def glyph_mask(shape_code: int, cx: int, cy: int, height: int, width: int) -> np.ndarray:
    """Boolean footprint of a glyph whose center pixel is (cx, cy)."""
    ys, xs = np.mgrid[0:height, 0:width]
    dx, dy = xs - cx, ys - cy
    half = GLYPH_SIZE // 2
    if SHAPES[shape_code] == "square":
        return (dx >= -half) & (dx < half) & (dy >= -half) & (dy < half)
    return np.abs(dx) + np.abs(dy) <= half


def _identity_table(count: int, rng: SeededRng) -> np.ndarray:
    """Colors at Chebyshev distance >= 0.3 from each other and from the background."""
    gray = np.full(3, BACKGROUND_GRAY)
    colors: list[np.ndarray] = []
    gen = rng.generator()
    while len(colors) < count:
        c = gen.uniform(0.05, 0.95, 3)
        if np.max(np.abs(c - gray)) < 0.35:
            continue
        if all(np.max(np.abs(c - o)) >= 0.3 for o in colors):
            colors.append(c)
    shapes = np.arange(count) % len(SHAPES)
    return np.column_stack([np.array(colors), shapes]).astype(np.float64)


def _background(rng: SeededRng, height: int, width: int) -> np.ndarray:
    coarse = rng.generator().uniform(-0.1, 0.1, (4, 4, 3))
    # bilinear upsample of a 4x4 grid to the frame size
    yi = np.linspace(0, 3, height)
    xi = np.linspace(0, 3, width)
    y0 = np.minimum(yi.astype(int), 2)
    x0 = np.minimum(xi.astype(int), 2)
    fy = (yi - y0)[:, None, None]
    fx = (xi - x0)[None, :, None]
    g = coarse
    top = g[y0][:, x0] * (1 - fx) + g[y0][:, x0 + 1] * fx
    bot = g[y0 + 1][:, x0] * (1 - fx) + g[y0 + 1][:, x0 + 1] * fx
    return BACKGROUND_GRAY + top * (1 - fy) + bot * fy


def _pose_track(rng: SeededRng, frames: int, height: int, width: int) -> np.ndarray:
    half = GLYPH_SIZE // 2
    gen = rng.generator()
    # centers keep the whole glyph (up to +half pixels) inside the frame
    lo_x, hi_x = half, width - half - 1
    lo_y, hi_y = half, height - half - 1
    pos = np.array([gen.integers(lo_x, hi_x + 1), gen.integers(lo_y, hi_y + 1)])
    vel = gen.integers(-1, 2, 2)
    track = [pos.copy()]
    for _ in range(frames - 1):
        if gen.uniform() < 0.3:
            vel = gen.integers(-1, 2, 2)
        nxt = pos + vel
        for axis, (lo, hi) in enumerate(((lo_x, hi_x), (lo_y, hi_y))):
            if not lo <= nxt[axis] <= hi:
                vel[axis] = -vel[axis]
                nxt[axis] = pos[axis] + vel[axis]
        pos = nxt
        track.append(pos.copy())
    return np.array(track, dtype=np.float64)


def render_clip(identity_id: int, params: np.ndarray, cfg: DataConfig, rng: SeededRng) -> SyntheticClip:
    H, W = cfg.height, cfg.width
    bg = _background(rng, H, W)
    track = _pose_track(rng, cfg.frames, H, W)
    shape_code = int(params[3])
    frames = np.empty((cfg.frames, H, W, 3))
    masks = np.empty((cfg.frames, H, W), dtype=bool)
    for f, (cx, cy) in enumerate(track.astype(int)):
        m = glyph_mask(shape_code, cx, cy, H, W)
        frames[f] = np.where(m[..., None], params[:3], bg)
        masks[f] = m
    # stored as float32 on disk; keep in-memory values identical to the file
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return SyntheticClip(frames, identity_id, params.copy(), track, masks)


def generate_clips(cfg: DataConfig, seed: int) -> tuple[list[SyntheticClip], list[str]]:
    cfg.validate()
    root = SeededRng(seed)
    table = _identity_table(cfg.identities, root.fork(0))
    per_id = cfg.clips_per_identity + cfg.heldout_per_identity
    clips, splits = [], []
    for ident in range(cfg.identities):
        for j in range(per_id):
            index = ident * per_id + j
            clips.append(render_clip(ident, table[ident], cfg, root.fork(1 + index)))
            splits.append("train" if j < cfg.clips_per_identity else "heldout")
    return clips, splits


def generate_dataset(cfg: DataConfig, seed: int, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    clips, splits = generate_clips(cfg, seed)
    manifest = DatasetManifest(len(clips), cfg.identities, cfg.height, cfg.width, cfg.frames, seed)
    for i, (clip, split) in enumerate(zip(clips, splits)):
        name = f"clips/clip_{i:04d}.sclp"
        save_clip(out / name, clip)
        manifest.clips.append({"file": name, "identity": clip.identity_id, "split": split})
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir) -> DatasetManifest:
    raw = json.loads((Path(data_dir) / "manifest.json").read_text())
    if raw.get("format_version") != DATASET_VERSION:
        raise UnsupportedVersionError(f"dataset format {raw.get('format_version')}")
    return DatasetManifest(**raw)


def load_dataset(data_dir, split: str | None = None) -> list[SyntheticClip]:
    manifest = load_manifest(data_dir)
    entries = manifest.clips if split is None else manifest.split(split)
    return [load_clip(Path(data_dir) / e["file"]) for e in entries]


def reference_frame(clip: SyntheticClip) -> np.ndarray:
    if clip.frame_count == 0:
        raise ValueError("clip has no frames")
    return clip.frames[0]


# -- clip files -------------------------------------------------------------

def clip_to_bytes(clip: SyntheticClip) -> bytes:
    F, H, W, C = clip.frames.shape
    meta = json.dumps({
        "identity_id": int(clip.identity_id),
        "identity_params": [float(v) for v in clip.identity_params],
        "pose_track": [[float(v) for v in row] for row in clip.pose_track],
    }, sort_keys=True).encode("utf-8")
    bits = np.packbits(clip.face_mask_pixel.reshape(F, H * W).astype(np.uint8), axis=1)
    return b"".join([
        _HEADER.pack(CLIP_MAGIC, CLIP_VERSION, F, H, W, C),
        clip.frames.astype("<f4").tobytes(),
        bits.tobytes(),
        struct.pack("<I", len(meta)),
        meta,
    ])


def clip_from_bytes(buf: bytes) -> SyntheticClip:
    if len(buf) < _HEADER.size:
        raise TruncatedError("header")
    magic, version, F, H, W, C = _HEADER.unpack_from(buf)
    if magic != CLIP_MAGIC:
        raise BadMagicError(repr(magic))
    if version != CLIP_VERSION:
        raise UnsupportedVersionError(str(version))
    pos = _HEADER.size
    n_pix = F * H * W * C * 4
    row_bytes = (H * W + 7) // 8
    if len(buf) < pos + n_pix + F * row_bytes + 4:
        raise TruncatedError("pixel or mask payload")
    frames = np.frombuffer(buf, "<f4", F * H * W * C, pos).astype(np.float64).reshape(F, H, W, C)
    pos += n_pix
    bits = np.frombuffer(buf, np.uint8, F * row_bytes, pos).reshape(F, row_bytes)
    mask = np.unpackbits(bits, axis=1, count=H * W).astype(bool).reshape(F, H, W)
    pos += F * row_bytes
    (n_meta,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n_meta:
        raise TruncatedError("metadata")
    meta = json.loads(buf[pos:pos + n_meta].decode("utf-8"))
    return SyntheticClip(frames, int(meta["identity_id"]),
                         np.array(meta["identity_params"], dtype=np.float64),
                         np.array(meta["pose_track"], dtype=np.float64).reshape(F, 2), mask)


def save_clip(path, clip: SyntheticClip) -> None:
    Path(path).write_bytes(clip_to_bytes(clip))


def load_clip(path) -> SyntheticClip:
    return clip_from_bytes(Path(path).read_bytes())
