"""Manifests, clip sampling and the synthetic audio-visual forgery generator."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .audio import (
    N_FFT,
    SAMPLE_RATE,
    VIDEO_FPS,
    AudioError,
    Spectrogram,
    clip_spectrogram,
    read_wav,
    resize_bilinear,
    to_pcm16,
    write_wav,
)
from .rng import stream

log = logging.getLogger(__name__)

FRAME_SIZE = 96
MIN_DURATION = 1.68
MANIFEST_VERSION = 1
GENERATORS = ("none", "wav2lip", "makeittalk", "pcavs", "synthetic")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)
SAMPLES_PER_FRAME = SAMPLE_RATE // VIDEO_FPS


class DataError(ValueError):
    """Invalid or inconsistent dataset content."""


class ClipTooShort(DataError):
    def __init__(self, video_id: str, required: int, available: int):
        super().__init__(f"video {video_id}: needs {required} frames, has {available}")
        self.video_id = video_id
        self.required = required
        self.available = available


@dataclass
class VideoEntry:
    id: str
    frames_dir: Optional[str]
    audio: Optional[str]
    label: int
    generator: str
    duration: float
    frame_count: int
    split: Optional[str] = None
    mouth_box: Optional[tuple] = None
    base_dir: Optional[Path] = field(default=None, repr=False, compare=False)
    source: Optional["SyntheticVideo"] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"{self.id}: label must be 0 (real) or 1 (fake), got {self.label}")
        if self.generator not in GENERATORS:
            raise DataError(f"{self.id}: unknown generator {self.generator!r}")
        if (self.label == 0) != (self.generator == "none"):
            raise DataError(f"{self.id}: real entries have generator 'none' and fakes never do")
        if self.duration < MIN_DURATION:
            raise DataError(f"{self.id}: duration {self.duration:.2f}s below the {MIN_DURATION}s minimum")

    def _path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def frame_paths(self) -> list[Path]:
        return sorted(self._path(self.frames_dir).glob("*.png"))

    def load_frames(self, start: int, count: int) -> np.ndarray:
        """uint8 frames ``(count, H, W, 3)`` starting at ``start``."""
        if start < 0 or start + count > self.frame_count:
            raise ClipTooShort(self.id, start + count, self.frame_count)
        if self.source is not None:
            return self.source.render(start, count)
        paths = self.frame_paths()
        if len(paths) < start + count:
            raise ClipTooShort(self.id, start + count, len(paths))
        return np.stack([_read_png(p) for p in paths[start:start + count]])

    def load_audio(self) -> np.ndarray:
        if self.source is not None:
            return self.source.audio.astype(np.float64) / 32768.0
        samples, _ = read_wav(self._path(self.audio))
        return samples

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "frames_dir": self.frames_dir,
            "audio": self.audio,
            "label": self.label,
            "generator": self.generator,
            "duration": self.duration,
            "frame_count": self.frame_count,
            "split": self.split,
        }
        if self.mouth_box is not None:
            d["mouth_box"] = list(self.mouth_box)
        return d

    @classmethod
    def from_json(cls, d: dict, base_dir: Optional[Path] = None) -> "VideoEntry":
        box = d.get("mouth_box")
        return cls(
            id=d["id"], frames_dir=d["frames_dir"], audio=d["audio"], label=int(d["label"]),
            generator=d["generator"], duration=float(d["duration"]), frame_count=int(d["frame_count"]),
            split=d.get("split"), mouth_box=tuple(box) if box is not None else None, base_dir=base_dir,
        )


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise DataError(f"{path}: expected 8-bit RGB PNG, found mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.shape != (FRAME_SIZE, FRAME_SIZE, 3):
        raise DataError(f"{path}: expected {FRAME_SIZE}x{FRAME_SIZE} frame, found {arr.shape[1]}x{arr.shape[0]}")
    return arr


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    entries: list
    ratios: tuple = DEFAULT_RATIOS
    seed: int = 0
    rejected: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "entries": [e.to_json() for e in self.entries],
        }
        path.write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        if doc.get("version") != MANIFEST_VERSION:
            raise DataError(f"{path}: unsupported manifest version {doc.get('version')!r}")
        base = path.parent
        entries = [VideoEntry.from_json(d, base) for d in doc["entries"]]
        return cls(entries, tuple(doc["ratios"]), int(doc["seed"]))


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(entries: list, ratios=DEFAULT_RATIOS, seed: int = 0, by_generator: bool = False) -> None:
    """Seeded stratified 60/20/20-style split, in place."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    rng = stream(seed, "split")
    groups: dict = {}
    for e in sorted(entries, key=lambda e: e.id):
        key = (e.label, e.generator) if by_generator else e.label
        groups.setdefault(key, []).append(e)
    for key in sorted(groups):
        members = groups[key]
        order = rng.permutation(len(members))
        n_train, n_val, _ = split_counts(len(members), ratios)
        for rank, idx in enumerate(order):
            members[idx].split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"


def build_manifest(root, ratios=DEFAULT_RATIOS, seed: int = 0, by_generator: bool = False) -> Manifest:
    """Scan ``root`` for video directories and assign splits.

    Each video directory holds ``frames/*.png``, ``audio.wav`` and a
    ``meta.json`` with ``label`` and ``generator``. Invalid directories are
    listed in ``Manifest.rejected`` as ``(dir, [reasons])``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    video_dirs = sorted(p.parent for p in root.rglob("meta.json"))
    if not video_dirs:
        raise DataError(f"no video directories (meta.json) found under {root}")
    entries, rejected = [], []
    for vdir in video_dirs:
        reasons: list[str] = []
        entry = _scan_video(vdir, root, reasons)
        if entry is None:
            rejected.append((str(vdir.relative_to(root)), reasons))
            log.warning("rejected %s: %s", vdir, "; ".join(reasons))
        else:
            entries.append(entry)
    if not entries:
        raise DataError(f"no valid videos under {root}; {len(rejected)} rejected")
    assign_splits(entries, ratios, seed, by_generator)
    return Manifest(entries, tuple(ratios), seed, rejected)


def _scan_video(vdir: Path, root: Path, reasons: list) -> Optional[VideoEntry]:
    try:
        meta = json.loads((vdir / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        reasons.append(f"meta.json unreadable: {exc}")
        return None
    frames = sorted((vdir / "frames").glob("*.png"))
    wav = vdir / "audio.wav"
    if not frames:
        reasons.append("missing frames")
    if not wav.exists():
        reasons.append("missing audio.wav")
    if reasons:
        return None
    try:
        _read_png(frames[0])
        samples, _ = read_wav(wav)
    except (DataError, AudioError) as exc:
        reasons.append(str(exc))
        return None
    audio_frames = len(samples) / SAMPLES_PER_FRAME
    if abs(audio_frames - len(frames)) > 1:
        reasons.append(f"frame count {len(frames)} vs audio length {audio_frames:.2f} frames")
        return None
    rel = vdir.relative_to(root)
    try:
        box = meta.get("mouth_box")
        return VideoEntry(
            id=str(meta.get("id", rel.as_posix())), frames_dir=(rel / "frames").as_posix(),
            audio=(rel / "audio.wav").as_posix(), label=int(meta["label"]), generator=meta["generator"],
            duration=len(frames) / VIDEO_FPS, frame_count=len(frames),
            mouth_box=tuple(box) if box is not None else None, base_dir=root,
        )
    except (KeyError, DataError) as exc:
        reasons.append(f"invalid metadata: {exc}")
        return None


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------


@dataclass
class SampleClip:
    visual: np.ndarray  # (3T, crop, crop) in [0, 1]
    audio: Spectrogram
    label: int
    video_id: str
    start: int

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, visual=self.visual, mels=self.audio.mels, resized=self.audio.resized,
                 label=self.label, video_id=self.video_id, start=self.start)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SampleClip":
        with np.load(io.BytesIO(raw)) as z:
            return cls(z["visual"], Spectrogram(z["mels"], z["resized"]), int(z["label"]),
                       str(z["video_id"]), int(z["start"]))


def max_start(entry: VideoEntry, T: int, n_samples: Optional[int] = None) -> int:
    """Last start frame with T frames and a full audio window available."""
    if n_samples is None:
        n_samples = int(round(entry.duration * SAMPLE_RATE)) if entry.source is None else len(entry.source.audio)
    by_frames = entry.frame_count - T
    by_audio = (n_samples - max(N_FFT, T * SAMPLES_PER_FRAME)) // SAMPLES_PER_FRAME
    return min(by_frames, by_audio)


def choose_start(entry: VideoEntry, T: int, scheme: str = "definite", n: int = 10,
                 rng: Optional[np.random.Generator] = None) -> int:
    if scheme == "definite":
        if entry.frame_count < n + T:
            raise ClipTooShort(entry.id, n + T, entry.frame_count)
        return n
    if scheme == "random":
        last = max_start(entry, T)
        if last < 0:
            raise ClipTooShort(entry.id, T, entry.frame_count)
        if rng is None:
            raise ValueError("random scheme needs an rng")
        return int(rng.integers(0, last + 1))
    raise ValueError(f"unknown scheme {scheme!r}")


def sample_clip(entry: VideoEntry, T: int, scheme: str = "definite", n: int = 10,
                rng: Optional[np.random.Generator] = None, crop: int = FRAME_SIZE,
                audio_steps: int = 96) -> SampleClip:
    """Load T consecutive frames and the aligned audio spectrogram."""
    start = choose_start(entry, T, scheme, n, rng)
    return load_clip(entry, start, T, crop, audio_steps)


def load_clip(entry: VideoEntry, start: int, T: int, crop: int = FRAME_SIZE, audio_steps: int = 96) -> SampleClip:
    frames = entry.load_frames(start, T)
    visual = stack_frames(frames, crop)
    try:
        spec = clip_spectrogram(entry.load_audio(), start, T, crop, audio_steps)
    except AudioError as exc:
        raise DataError(f"video {entry.id}: {exc}") from exc
    return SampleClip(visual, spec, entry.label, entry.id, start)


def stack_frames(frames: np.ndarray, crop: int = FRAME_SIZE) -> np.ndarray:
    """(T, H, W, 3) uint8 -> (3T, crop, crop) float in [0, 1], frames in temporal order."""
    T, H, W, _ = frames.shape
    x = frames.astype(np.float64).transpose(0, 3, 1, 2).reshape(3 * T, H, W) / 255.0
    if (H, W) != (crop, crop):
        x = resize_bilinear(x, crop, crop)
    return x


@dataclass
class Batch:
    visual: np.ndarray
    mels: np.ndarray
    resized: np.ndarray
    labels: np.ndarray
    clips: list


def collate(clips: Sequence[SampleClip]) -> Batch:
    return Batch(
        visual=np.stack([c.visual for c in clips]),
        mels=np.stack([c.audio.mels for c in clips]),
        resized=np.stack([c.audio.resized for c in clips]),
        labels=np.array([[c.label] for c in clips], dtype=np.float64),
        clips=list(clips),
    )


# ---------------------------------------------------------------------------
# synthetic forgery generator
# ---------------------------------------------------------------------------

MOUTH_CY, MOUTH_CX = 66, 48
MOUTH_HALF_W = 20
MOUTH_MAX_HALF_H = 20


@dataclass
class SyntheticVideo:
    """Procedural talking-face schematic with its stored audio track.

    ``render_envelope`` drives the mouth aperture; ``audio`` (int16 PCM) is
    the stored soundtrack. For real videos the audio was synthesized from
    the same envelope, for fakes from an independent one.
    """

    seed: int
    render_envelope: np.ndarray
    audio_envelope: np.ndarray
    audio: np.ndarray
    face: dict

    @property
    def frame_count(self) -> int:
        return len(self.render_envelope)

    def render(self, start: int, count: int) -> np.ndarray:
        base = render_static(self.face)
        return np.stack([render_face(self.face, self.render_envelope[t], self.seed, t, base)
                         for t in range(start, start + count)])

    def mouth_box(self) -> tuple:
        """(top, left, bottom, right) pixel box enclosing the mouth at full aperture."""
        cy, cx = self.face["mouth_cy"], self.face["mouth_cx"]
        return (cy - MOUTH_MAX_HALF_H - 1, cx - MOUTH_HALF_W - 1, cy + MOUTH_MAX_HALF_H + 2, cx + MOUTH_HALF_W + 2)


_yy, _xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64) + 0.5


def _ellipse_coverage(cy, cx, ry, rx, yy=_yy, xx=_xx) -> np.ndarray:
    """Soft (about one pixel wide edge) membership of an axis-aligned ellipse."""
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return np.clip((1.0 - r) * min(ry, rx) + 0.5, 0.0, 1.0)


def render_static(face: dict) -> np.ndarray:
    """Background, head and eyes; everything except the mouth."""
    img = np.empty((FRAME_SIZE, FRAME_SIZE, 3))
    img[:] = face["background"]
    layers = [
        (_ellipse_coverage(face["cy"], face["cx"], face["ry"], face["rx"]), face["skin"]),
        (_ellipse_coverage(face["eye_y"], face["cx"] - face["eye_dx"], 3.0, 4.5), face["eye"]),
        (_ellipse_coverage(face["eye_y"], face["cx"] + face["eye_dx"], 3.0, 4.5), face["eye"]),
    ]
    for cov, color in layers:
        img += cov[..., None] * (np.asarray(color) - img)
    return img


def render_face(face: dict, aperture: float, seed: int, t: int, base: Optional[np.ndarray] = None) -> np.ndarray:
    """One uint8 RGB frame whose mouth opening is proportional to ``aperture``."""
    img = (render_static(face) if base is None else base).copy()
    cy, cx = face["mouth_cy"], face["mouth_cx"]
    top, left = cy - MOUTH_MAX_HALF_H - 1, cx - MOUTH_HALF_W - 1
    sub = img[top:cy + MOUTH_MAX_HALF_H + 2, left:cx + MOUTH_HALF_W + 2]
    yy, xx = _yy[top:top + sub.shape[0], left:left + sub.shape[1]], _xx[top:top + sub.shape[0], left:left + sub.shape[1]]
    lips = _ellipse_coverage(cy, cx, 1.0 + aperture * (MOUTH_MAX_HALF_H - 1.0), MOUTH_HALF_W, yy, xx)
    inner = _ellipse_coverage(cy, cx, 0.3 + aperture * (MOUTH_MAX_HALF_H - 2.5), MOUTH_HALF_W - 3.0, yy, xx)
    sub += lips[..., None] * (np.asarray(face["lips"]) - sub)
    sub += inner[..., None] * (np.asarray(face["inner"]) - sub)
    noise = np.random.default_rng([seed, t]).standard_normal(img.shape, dtype=np.float32)
    return np.clip(np.round(img + 3.0 * noise), 0, 255).astype(np.uint8)


def _random_face(rng: np.random.Generator) -> dict:
    tone = rng.uniform(0.0, 0.5)
    skin = np.array([235.0, 190.0, 160.0]) * (1.0 - tone) + np.array([150.0, 100.0, 75.0]) * tone
    skin = skin + rng.uniform(-5, 5, 3)
    return {
        "background": rng.uniform(140, 200, 3),
        "skin": skin,
        "eye": rng.uniform(60, 90, 3),
        "lips": np.array([150.0, 60.0, 60.0]) + rng.uniform(-10, 10, 3),
        "inner": np.array([25.0, 10.0, 15.0]) + rng.uniform(-5, 5, 3),
        "cy": 50 + rng.uniform(-2, 2),
        "cx": 48 + rng.uniform(-2, 2),
        "ry": rng.uniform(38, 44),
        "rx": rng.uniform(30, 36),
        "eye_y": 36 + rng.uniform(-2, 2),
        "eye_dx": rng.uniform(11, 14),
        "mouth_cy": MOUTH_CY + int(rng.integers(-2, 3)),
        "mouth_cx": MOUTH_CX + int(rng.integers(-2, 3)),
    }


def random_envelope(rng: np.random.Generator, n_frames: int) -> np.ndarray:
    """Smooth per-frame speech-like loudness in [0.05, 1].

    A 5-frame Hann smoother at 25 fps leaves most power at syllable rates
    (roughly 4-8 Hz), so a three-frame clip already sees the envelope move.
    """
    level = rng.uniform(0.15, 0.85)
    raw = rng.normal(0.0, 1.0, n_frames + 4)
    kernel = np.hanning(7)[1:-1]
    smooth = np.convolve(raw, kernel / kernel.sum(), mode="valid")[:n_frames]
    smooth /= max(np.std(smooth), 1e-9)
    return np.clip(level + 0.25 * smooth, 0.05, 1.0)


def envelope_audio(rng: np.random.Generator, envelope: np.ndarray) -> np.ndarray:
    """Band-limited noise bursts whose amplitude follows ``envelope``; int16 PCM."""
    n = len(envelope) * SAMPLES_PER_FRAME
    spectrum = np.fft.rfft(rng.normal(0.0, 1.0, n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spectrum[(freqs < 300) | (freqs > 3400)] = 0.0
    carrier = np.fft.irfft(spectrum, n)
    # RMS (not peak) normalization: a peak-normalized carrier gives each video a
    # random gain of several percent, so loudness would not track the envelope.
    # 5 x RMS keeps clipping below one sample in a billion.
    carrier /= max(5.0 * np.sqrt(np.mean(carrier ** 2)), 1e-12)
    t_frames = (np.arange(n) + 0.5) / SAMPLES_PER_FRAME - 0.5
    amp = np.interp(t_frames, np.arange(len(envelope)), envelope)
    return to_pcm16(0.9 * amp * carrier)


def synth_generate(count: int, seed: int = 0, T: int = 3, fps: int = VIDEO_FPS,
                   min_frames: int = 42, max_frames: int = 50) -> list[VideoEntry]:
    """Balanced synthetic dataset: floor(count/2) real and ceil(count/2) fake entries.

    Frames are rendered on demand; only envelopes and audio are held in memory.
    """
    if count < 2:
        raise DataError(f"synthetic generation needs count >= 2 to cross-pair audio, got {count}")
    if fps != VIDEO_FPS:
        raise ValueError(f"only {VIDEO_FPS} fps is supported")
    if min_frames / fps < MIN_DURATION:
        raise ValueError(f"min_frames={min_frames} gives clips shorter than {MIN_DURATION}s")
    if min_frames < 10 + T:
        raise ValueError(f"min_frames={min_frames} too short for T={T}")
    n_real = count // 2
    labels = np.array([0] * n_real + [1] * (count - n_real))
    master = stream(seed, "synth")
    labels = labels[master.permutation(count)]
    width = len(str(count - 1))
    entries = []
    for i, label in enumerate(labels):
        vseed = int(master.integers(2**31))
        rng = np.random.default_rng(vseed)
        n_frames = int(rng.integers(min_frames, max_frames + 1))
        face = _random_face(rng)
        render_env = random_envelope(rng, n_frames)
        if label == 0:
            audio_env = render_env
        else:
            audio_env = random_envelope(rng, n_frames)
        audio = envelope_audio(rng, audio_env)
        video = SyntheticVideo(vseed, render_env, audio_env, audio, face)
        vid = f"syn{i:0{width}d}"
        entries.append(VideoEntry(
            id=vid, frames_dir=f"{vid}/frames", audio=f"{vid}/audio.wav", label=int(label),
            generator="none" if label == 0 else "synthetic", duration=n_frames / fps,
            frame_count=n_frames, mouth_box=video.mouth_box(), source=video,
        ))
    return entries


def write_dataset(entries: Sequence[VideoEntry], out_dir, ratios=DEFAULT_RATIOS, seed: int = 0) -> Manifest:
    """Materialize in-memory entries as PNG frames + WAV audio and write ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e in entries:
        vdir = out / e.id
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        frames = e.load_frames(0, e.frame_count)
        for t, frame in enumerate(frames):
            Image.fromarray(frame, "RGB").save(vdir / "frames" / f"{t:05d}.png", optimize=False)
        write_wav(vdir / "audio.wav", e.load_audio())
        meta = {"id": e.id, "label": e.label, "generator": e.generator}
        if e.mouth_box is not None:
            meta["mouth_box"] = [int(v) for v in e.mouth_box]
        (vdir / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    manifest = build_manifest(out, ratios, seed)
    manifest.save(out / "manifest.json")
    return manifest


def split_in_memory(entries: list, ratios=DEFAULT_RATIOS, seed: int = 0) -> Manifest:
    assign_splits(entries, ratios, seed)
    return Manifest(list(entries), tuple(ratios), seed)
