"""Synthetic audio-visual corpus and mixture simulation.

Each synthetic speaker has a fundamental frequency, a harmonic profile and
a skeleton scale.  An utterance is a train of syllable-like bursts; the
burst envelope drives the speech amplitude, the mouth aperture of the lip
crops (exactly) and, low-passed, lagged and noisy, the wrist height of the
pose stream.  Lip cues therefore track speech more tightly than gestures.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d

from ._validation import SAMPLE_RATE, VIDEO_FPS, InvalidInputError, check_probability
from .audio import read_wav, write_wav
from .separator import CuePresence
from .visual import JOINT_NAMES, LipSequence, PoseSequence, read_lip, read_pose, write_lip, write_pose

__all__ = [
    "SimConfig",
    "MissingPolicy",
    "MixtureSample",
    "SourceClip",
    "Speaker",
    "make_speaker",
    "synth_clip",
    "synth_source",
    "mix_at_snr",
    "truncate_align",
    "apply_missing",
    "simulate_sample",
    "build_corpus",
    "read_manifest",
    "load_sample",
    "lip_aperture",
]

log = logging.getLogger(__name__)

# 3 video frames == 3200 samples, so clip lengths are kept on this grid
GRID_SAMPLES = 3200
GRID_FRAMES = 3
SPLITS = ("train", "val", "test")

_BASE_SKELETON = np.array([
    [0.00, 0.62, 0.00],   # head
    [0.00, 0.45, 0.00],   # neck
    [0.00, 0.56, 0.09],   # nose
    [0.00, 0.00, 0.00],   # spine
    [0.19, 0.42, 0.00],   # l_shoulder
    [-0.19, 0.42, 0.00],  # r_shoulder
    [0.27, 0.14, 0.05],   # l_elbow
    [-0.27, 0.14, 0.05],  # r_elbow
    [0.20, -0.08, 0.22],  # l_wrist
    [-0.20, -0.08, 0.22],  # r_wrist
], dtype=np.float64)
assert len(_BASE_SKELETON) == len(JOINT_NAMES)


# peak wrist lift (skeleton units; shoulders are 0.4 apart) for a full-scale envelope
WRIST_GAIN = 0.45

# range of the mean component power (dB re full scale) after level randomization
LEVEL_RANGE_DB = (-30.0, -18.0)


@dataclass(frozen=True)
class MissingPolicy:
    p_lip_missing: float = 0.25
    p_gesture_missing_given_lip: float = 0.20

    def __post_init__(self):
        check_probability(self.p_lip_missing, "p_lip_missing")
        check_probability(self.p_gesture_missing_given_lip, "p_gesture_missing_given_lip")


@dataclass(frozen=True)
class SimConfig:
    num_speakers: int = 2
    snr_range: tuple = (-10.0, 10.0)
    counts: dict = field(default_factory=lambda: {"train": 2000, "val": 200, "test": 200})
    speakers_per_split: dict = field(default_factory=lambda: {"train": 200, "val": 40, "test": 40})
    duration: tuple = (2.0, 6.0)
    seed: int = 0
    pose_noise: float = 0.05
    gesture_lag: tuple = (0.1, 0.2)
    image_size: int = 24
    missing: MissingPolicy = field(default_factory=MissingPolicy)

    def __post_init__(self):
        if self.num_speakers not in (2, 3):
            raise InvalidInputError(f"num_speakers must be 2 or 3, got {self.num_speakers}")
        lo, hi = self.snr_range
        if lo > hi:
            raise InvalidInputError(f"snr_range low {lo} exceeds high {hi}")
        dlo, dhi = self.duration
        if not 0 < dlo <= dhi:
            raise InvalidInputError(f"bad duration range {self.duration}")
        if not 0 <= self.gesture_lag[0] <= self.gesture_lag[1]:
            raise InvalidInputError(f"bad gesture lag range {self.gesture_lag}")
        for split in SPLITS:
            if self.counts.get(split, 0) < 0:
                raise InvalidInputError(f"negative count for split {split}")
            if self.speakers_per_split.get(split, 0) < self.num_speakers:
                raise InvalidInputError(f"split {split} needs at least {self.num_speakers} speakers")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "missing" in d:
            d["missing"] = MissingPolicy(**d["missing"])
        for key in ("snr_range", "duration", "gesture_lag"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        return {
            "num_speakers": self.num_speakers,
            "snr_range": list(self.snr_range),
            "counts": dict(self.counts),
            "speakers_per_split": dict(self.speakers_per_split),
            "duration": list(self.duration),
            "seed": self.seed,
            "pose_noise": self.pose_noise,
            "gesture_lag": list(self.gesture_lag),
            "image_size": self.image_size,
            "missing": {
                "p_lip_missing": self.missing.p_lip_missing,
                "p_gesture_missing_given_lip": self.missing.p_gesture_missing_given_lip,
            },
        }


@dataclass(frozen=True)
class Speaker:
    id: int
    f0: float
    harmonics: tuple
    body_scale: float
    skin: float


def make_speaker(speaker_id, corpus_seed=0):
    rng = np.random.default_rng([corpus_seed, 7919, speaker_id])
    n_harm = int(rng.integers(2, 5))
    amps = rng.uniform(0.3, 1.0, n_harm) / np.sqrt(np.arange(1, n_harm + 1))
    return Speaker(
        id=int(speaker_id),
        f0=float(rng.uniform(90.0, 260.0)),
        harmonics=tuple(float(a) for a in amps),
        body_scale=float(rng.uniform(0.9, 1.1)),
        skin=float(rng.uniform(0.65, 0.9)),
    )


@dataclass
class SourceClip:
    wave: np.ndarray
    pose: PoseSequence
    lip: LipSequence
    envelope: np.ndarray
    lag: float


@dataclass
class MixtureSample:
    id: str
    mixture: np.ndarray
    target: np.ndarray
    interferers: List[np.ndarray]
    lip: Optional[LipSequence]
    gesture: Optional[PoseSequence]
    snr_db: List[float]
    seed: int
    split: str = "train"
    speakers: List[int] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.target)
        if len(self.mixture) != n or any(len(b) != n for b in self.interferers):
            raise InvalidInputError(f"{self.id}: waveforms differ in length")
        if len(self.interferers) not in (1, 2):
            raise InvalidInputError(f"{self.id}: expected 1 or 2 interferers, got {len(self.interferers)}")

    @property
    def presence(self):
        return CuePresence(has_lip=self.lip is not None, has_gesture=self.gesture is not None)


# --------------------------------------------------------------------------
# source synthesis


def _envelope(rng, n_samples):
    """Train of Hann-shaped bursts (syllables) separated by short pauses."""
    env = np.zeros(n_samples)
    t = int(rng.uniform(0.0, 0.15) * SAMPLE_RATE)
    while t < n_samples:
        width = int(rng.uniform(0.12, 0.35) * SAMPLE_RATE)
        peak = rng.uniform(0.35, 1.0)
        burst = peak * np.hanning(width)
        stop = min(t + width, n_samples)
        env[t:stop] = np.maximum(env[t:stop], burst[: stop - t])
        t += width + int(rng.uniform(0.03, 0.3) * SAMPLE_RATE)
    return env


def _frame_means(signal, n_frames):
    """Average of `signal` over each 15 FPS frame window."""
    edges = (np.arange(n_frames + 1) * SAMPLE_RATE) // VIDEO_FPS
    csum = np.concatenate([[0.0], np.cumsum(signal)])
    return (csum[edges[1:]] - csum[edges[:-1]]) / np.diff(edges)


def _lip_frames(aperture, size, skin):
    """Grayscale face crop with a dark mouth ellipse whose height follows `aperture`."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx, cy = size / 2.0, size * 0.68
    half_w = size * 0.25
    half_h = 0.5 + size * 0.17 * aperture[:, None, None]
    r = np.sqrt(((xx - cx) / half_w) ** 2 + ((yy - cy) / half_h) ** 2)
    mouth = 1.0 / (1.0 + np.exp((r - 1.0) * 8.0))
    face = skin * (1.0 - 0.15 * ((yy - size / 2) / size) ** 2)
    frames = face * (1.0 - mouth) + 0.08 * mouth
    return np.clip(frames, 0.0, 1.0)


def lip_aperture(lip_frames):
    """Mouth darkness of each lip frame: a proxy for aperture, used in checks."""
    frames = np.asarray(lip_frames, dtype=np.float64)
    size = frames.shape[-1]
    region = frames[:, int(size * 0.45):, int(size * 0.2): int(size * 0.8)]
    return (1.0 - region).sum(axis=(1, 2))


def synth_clip(rng, speaker=None, n_samples=None, pose_noise=0.05, image_size=24, duration=(2.0, 6.0),
               lag_range=(0.1, 0.2)):
    """Generate one synthetic speaker utterance with its envelope-driven cues."""
    if speaker is None:
        speaker = make_speaker(int(rng.integers(0, 2**31)))
    if n_samples is None:
        lo, hi = (int(np.ceil(d * SAMPLE_RATE / GRID_SAMPLES)) for d in duration)
        n_samples = int(rng.integers(lo, max(hi, lo) + 1)) * GRID_SAMPLES
    n_video = (n_samples * VIDEO_FPS) // SAMPLE_RATE
    env = _envelope(rng, n_samples)

    t = np.arange(n_samples) / SAMPLE_RATE
    wobble = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * speaker.f0 * np.cumsum(wobble) / SAMPLE_RATE
    carrier = sum(
        a * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        for k, a in enumerate(speaker.harmonics, start=1)
    )
    wave = env * carrier
    wave *= 0.5 / max(np.abs(wave).max(), 1e-9)

    env_video = _frame_means(env, n_video)
    lip = _lip_frames(env_video, image_size, speaker.skin)

    lag = float(rng.uniform(*lag_range))
    shift = int(round(lag * SAMPLE_RATE))
    lagged = np.concatenate([np.zeros(shift), env[: n_samples - shift]])
    motion = gaussian_filter1d(_frame_means(lagged, n_video), sigma=1.0, mode="nearest")
    skeleton = np.repeat(_BASE_SKELETON[None] * speaker.body_scale, n_video, axis=0)
    dominant = 8 if rng.random() < 0.5 else 9
    other = 17 - dominant
    skeleton[:, dominant, 1] += WRIST_GAIN * motion
    skeleton[:, other, 1] += WRIST_GAIN / 3 * motion
    skeleton[:, dominant - 2, 1] += WRIST_GAIN / 4 * motion
    sway = 0.03 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * np.arange(n_video) / VIDEO_FPS + rng.uniform(0, 6.3))
    skeleton[:, :3, 0] += sway[:, None]
    noise = rng.normal(0.0, pose_noise, skeleton.shape)
    noise[:, JOINT_NAMES.index("spine")] = 0.0
    skeleton += noise

    return SourceClip(
        wave=wave,
        pose=PoseSequence(skeleton.astype(np.float32)),
        lip=LipSequence(lip.astype(np.float32)),
        envelope=env,
        lag=lag,
    )


def synth_source(rng, speaker=None, **kwargs):
    """Return ``(waveform, pose sequence, lip sequence)`` for one synthetic utterance."""
    clip = synth_clip(rng, speaker, **kwargs)
    return clip.wave, clip.pose, clip.lip


# --------------------------------------------------------------------------
# mixing protocol


def mix_at_snr(target, interferer, snr_db):
    """Scale `interferer` so that the target-to-interferer SNR equals `snr_db`.

    Returns ``(target + gain * interferer, gain)``.
    """
    target = np.asarray(target, dtype=np.float64)
    interferer = np.asarray(interferer, dtype=np.float64)
    if target.shape != interferer.shape:
        raise InvalidInputError(f"length mismatch: {target.shape} vs {interferer.shape}")
    p_b = np.sum(interferer ** 2)
    if p_b == 0.0:
        raise InvalidInputError("interferer is silent")
    p_s = np.sum(target ** 2)
    if p_s == 0.0:
        raise InvalidInputError("target is silent")
    gain = np.sqrt(p_s / (p_b * 10.0 ** (snr_db / 10.0)))
    return target + gain * interferer, float(gain)


def truncate_align(waves, cues=()):
    """Cut every waveform to the shortest one; cut cue streams to the matching frame count."""
    if len(waves) < 2:
        raise InvalidInputError("truncate_align needs at least two waveforms")
    n = min(len(w) for w in waves)
    n_video = (n * VIDEO_FPS) // SAMPLE_RATE
    out_waves = [np.asarray(w)[:n] for w in waves]
    out_cues = []
    for cue in cues:
        if cue is None:
            out_cues.append(None)
        else:
            out_cues.append(type(cue)(cue.frames[:n_video], fps=cue.fps))
    return out_waves, out_cues


def apply_missing(sample, policy, rng):
    """Drop the lip cue with ``p_lip_missing``; otherwise drop the gesture cue with the conditional rate."""
    if sample.lip is None or sample.gesture is None:
        raise InvalidInputError(f"{sample.id}: apply_missing expects both cues present")
    drop_lip = rng.random() < policy.p_lip_missing
    drop_gesture = rng.random() < policy.p_gesture_missing_given_lip
    if drop_lip:
        return replace(sample, lip=None)
    if drop_gesture:
        return replace(sample, gesture=None)
    return sample


def simulate_sample(config, split, index, speaker_ids):
    """Deterministically build sample `index` of `split` from its own rng stream."""
    seed_seq = np.random.SeedSequence([config.seed, SPLITS.index(split), index])
    rng = np.random.default_rng(seed_seq)
    chosen = rng.choice(speaker_ids, size=config.num_speakers, replace=False)
    speakers = [make_speaker(int(s), config.seed) for s in chosen]
    clips = [
        synth_clip(rng, spk, pose_noise=config.pose_noise, image_size=config.image_size, duration=config.duration,
                   lag_range=config.gesture_lag)
        for spk in speakers
    ]
    waves, (lip, pose) = truncate_align([c.wave for c in clips], [clips[0].lip, clips[0].pose])
    target = waves[0]
    scaled, snrs = [], []
    for b in waves[1:]:
        snr = float(rng.uniform(*config.snr_range))
        _, gain = mix_at_snr(target, b, snr)
        scaled.append(gain * b)
        snrs.append(snr)
    # One common gain centres the components' log powers on a random loudness,
    # so the absolute level does not tell the target from the interferers.
    mean_db = np.mean([10 * np.log10(np.mean(w**2)) for w in [target, *scaled]])
    level = 10 ** ((rng.uniform(*LEVEL_RANGE_DB) - mean_db) / 20)
    target = level * target
    scaled = [level * b for b in scaled]
    mixture = target.copy()
    for b in scaled:
        mixture = mixture + b
    sample = MixtureSample(
        id=f"{split}-{index:05d}",
        mixture=mixture,
        target=target,
        interferers=scaled,
        lip=lip,
        gesture=pose,
        snr_db=snrs,
        seed=int(seed_seq.generate_state(1)[0]),
        split=split,
        speakers=[int(s) for s in chosen],
    )
    return apply_missing(sample, config.missing, rng)


def speaker_pools(config):
    """Disjoint speaker-id ranges per split."""
    pools, start = {}, 0
    for split in SPLITS:
        n = config.speakers_per_split[split]
        pools[split] = np.arange(start, start + n)
        start += n
    return pools


# --------------------------------------------------------------------------
# corpus files


def _write_sample(root, sample):
    rel = Path(sample.split) / sample.id
    d = Path(root) / rel
    d.mkdir(parents=True, exist_ok=True)
    target = sample.target.astype(np.float32)
    interferers = [b.astype(np.float32) for b in sample.interferers]
    mixture = target.copy()
    for b in interferers:
        mixture = mixture + b
    write_wav(d / "mixture.wav", mixture)
    write_wav(d / "target.wav", target)
    paths = []
    for i, b in enumerate(interferers):
        write_wav(d / f"interferer{i}.wav", b)
        paths.append(str(rel / f"interferer{i}.wav"))
    lip_path = gesture_path = None
    if sample.lip is not None:
        write_lip(d / "lip.bin", sample.lip)
        lip_path = str(rel / "lip.bin")
    if sample.gesture is not None:
        write_pose(d / "pose.json", sample.gesture)
        gesture_path = str(rel / "pose.json")
    return {
        "id": sample.id,
        "split": sample.split,
        "mixture_path": str(rel / "mixture.wav"),
        "target_path": str(rel / "target.wav"),
        "interferer_paths": paths,
        "lip_path": lip_path,
        "gesture_path": gesture_path,
        "snr_db": sample.snr_db,
        "seed": sample.seed,
        "speakers": sample.speakers,
    }


def _build_one(args):
    config, split, index, pool, root = args
    sample = simulate_sample(config, split, index, pool)
    return _write_sample(root, sample)


def build_corpus(config, out_dir, jobs=1):
    """Simulate every split, write sample files and ``manifest.jsonl``; return the manifest rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pools = speaker_pools(config)
    tasks = [
        (config, split, i, pools[split], out_dir)
        for split in SPLITS
        for i in range(config.counts.get(split, 0))
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_build_one, tasks, chunksize=16))
    else:
        rows = [_build_one(t) for t in tasks]
    rows.sort(key=lambda r: r["id"])
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out_dir / "sim_config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2))
    log.info("wrote %d samples to %s", len(rows), out_dir)
    return rows


def read_manifest(path, split=None):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if split is None or row["split"] == split:
                    rows.append(row)
    return rows


def load_sample(row, root):
    """Materialize one manifest row as a :class:`MixtureSample` (float32 audio)."""
    root = Path(root)
    try:
        return MixtureSample(
            id=row["id"],
            mixture=read_wav(root / row["mixture_path"]),
            target=read_wav(root / row["target_path"]),
            interferers=[read_wav(root / p) for p in row["interferer_paths"]],
            lip=read_lip(root / row["lip_path"]) if row["lip_path"] else None,
            gesture=read_pose(root / row["gesture_path"]) if row["gesture_path"] else None,
            snr_db=list(row["snr_db"]),
            seed=row["seed"],
            split=row["split"],
            speakers=list(row.get("speakers", [])),
        )
    except OSError as exc:
        raise OSError(f"sample {row['id']}: {exc}") from exc
