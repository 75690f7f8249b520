"""Synthetic multi-label audio events: a desk-scale stand-in for a large labelled audio corpus.

Each class is a fixed (kind, frequency band) pair. Clips are silent apart
from one to three events, so every clip has at least one positive label.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import FbankConfig, fbank, hz_to_mel, log_mel, mel_to_hz

KINDS = ("tone", "chirp", "noise-burst", "am-tone")
NUM_BANDS = 8


def _mel_bands(lo_hz: float, hi_hz: float, count: int, core: float = 0.6):
    # equal mel segments; only the central part of each is used so bands never touch
    edges = hz_to_mel(np.array([lo_hz, hi_hz]))
    seg = np.linspace(edges[0], edges[1], count + 1)
    pad = 0.5 * (1.0 - core) * (seg[1] - seg[0])
    return tuple((float(mel_to_hz(a + pad)), float(mel_to_hz(b - pad))) for a, b in zip(seg[:-1], seg[1:]))


# (low, high) Hz, all under a 4 kHz Nyquist
BANDS = _mel_bands(120.0, 3600.0, NUM_BANDS)


@dataclass(frozen=True)
class SynthEvent:
    class_id: int
    kind: str
    onset: float
    duration: float
    frequency: float
    level_db: float


def class_signature(class_id: int) -> tuple[str, tuple[float, float]]:
    """Kind and band of a class; the first ``len(BANDS)`` classes each own a band."""
    if not 0 <= class_id < len(KINDS) * len(BANDS):
        raise ValueError(f"class id {class_id} out of range")
    band = class_id % len(BANDS)
    return KINDS[(band + class_id // len(BANDS)) % len(KINDS)], BANDS[band]


def _bandpass_noise(rng, n, sample_rate, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    out = np.fft.irfft(spec, n)
    return out / (np.sqrt(np.mean(out ** 2)) + 1e-12)


def render_event(event: SynthEvent, sample_rate: int, rng) -> np.ndarray:
    """Waveform of one event (unit-ish RMS times the level gain)."""
    n = max(1, int(round(event.duration * sample_rate)))
    t = np.arange(n) / sample_rate
    _, (lo, hi) = class_signature(event.class_id)
    f0 = event.frequency
    if event.kind == "tone":
        sig = np.sqrt(2) * np.sin(2 * np.pi * f0 * t)
    elif event.kind == "chirp":
        # sweep from f0 to the band edge farthest away
        f1 = hi if (f0 - lo) < (hi - f0) else lo
        inst = f0 + (f1 - f0) * t / max(event.duration, 1e-9)
        sig = np.sqrt(2) * np.sin(2 * np.pi * np.cumsum(inst) / sample_rate)
    elif event.kind == "noise-burst":
        half = 0.15 * f0
        sig = _bandpass_noise(rng, n, sample_rate, max(lo, f0 - half), min(hi, f0 + half))
    elif event.kind == "am-tone":
        rate = 5.0
        env = 1.0 + np.sin(2 * np.pi * rate * t)
        sig = env * np.sin(2 * np.pi * f0 * t) / np.sqrt(0.75)
    else:
        raise ValueError(f"unknown event kind {event.kind!r}")
    ramp = min(n // 2, int(0.02 * sample_rate))
    if ramp > 0:
        fade = np.linspace(0.0, 1.0, ramp)
        sig[:ramp] *= fade
        sig[-ramp:] *= fade[::-1]
    return sig * 10.0 ** (event.level_db / 20.0)


@dataclass
class SynthDataset:
    """Features and labels for a synthetic split.

    ``features`` are normalized fbanks ``(clips, frames, mels)``; ``powers``
    holds the mean-square waveform power of each clip (used for SNR scaling).
    """

    features: np.ndarray
    labels: np.ndarray
    powers: np.ndarray
    events: list
    seeds: list
    fbank_config: FbankConfig
    clip_seconds: float
    waveforms: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def subset(self, count: int) -> "SynthDataset":
        """The first ``count`` clips."""
        return replace(self, features=self.features[:count], labels=self.labels[:count],
                       powers=self.powers[:count], events=self.events[:count], seeds=self.seeds[:count],
                       waveforms=None if self.waveforms is None else self.waveforms[:count])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(np.ascontiguousarray(self.powers).tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "num_clips": len(self),
            "num_classes": self.num_classes,
            "clip_seconds": self.clip_seconds,
            "fbank": self.fbank_config.to_dict(),
            "seeds": self.seeds,
            "digest": self.digest(),
            "clips": [
                {"labels": np.flatnonzero(lbl).tolist(), "power": float(p),
                 "events": [asdict(e) for e in evs]}
                for lbl, p, evs in zip(self.labels, self.powers, self.events)
            ],
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


def sample_events(rng, num_classes: int, clip_seconds: float, max_events: int = 3):
    count = int(rng.integers(1, max_events + 1))
    classes = rng.choice(num_classes, size=min(count, num_classes), replace=False)
    events = []
    for cid in sorted(int(c) for c in classes):
        kind, (lo, hi) = class_signature(cid)
        duration = float(rng.uniform(1.0, 4.0))
        onset = float(rng.uniform(0.0, clip_seconds - duration))
        freq = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        level = float(rng.uniform(-30.0, -6.0))
        events.append(SynthEvent(cid, kind, onset, duration, freq, level))
    return events


def synth_clip(seed: int, num_classes: int, clip_seconds: float, sample_rate: int):
    """Render one clip; returns ``(waveform, events)``."""
    rng = np.random.default_rng(seed)
    events = sample_events(rng, num_classes, clip_seconds)
    wave = np.zeros(int(round(clip_seconds * sample_rate)))
    for ev in events:
        sig = render_event(ev, sample_rate, rng)
        start = int(round(ev.onset * sample_rate))
        stop = min(wave.size, start + sig.size)
        wave[start:stop] += sig[: stop - start]
    return wave, events


def synth_dataset(num_clips: int, num_classes: int = 8, seed: int = 0,
                  fbank_config: FbankConfig | None = None, clip_seconds: float = 10.0,
                  keep_waveforms: bool = False, normalize_from_data: bool = False) -> SynthDataset:
    """Generate a reproducible labelled split.

    Per-clip seeds are spawned from ``seed`` so any clip can be regenerated
    on its own. With ``normalize_from_data`` the fbank mean/std are measured
    on this split and written into the returned config.
    """
    if num_classes > len(KINDS) * len(BANDS):
        raise ValueError(f"at most {len(KINDS) * len(BANDS)} classes are available")
    cfg = fbank_config or FbankConfig()
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(num_clips)]
    raw, labels, powers, events, waves = [], [], [], [], []
    for s in seeds:
        wave, evs = synth_clip(s, num_classes, clip_seconds, cfg.sample_rate)
        raw.append(log_mel(wave, cfg))
        lbl = np.zeros(num_classes, dtype=np.float32)
        lbl[[e.class_id for e in evs]] = 1.0
        labels.append(lbl)
        powers.append(float(np.mean(wave ** 2)))
        events.append(evs)
        if keep_waveforms:
            waves.append(wave.astype(np.float32))
    raw = np.stack(raw)
    if normalize_from_data:
        cfg = cfg.with_stats(raw.mean(), raw.std())
    feats = ((raw - cfg.mean) / cfg.std).astype(np.float32)
    return SynthDataset(
        features=feats,
        labels=np.stack(labels),
        powers=np.asarray(powers),
        events=events,
        seeds=seeds,
        fbank_config=cfg,
        clip_seconds=clip_seconds,
        waveforms=np.stack(waves) if keep_waveforms else None,
    )


def regenerate_waveform(dataset: SynthDataset, index: int) -> np.ndarray:
    wave, _ = synth_clip(dataset.seeds[index], dataset.num_classes, dataset.clip_seconds,
                         dataset.fbank_config.sample_rate)
    return wave


def check_fbank_consistency(dataset: SynthDataset, index: int) -> bool:
    return np.array_equal(fbank(regenerate_waveform(dataset, index), dataset.fbank_config),
                          dataset.features[index])


def save_dataset(path, dataset: SynthDataset) -> None:
    """Write features, labels and powers to the array container with the manifest as metadata."""
    from .models.checkpoint import save_arrays
    arrays = {"features": dataset.features, "labels": dataset.labels, "powers": dataset.powers}
    save_arrays(path, arrays, kind="dataset", config=dataset.fbank_config.to_dict(),
                metadata=dataset.manifest())


def load_dataset(path) -> SynthDataset:
    from .models.checkpoint import CheckpointError, load_arrays
    arrays, header = load_arrays(path)
    if header["kind"] != "dataset":
        raise CheckpointError(f"{path}: holds a {header['kind']!r}, not a dataset")
    meta = header["metadata"]
    events = [[SynthEvent(**e) for e in clip["events"]] for clip in meta["clips"]]
    return SynthDataset(features=arrays["features"], labels=arrays["labels"], powers=arrays["powers"],
                        events=events, seeds=meta["seeds"], fbank_config=FbankConfig(**header["config"]),
                        clip_seconds=meta["clip_seconds"])
