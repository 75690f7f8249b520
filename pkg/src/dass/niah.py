"""Audio needle-in-a-haystack evaluation.

A needle is the unmodified fbank of a labelled clip. It is placed inside a
longer haystack made of silence (the normalized zero-power value) or of
noise run through the same fbank pipeline, and the classifier is scored on
the needle's labels.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distill import predict_logits
from .features import FbankConfig, fbank, read_wav, silence_value
from .metrics import mean_average_precision, relative_drop
from .models.attention import CapacityExceeded
from .profiling import peak_memory

STANDARD_POSITIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
FILLER_KINDS = ("zeropad", "white", "babble")
BABBLE_STREAMS = 30
BABBLE_BAND = (100.0, 4000.0)


@dataclass(frozen=True)
class Filler:
    kind: str = "zeropad"
    snr_db: float | None = None

    def __post_init__(self):
        if self.kind not in FILLER_KINDS:
            raise ValueError(f"unknown filler {self.kind!r}; choose from {FILLER_KINDS}")
        if self.kind != "zeropad" and self.snr_db is None:
            raise ValueError(f"{self.kind} filler needs an SNR")

    @classmethod
    def parse(cls, text: str) -> "Filler":
        """``zeropad``, ``white:0`` or ``babble:10``."""
        kind, _, snr = text.strip().lower().partition(":")
        return cls(kind, float(snr) if snr else None)

    def __str__(self) -> str:
        return self.kind if self.snr_db is None else f"{self.kind}:{self.snr_db:g}"


ZERO_PAD = Filler()


@dataclass(frozen=True)
class NiahSpec:
    haystack_len: float
    needle_pos: float = 0.5
    filler: Filler = ZERO_PAD
    seed: int = 0
    needle_len: float = 10.0

    def __post_init__(self):
        if self.haystack_len < self.needle_len:
            raise ValueError(f"haystack ({self.haystack_len} s) is shorter than the needle "
                             f"({self.needle_len} s)")
        if not 0.0 <= self.needle_pos <= 1.0:
            raise ValueError("needle_pos must lie in [0, 1]")


def needle_start(haystack_frames: int, needle_frames: int, pos: float) -> int:
    """Round-to-nearest start frame; ``pos=1`` end-aligns the needle."""
    return int(math.floor(pos * (haystack_frames - needle_frames) + 0.5))


def synth_babble(duration: float, seed: int, sample_rate: int = 16000,
                 streams: int = BABBLE_STREAMS) -> np.ndarray:
    """Sum of speech-like streams, normalized to unit power.

    Each stream is band-limited noise with a random spectral tilt, gated by a
    syllabic envelope at 2-8 Hz.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(seed)
    lo, hi = BABBLE_BAND[0], min(BABBLE_BAND[1], 0.95 * sample_rate / 2)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    band = (freqs >= lo) & (freqs <= hi)
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    for _ in range(streams):
        spec = np.fft.rfft(rng.standard_normal(n))
        tilt = rng.uniform(0.5, 1.5)
        shape = np.zeros_like(freqs)
        shape[band] = (freqs[band] / lo) ** (-tilt / 2)
        src = np.fft.irfft(spec * shape, n)
        rate = rng.uniform(2.0, 8.0)
        env = (0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))) ** 2
        out += src * env / (np.sqrt(np.mean(src ** 2)) + 1e-12)
    return out / np.sqrt(np.mean(out ** 2))


def babble_from_files(paths, duration: float, sample_rate: int) -> np.ndarray:
    """Mix user-supplied mono WAVs (tiled to ``duration``), unit power."""
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    for p in paths:
        wav, rate = read_wav(p)
        if rate != sample_rate:
            raise ValueError(f"{p}: sample rate {rate} != {sample_rate}")
        if wav.size == 0:
            continue
        out += np.resize(wav, n)
    power = np.mean(out ** 2)
    if power == 0:
        raise ValueError("babble files are silent")
    return out / np.sqrt(power)


def filler_waveform(filler: Filler, num_samples: int, needle_power: float, sample_rate: int,
                    seed: int, babble_source=None) -> np.ndarray:
    """Noise scaled so that ``10 log10(needle_power / noise_power) = snr_db``."""
    if filler.kind == "white":
        noise = np.random.default_rng(seed).standard_normal(num_samples)
    elif filler.kind == "babble":
        if babble_source is not None:
            noise = np.resize(np.asarray(babble_source, dtype=np.float64), num_samples)
        else:
            noise = synth_babble(num_samples / sample_rate, seed, sample_rate)
    else:
        raise ValueError("zero padding has no waveform")
    target = needle_power / 10.0 ** (filler.snr_db / 10.0)
    return noise * np.sqrt(target / np.mean(noise ** 2))


def build_haystack(needle, spec: NiahSpec, cfg: FbankConfig, needle_power: float | None = None,
                   babble_source=None) -> np.ndarray:
    """Place the needle fbank into a haystack of ``spec.haystack_len`` seconds."""
    needle = np.asarray(needle, dtype=np.float32)
    total = cfg.frames_for_seconds(spec.haystack_len)
    if needle.ndim != 2 or needle.shape[0] > total:
        raise ValueError(f"needle of shape {needle.shape} does not fit {total} frames")
    if spec.filler.kind == "zeropad":
        hay = np.full((total, needle.shape[1]), silence_value(cfg), dtype=np.float32)
    else:
        if needle_power is None:
            raise ValueError("noise fillers need the needle waveform power")
        n = int(round(spec.haystack_len * cfg.sample_rate))
        wave = filler_waveform(spec.filler, n, needle_power, cfg.sample_rate, spec.seed, babble_source)
        hay = fbank(wave, cfg)
        if hay.shape[0] != total:
            raise AssertionError("noise fbank length mismatch")
    start = needle_start(total, needle.shape[0], spec.needle_pos)
    hay[start:start + needle.shape[0]] = needle
    return hay


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    FIELDS = ("model", "haystack_len", "needle_pos", "filler", "snr_db", "tokens", "mAP", "mAP10",
              "relative_drop", "wallclock_s", "peak_mem_bytes", "status")

    def add(self, **row) -> None:
        self.rows.append({k: row.get(k) for k in self.FIELDS})

    def select(self, **match) -> list:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def check(self, tol: float = 1e-12) -> None:
        """Stored relative drops must be recomputable from the stored mAPs."""
        for r in self.rows:
            if r["status"] != "ok":
                continue
            again = relative_drop(r["mAP10"], r["mAP"])
            if abs(again - r["relative_drop"]) > tol:
                raise AssertionError(f"relative drop mismatch in {r}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.FIELDS)
            w.writeheader()
            w.writerows(self.rows)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"rows": self.rows, "notes": self.notes}, indent=1))

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(rows=d["rows"], notes=d.get("notes", []))

    def emit_plot_data(self, outdir) -> list:
        """Per-figure CSVs: drop vs position, mAP vs length (zero pad / noise), mAP vs SNR."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        ok = [r for r in self.rows if r["status"] == "ok"]
        tables = {
            "drop_vs_position.csv": (
                [r for r in ok if r["filler"] == "zeropad"],
                ("model", "haystack_len", "needle_pos", "relative_drop")),
            "map_vs_length_zeropad.csv": (
                [r for r in ok if r["filler"] == "zeropad"],
                ("model", "needle_pos", "haystack_len", "mAP")),
            "map_vs_snr.csv": (
                [r for r in ok if r["filler"] != "zeropad"],
                ("model", "filler", "haystack_len", "snr_db", "mAP")),
            "map_vs_length_noise.csv": (
                [r for r in ok if r["filler"] != "zeropad"],
                ("model", "filler", "snr_db", "needle_pos", "haystack_len", "mAP")),
        }
        written = []
        for name, (rows, cols) in tables.items():
            with open(outdir / name, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(cols)
                for r in sorted(rows, key=lambda r: tuple(str(r[c]) for c in cols)):
                    w.writerow([r[c] for c in cols])
            written.append(outdir / name)
        return written


def _batch_size(frames: int, budget_frames: int = 20000) -> int:
    return max(1, budget_frames // max(frames, 1))


def score_haystacks(model, needles, specs, cfg, powers=None, babble_source=None) -> np.ndarray:
    """Logits for each needle placed with its own spec."""
    frames = cfg.frames_for_seconds(specs[0].haystack_len)
    bs = _batch_size(frames)
    out = []
    for i in range(0, len(needles), bs):
        batch = np.stack([
            build_haystack(needles[j], specs[j], cfg, None if powers is None else powers[j], babble_source)
            for j in range(i, min(i + bs, len(needles)))])
        out.append(predict_logits(model, batch, batch_size=bs))
    return np.concatenate(out)


def run_sweep(models: dict, needles, labels, cfg: FbankConfig, lengths, positions=STANDARD_POSITIONS,
              fillers=(ZERO_PAD,), powers=None, seed: int = 0, needle_len: float = 10.0,
              model_positions: dict | None = None, babble_source=None, measure_memory: bool = True,
              token_counter=None) -> EvalReport:
    """Evaluate every (model, length, position, filler) condition.

    ``model_positions`` overrides the position list per model (the attention
    baseline is only evaluated with the needle at the start). Conditions that
    exceed a model's capacity become ``exceeded-capacity`` rows.
    """
    needles = np.asarray(needles, dtype=np.float32)
    labels = np.asarray(labels)
    report = EvalReport()
    for name, model in models.items():
        base = mean_average_precision(predict_logits(model, needles, batch_size=_batch_size(needles.shape[1])),
                                      labels)[0]
        for length in lengths:
            frames = cfg.frames_for_seconds(length)
            tokens = token_counter(model, frames) if token_counter else None
            for pos in (model_positions or {}).get(name, positions):
                for filler in fillers:
                    specs = [NiahSpec(length, pos, filler, seed=_clip_seed(seed, j, length, filler),
                                      needle_len=needle_len) for j in range(len(needles))]
                    row = dict(model=name, haystack_len=length, needle_pos=pos, filler=filler.kind,
                               snr_db=filler.snr_db, tokens=tokens, mAP10=base)
                    t0 = time.perf_counter()
                    try:
                        scores = score_haystacks(model, needles, specs, cfg, powers, babble_source)
                        peak = None
                        if measure_memory:
                            probe = build_haystack(needles[0], specs[0], cfg,
                                                   None if powers is None else powers[0], babble_source)
                            with peak_memory() as pm:
                                predict_logits(model, probe[None])
                            peak = pm.peak
                    except CapacityExceeded as err:
                        report.add(**row, wallclock_s=time.perf_counter() - t0, status="exceeded-capacity")
                        report.notes.append(f"{name} @ {length}s: {err}")
                        continue
                    m = mean_average_precision(scores, labels)[0]
                    report.add(**row, mAP=m, relative_drop=relative_drop(base, m),
                               wallclock_s=time.perf_counter() - t0, peak_mem_bytes=peak, status="ok")
    return report


def _clip_seed(seed: int, index: int, length: float, filler: Filler) -> int:
    key = [seed, index, int(round(length * 1000)), FILLER_KINDS.index(filler.kind),
           int(round((filler.snr_db or 0) * 1000)) + 10 ** 6]
    return int(np.random.SeedSequence(key).generate_state(1)[0])
