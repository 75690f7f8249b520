"""Input-length scaling benchmark (wallclock and peak memory vs token count)."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .models.attention import AttentionClassifier, CapacityExceeded, num_patches
from .models.dass import DASS
from .profiling import peak_memory

MEMORY_CAVEAT = ("peak memory is the largest running total of torch allocator events during one "
                 "forward pass; it excludes interpreter and library overhead (not OS RSS)")


@dataclass
class BenchRecord:
    model: str
    frames: int
    seconds: float | None
    tokens: int
    wallclock_ms: float | None
    repeats: int
    peak_mem_bytes: int | None
    status: str = "ok"


def token_count(model, frames: int, mels: int) -> int:
    """Tokens entering the first sequence layer for a ``(frames, mels)`` input."""
    module = getattr(model, "model_", model)
    if isinstance(module, AttentionClassifier):
        nt, nf = num_patches(frames, mels, module.config)
        return nt * nf + (1 if module.cls_token is not None else 0)
    if isinstance(module, DASS):
        p = module.config.patch_size
        return math.ceil(frames / p) * math.ceil(mels / p)
    raise TypeError(f"no token rule for {type(module).__name__}")


def frames_for_tokens(model, tokens: int, mels: int) -> int:
    """Smallest frame count whose token count reaches ``tokens``."""
    lo, hi = 1, 1
    while token_count(model, hi, mels) < tokens:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if token_count(model, mid, mels) < tokens:
            lo = mid + 1
        else:
            hi = mid
    return lo


def fit_loglog_slope(lengths, times) -> float:
    """Least-squares slope of ``log(time)`` against ``log(length)``; NaN below 3 points."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    if x.size != y.size:
        raise ValueError("lengths and times differ in size")
    if x.size < 3:
        return float("nan")
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def _time_forward(module, x, repeats: int) -> float:
    with torch.no_grad():
        module(x)                               # warm-up, not recorded
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            module(x)
            runs.append(time.perf_counter() - t0)
    return float(np.median(runs)) * 1e3


def scaling_bench(models: dict, tokens, mels: int = 16, repeats: int = 3, frame_rate: float | None = None,
                  measure_memory: bool = True, seed: int = 0) -> tuple[list, dict]:
    """Time one forward per (model, token length).

    Returns the records and a ``{model: slope}`` map fitted over successful
    lengths (NaN when fewer than 3 succeeded). Timing is pinned to one thread.
    """
    if repeats < 3:
        raise ValueError("need at least 3 timed repeats")
    records = []
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for name, model in models.items():
            module = getattr(model, "model_", model).eval()
            dtype = next(module.parameters()).dtype
            gen = torch.Generator().manual_seed(seed)
            for n_tok in tokens:
                frames = frames_for_tokens(module, int(n_tok), mels)
                x = torch.randn(1, frames, mels, generator=gen, dtype=dtype)
                rec = BenchRecord(name, frames, frames / frame_rate if frame_rate else None,
                                  token_count(module, frames, mels), None, repeats, None)
                try:
                    rec.wallclock_ms = _time_forward(module, x, repeats)
                    if measure_memory:
                        with torch.no_grad(), peak_memory() as pm:
                            module(x)
                        rec.peak_mem_bytes = pm.peak
                except CapacityExceeded:
                    rec.status = "exceeded-capacity"
                records.append(rec)
    finally:
        torch.set_num_threads(threads)
    return records, fit_slopes(records)


def fit_slopes(records) -> dict:
    slopes = {}
    for name in dict.fromkeys(r.model for r in records):
        ok = [r for r in records if r.model == name and r.status == "ok"]
        slopes[name] = fit_loglog_slope([r.tokens for r in ok], [r.wallclock_ms for r in ok])
    return slopes


def write_bench(outdir, records, slopes) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    fields = list(BenchRecord.__dataclass_fields__)
    with open(outdir / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(asdict(r) for r in records)
    summary = {"slopes": {k: (None if math.isnan(v) else v) for k, v in slopes.items()},
               "memory_caveat": MEMORY_CAVEAT,
               "records": [asdict(r) for r in records]}
    (outdir / "bench.json").write_text(json.dumps(summary, indent=1))
