"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The toy experiments share one synthetic dataset (2000 train / 500 eval clips,
8 classes, 10 s clips) and a cache of trained tiny models. Haystack criteria
score the first 250 eval clips.
"""
import math
import statistics
import time

import numpy as np
import pytest
import scipy.linalg
import torch

from dass.bench import fit_loglog_slope, frames_for_tokens, scaling_bench, token_count
from dass.distill import bce_multilabel, kl_distill, total_loss
from dass.experiments import build_model, distillation_effect, fit_toy, haystack_map, score, toy_splits
from dass.metrics import average_precision
from dass.models.dass import DASS, ModelConfig, PatchEmbed, PatchMerge, Pooling, SSMBlock, count_parameters, pool, preset
from dass.niah import Filler, filler_waveform
from dass.ss2d import SS2D
from dass.ssm import (
    ScanElement,
    SsmParams,
    associative_scan,
    conv_apply,
    conv_kernel,
    lti_scan,
    recurrent_scan,
    selective_scan,
    sequential_fold,
    zoh_discretize,
)
from dass.ssm.torch_scan import selective_scan as torch_selective_scan

from conftest import directional_error, verdict

SEEDS = (0, 1, 2)
LONG = 50.0                 # 5x the 10 s training length
POSITIONS = (0.0, 0.5, 1.0)
HAYSTACK_CLIPS = 250


def random_params(rng, n):
    return SsmParams(a_log=rng.uniform(-2, 1.5, n), b=rng.normal(size=n), c=rng.normal(size=n), delta_bias=0.0)


# --- shared toy data and models ----------------------------------------------

@pytest.fixture(scope="module")
def splits():
    return toy_splits(2000, 500, seed=0)


class ModelCache:
    """Trains each (kind, pooling, seed) once and remembers the time it took."""

    def __init__(self, train_set, eval_set):
        self.train_set = train_set
        self.eval_set = eval_set
        self.hay = eval_set.subset(HAYSTACK_CLIPS)
        self.models = {}
        self.seconds = {}
        self.bases = {}
        self.maps = {}

    def get(self, kind, pooling, seed):
        key = (kind, pooling, seed)
        if key not in self.models:
            t0 = time.perf_counter()
            self.models[key] = fit_toy(kind, self.train_set, seed, pooling=pooling)
            self.seconds[key] = time.perf_counter() - t0
        return self.models[key]

    def base(self, kind, pooling, seed):
        key = (kind, pooling, seed)
        if key not in self.bases:
            self.bases[key] = score(self.get(*key), self.hay)
        return self.bases[key]

    def haystack(self, kind, pooling, seed, length, pos, filler=Filler()):
        key = (kind, pooling, seed, length, pos, str(filler))
        if key not in self.maps:
            self.maps[key] = haystack_map(self.get(kind, pooling, seed), self.hay, length, pos, filler, seed=seed)
        return self.maps[key]

    def drop(self, kind, pooling, seed, length, pos):
        base = self.base(kind, pooling, seed)
        return (base - self.haystack(kind, pooling, seed, length, pos)) / base


@pytest.fixture(scope="module")
def cache(splits):
    return ModelCache(*splits)


# --- kernels ------------------------------------------------------------------

def test_kernel_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    conv_err = sel_err = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        L = int(rng.integers(1, 65))
        p = random_params(rng, n)
        delta = float(rng.uniform(0.01, 1.0))
        d = zoh_discretize(p, delta)
        x = rng.normal(size=L)
        rec = recurrent_scan(d, p.c, x)
        conv_err = max(conv_err, float(np.max(np.abs(conv_apply(conv_kernel(d, p.c, L), x) - rec))))
        y_sel = selective_scan(x[:, None], p.a_log[None], np.full((L, 1), delta), np.tile(p.b, (L, 1)),
                               np.tile(p.c, (L, 1)))[:, 0]
        sel_err = max(sel_err, float(np.max(np.abs(y_sel - lti_scan(p, delta, x)))))
    secs = time.perf_counter() - t0
    ok = conv_err < 1e-10 and sel_err < 1e-12 and secs < 10
    verdict("kernel equivalence", ok,
            f"conv vs recurrent {conv_err:.1e} (<1e-10), selective vs LTI {sel_err:.1e} (<1e-12), {secs:.1f} s")
    assert ok


def test_parallel_scan():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for L in range(1, 258):
        a = rng.uniform(0.5, 1.0, L)
        b = rng.normal(size=L)
        seq = sequential_fold([ScanElement(float(u), float(v)) for u, v in zip(a, b)])
        pa, pb = associative_scan(a, b)
        worst = max(worst, float(np.max(np.abs(pa - [e.a for e in seq]))),
                    float(np.max(np.abs(pb - [e.b for e in seq]))))
    secs = time.perf_counter() - t0
    ok = worst < 1e-12 and secs < 5
    verdict("parallel scan", ok, f"max deviation {worst:.1e} over L=1..257 (<1e-12), {secs:.2f} s")
    assert ok


def test_zoh_oracle():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        p = random_params(rng, n)
        delta = float(np.exp(rng.uniform(np.log(1e-3), np.log(2.0))))
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = np.diag(p.A)
        M[:n, n] = p.b
        E = scipy.linalg.expm(M * delta)
        d = zoh_discretize(p, delta)
        worst = max(worst, float(np.max(np.abs(np.diag(E[:n, :n]) - d.a_bar))),
                    float(np.max(np.abs(E[:n, n] - d.b_bar))))
    ok = worst < 1e-8
    verdict("ZOH oracle", ok, f"max deviation from dense expm {worst:.1e} over 100 systems (<1e-8)")
    assert ok


def _widen(model, std=0.3):
    # default init gives scan parameters tiny gradients that round-off swamps
    for mod in model.modules():
        if isinstance(mod, (torch.nn.Linear, torch.nn.Conv2d)):
            torch.nn.init.normal_(mod.weight, std=std)


def test_gradient_suite():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    f64 = dict(dtype=torch.float64)
    errors = {}

    g = torch.Generator().manual_seed(1)
    scan_in = [torch.randn(1, 2, 6, 3, generator=g, **f64), torch.rand(1, 2, 6, 3, generator=g, **f64) + 0.05,
               torch.randn(2, 3, 2, generator=g, **f64) * 0.5, torch.randn(1, 2, 6, 2, generator=g, **f64),
               torch.randn(1, 2, 6, 2, generator=g, **f64), torch.randn(1, 2, 3, 2, generator=g, **f64)]
    scan_in = [t.requires_grad_() for t in scan_in]
    w = torch.randn(1, 2, 6, 3, generator=g, **f64)
    errors["selective scan"] = directional_error(lambda: (torch_selective_scan(*scan_in) * w).sum(), scan_in)

    ss = SS2D(3, state_size=2).double()
    x = torch.randn(1, 3, 2, 3, **f64, requires_grad=True)
    w = torch.randn(1, 3, 2, 3, **f64)
    errors["ss2d"] = directional_error(lambda: (ss(x) * w).sum(), [x, *ss.parameters()])

    pe, pm = PatchEmbed(2, 3).double(), PatchMerge(3).double()
    x = torch.randn(1, 6, 5, **f64, requires_grad=True)
    w = torch.randn(1, 2, 2, 6, **f64)
    errors["patch embed + merge"] = directional_error(lambda: (pm(pe(x)) * w).sum(),
                                                      [x, *pe.parameters(), *pm.parameters()])

    blk = SSMBlock(4, state_size=2, ffn_ratio=2.0).double()
    x = torch.randn(1, 3, 2, 4, **f64, requires_grad=True)
    w = torch.randn(1, 3, 2, 4, **f64)
    errors["ssm block"] = directional_error(lambda: (blk(x) * w).sum(), [x, *blk.parameters()])

    f = torch.randn(2, 3, 4, 5, **f64, requires_grad=True)
    w = torch.randn(2, 5, **f64)
    errors["pooling"] = max(directional_error(lambda: (pool(f, m.value) * w).sum(), [f]) for m in Pooling)

    z = torch.randn(4, 5, **f64, requires_grad=True)
    y = (torch.rand(4, 5, **f64) > 0.5).double()
    p = torch.rand(4, 5, **f64)
    errors["losses"] = max(directional_error(lambda: bce_multilabel(z, y), [z]),
                           directional_error(lambda: kl_distill(p, z), [z]),
                           directional_error(lambda: total_loss(y, z, p), [z]))

    cfg = ModelConfig(group_depths=(1, 1, 1, 1), channel_dims=(8, 16, 32, 64), state_size=4, num_classes=3,
                      drop_path=0.0)
    torch.manual_seed(4)
    m = DASS(cfg).double()
    _widen(m)
    x = torch.randn(2, 24, 16, **f64, requires_grad=True)
    y = (torch.rand(2, 3, **f64) > 0.5).double()
    errors["end-to-end (1,1,1,1)"] = directional_error(lambda: bce_multilabel(m(x), y), [x, *m.parameters()])

    secs = time.perf_counter() - t0
    worst = max(errors.values())
    ok = worst < 1e-4 and secs < 120
    verdict("gradient suite", ok, f"worst relative error {worst:.1e} (<1e-4) across {len(errors)} groups, {secs:.1f} s")
    assert ok, errors


def test_parameter_count_fidelity():
    small = count_parameters(DASS(preset("small")))
    medium = count_parameters(DASS(preset("medium")))
    ok = abs(small / 30e6 - 1) <= 0.10 and abs(medium / 49e6 - 1) <= 0.10
    verdict("parameter counts", ok, f"small {small / 1e6:.2f}M (30M +-10%), medium {medium / 1e6:.2f}M (49M +-10%)")
    assert ok


# --- toy experiments --------------------------------------------------------------

def test_toy_distillation_effect(splits):
    t0 = time.perf_counter()
    results = distillation_effect(*splits)
    secs = time.perf_counter() - t0
    wins = sum(r.improved for r in results)
    detail = ", ".join(f"s{r.seed} {r.plain_map:.3f}->{r.distilled_map:.3f}" for r in results)
    ok = wins >= 4 and secs < 30 * 60
    verdict("toy distillation effect", ok,
            f"{wins}/5 seeds improved (need >=4); teacher {results[0].teacher_map:.3f}; {detail}; {secs / 60:.1f} min")
    assert ok


def test_niah_duration_robustness(cache):
    # the attention baseline is evaluated with the needle at the start of the haystack
    t0 = time.perf_counter()
    ssm = [cache.drop("dass", "mean", s, LONG, 0.0) for s in SEEDS]
    attn = [cache.drop("attention", None, s, LONG, 0.0) for s in SEEDS]
    secs = time.perf_counter() - t0
    ms, ma = statistics.median(ssm), statistics.median(attn)
    ok = ms < ma and secs < 15 * 60
    verdict("NIAH duration robustness", ok,
            f"median drop at 50 s: DASS mean {ms:.3f} < attention {ma:.3f} "
            f"(per seed {np.round(ssm, 3).tolist()} vs {np.round(attn, 3).tolist()}), {secs / 60:.1f} min")
    assert ok


def test_pooling_sensitivity_ordering(cache):
    med = {}
    for mode in ("first", "mid", "last", "mean"):
        med[mode] = {p: statistics.median(cache.drop("dass", mode, s, LONG, p) for s in SEEDS) for p in POSITIONS}
    first_min = min(POSITIONS, key=lambda p: med["first"][p])
    last_min = min(POSITIONS, key=lambda p: med["last"][p])
    worst = {m: max(d.values()) for m, d in med.items()}
    ok = first_min == 0.0 and last_min == 1.0 and min(worst, key=worst.get) == "mean"
    table = "; ".join(f"{m} " + "/".join(f"{med[m][p]:.3f}" for p in POSITIONS) for m in med)
    verdict("pooling sensitivity ordering", ok,
            f"first min at {first_min}, last min at {last_min}, smallest worst-case {min(worst, key=worst.get)} "
            f"(median drops at pos 0/0.5/1: {table})")
    assert ok


def test_noise_vs_zero_haystacks(cache):
    noise = [cache.haystack("dass", "mean", s, LONG, 0.5, Filler("white", 0.0)) for s in SEEDS]
    zero = [cache.haystack("dass", "mean", s, LONG, 0.5) for s in SEEDS]
    mn, mz = statistics.median(noise), statistics.median(zero)
    ok = mn <= mz
    verdict("noise vs zero haystacks", ok, f"median mAP at 50 s: white 0 dB {mn:.3f} <= zero pad {mz:.3f}")
    assert ok


# --- harness and metric ------------------------------------------------------------

def test_snr_calibration():
    rng = np.random.default_rng(3)
    worst = 0.0
    for kind in ("white", "babble"):
        for snr in (0, 5, 10, 15, 20):
            for trial in range(3):
                power = float(rng.uniform(1e-3, 1.0))
                noise = filler_waveform(Filler(kind, float(snr)), 8000 * 30, power, 8000, seed=trial)
                worst = max(worst, abs(10 * math.log10(power / np.mean(noise ** 2)) - snr))
    ok = worst < 0.1
    verdict("SNR calibration", ok, f"max |measured - target| {worst:.1e} dB over white/babble x 0..20 dB (<0.1)")
    assert ok


def _brute_ap(scores, labels):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for k, i in enumerate(ranked, 1):
        if labels[i]:
            hits += 1
            total += hits / k
    return total / sum(labels)


def test_map_metric():
    rng = np.random.default_rng(50)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        scores = rng.normal(size=n)
        worst = max(worst, abs(average_precision(scores, labels) - _brute_ap(scores.tolist(), labels.tolist())))
    perfect = average_precision([0.9, 0.7, 0.3, 0.1], [1, 1, 0, 0])
    ok = worst < 1e-12 and perfect == 1.0
    verdict("mAP metric", ok, f"max deviation from brute force {worst:.1e} on 50 instances, perfect ranking {perfect}")
    assert ok


def test_scaling_bench():
    L = np.array([256, 512, 1024, 2048, 4096, 8192], dtype=float)
    fit_err = max(abs(fit_loglog_slope(L, 0.3 * L) - 1.0), abs(fit_loglog_slope(L, 0.3 * L ** 2) - 2.0))
    torch.manual_seed(0)
    models = {"dass": DASS(preset("tiny")), "attention": build_model("attention")}
    records, slopes = scaling_bench(models, [256, 512, 1024, 2048, 4096, 8192], repeats=3, measure_memory=False)
    failed = [(r.model, r.tokens) for r in records if r.status != "ok"]
    ok = fit_err < 1e-6 and slopes["dass"] < slopes["attention"]
    verdict("scaling bench", ok,
            f"fitter error {fit_err:.1e} (<1e-6); measured slope DASS {slopes['dass']:.2f} < attention "
            f"{slopes['attention']:.2f} over 256-8192 tokens; capacity failures {failed or 'none'}")
    assert ok


def test_capacity_stress():
    model = DASS(preset("tiny")).eval()
    train_tokens = token_count(model, 199, 16)
    target = 900 * train_tokens            # 2.5 hours of 10 s clips
    frames = frames_for_tokens(model, target, 16)
    t0 = time.perf_counter()
    with torch.no_grad():
        out = model(torch.randn(1, frames, 16))
    secs = time.perf_counter() - t0
    tokens = token_count(model, frames, 16)
    ok = tokens >= 100 * train_tokens and out.shape == (1, 8) and bool(torch.all(torch.isfinite(out)))
    verdict("capacity stress", ok,
            f"{tokens} tokens ({tokens / train_tokens:.0f}x training length, {frames} frames) forward ok in {secs:.1f} s")
    assert ok
