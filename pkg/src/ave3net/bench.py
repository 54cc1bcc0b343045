"""Real-time-factor benchmark: stream a synthetic AV clip through a session, many times."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .model import _Timer, build_model
from .sim import SynthRoiSpec, synth_roi, synth_speech
from .streaming import Session, roi_schedule

STAGES = ("video_trunk", "video_lstm", "fusion", "audio_stack", "other")


@dataclass
class BenchReport:
    config: str
    runs: int
    duration_s: float
    threads: int
    chunk: int
    wall_times: list = field(default_factory=list)
    stage_seconds: dict = field(default_factory=dict)  # mean per run

    @property
    def rtf(self):
        return float(np.mean(self.wall_times)) / self.duration_s

    @property
    def p50(self):
        return float(np.percentile(self.wall_times, 50)) / self.duration_s

    @property
    def p95(self):
        return float(np.percentile(self.wall_times, 95)) / self.duration_s

    def stage_rtf(self):
        return {k: v / self.duration_s for k, v in self.stage_seconds.items()}

    def to_dict(self):
        return {"config": self.config, "runs": self.runs, "duration_s": self.duration_s,
                "threads": self.threads, "chunk": self.chunk, "rtf": self.rtf,
                "rtf_p50": self.p50, "rtf_p95": self.p95, "wall_times": self.wall_times,
                "stage_rtf": self.stage_rtf()}


def bench_input(cfg, duration, seed=0):
    audio = synth_speech(duration, seed) + 0.05 * np.random.default_rng(seed).standard_normal(
        int(round(duration * cfg.sample_rate))).astype(np.float32)
    rois = None
    if cfg.uses_video:
        rois = roi_schedule(synth_roi(SynthRoiSpec(seed=seed, size=cfg.roi_size), audio),
                            cfg.sample_rate, cfg.fps)
    return audio.astype(np.float32), rois


def _one_run(model, audio, rois, chunk, prof):
    session = Session(model, profile=prof)
    k = 0
    start = time.perf_counter()
    for pos in range(0, len(audio), chunk):
        end = pos + chunk
        due = []
        if rois:
            while k < len(rois) and rois[k][0] < end:
                due.append(rois[k])
                k += 1
        session.push(audio[pos:end], due)
    session.flush()
    return time.perf_counter() - start


def _exclusive(totals, wall):
    out = {s: 0.0 for s in STAGES}
    for key in ("video_trunk", "video_lstm", "fusion"):
        out[key] = totals.get(key, 0.0)
    out["audio_stack"] = max(0.0, totals.get("audio_stack", 0.0) - out["video_lstm"] - out["fusion"])
    out["other"] = max(0.0, wall - out["audio_stack"] - out["video_lstm"] - out["fusion"]
                       - out["video_trunk"])
    return out


def run_bench(cfg, name="custom", model=None, runs=100, warmup=3, duration=3.0, chunk=None,
              threads=1, seed=0):
    """Mean RTF over ``runs`` timed runs after ``warmup`` untimed ones.

    Each run streams the same ``duration`` seconds of audio (and ROI frames) through
    a fresh session in chunks of ``chunk`` samples (default: the whole clip in one
    push). File I/O and model construction are outside the timed region. With
    ``threads`` > 1, that many sessions run concurrently (BLAS pinned to one thread
    each) and wall time is per session.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    model = model if model is not None else build_model(cfg, seed)
    audio, rois = bench_input(cfg, duration, seed)
    chunk = len(audio) if chunk is None else int(chunk)
    report = BenchReport(name, runs, duration, threads, chunk)
    stage_sum = {s: 0.0 for s in STAGES}
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            _one_run(model, audio, rois, chunk, None)
        if threads <= 1:
            for _ in range(runs):
                prof = _Timer()
                wall = _one_run(model, audio, rois, chunk, prof)
                report.wall_times.append(wall)
                for k, v in _exclusive(prof.totals, wall).items():
                    stage_sum[k] += v
        else:
            def job(_):
                prof = _Timer()
                wall = _one_run(model, audio, rois, chunk, prof)
                return wall, _exclusive(prof.totals, wall)

            with ThreadPoolExecutor(max_workers=threads) as pool:
                for wall, stages in pool.map(job, range(runs)):
                    report.wall_times.append(wall)
                    for k, v in stages.items():
                        stage_sum[k] += v
    report.stage_seconds = {k: v / runs for k, v in stage_sum.items()}
    return report
