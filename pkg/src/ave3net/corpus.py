"""Desk-scale corpus generation: scenes to WAV/ROI files plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .formats import SimulateConfig, roi_write, wav_read, wav_write
from .sim import RoomSpec, SceneSpec, SynthRoiSpec, mix_scene, synth_noise, synth_roi, synth_speech

PEAK = 0.5


def _sources(sim_cfg):
    if not sim_cfg.sources_dir:
        return []
    return sorted(Path(sim_cfg.sources_dir).glob("*.wav"))


def _load_or_synth(paths, rng, duration, seed, fs=16000):
    n = int(round(duration * fs))
    if paths:
        x, _ = wav_read(paths[int(rng.integers(len(paths)))])
        x = np.resize(x, n) if len(x) else np.zeros(n, np.float32)
        return x.astype(np.float32)
    return synth_speech(duration, seed)


def scene_spec(sim_cfg, seed, index):
    """The SceneSpec for scene ``index`` of a corpus; every draw comes from rng([seed, index])."""
    rng = np.random.default_rng([seed, index])
    target_only = index < round(sim_cfg.target_only_fraction * sim_cfg.num_scenes)
    scenario = "TS2" if sim_cfg.scenario == "TS2" or target_only else "TS1"
    sub = int(rng.integers(2 ** 31))
    sources = _sources(sim_cfg)
    target = _load_or_synth(sources, rng, sim_cfg.duration_s, sub)
    interferer = None
    sir = None
    if scenario == "TS1":
        interferer = _load_or_synth(sources, rng, sim_cfg.duration_s, sub + 1)
        sir = float(rng.uniform(*sim_cfg.sir_db))
    noise = synth_noise(sim_cfg.duration_s, sub + 2, color=str(rng.choice(["white", "pink"])))
    dims = tuple(float(rng.uniform(lo, hi)) for lo, hi in sim_cfg.room_dims)
    room = RoomSpec(dims=dims, absorption=float(rng.uniform(*sim_cfg.absorption)),
                    max_order=sim_cfg.max_order)
    return SceneSpec(scenario=scenario, target=target, noise=noise,
                     snr_db=float(rng.uniform(*sim_cfg.snr_db)), interferer=interferer,
                     sir_db=sir, seed=sub, room=room)


def generate_corpus(sim_cfg, out_dir, seed=0):
    """Write mixture/reference/ROI triples and ``manifest.json``; returns the manifest dict.

    Scene i is TS2 (target plus noise) when i < round(target_only_fraction * N)
    or when the corpus scenario is TS2. Mixture and reference share one gain
    that puts the mixture peak at 0.5, so SNR and SDR are unaffected.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(sim_cfg.num_scenes):
        spec = scene_spec(sim_cfg, seed, i)
        mix = mix_scene(spec)
        gain = PEAK / max(float(np.max(np.abs(mix.mixture))), 1e-9)
        roi = synth_roi(SynthRoiSpec(mode=sim_cfg.roi_mode, detection_rate=sim_cfg.detection_rate,
                                     seed=spec.seed), spec.target)
        stem = f"scene_{i:04d}"
        wav_write(out / f"{stem}_mix.wav", mix.mixture * gain)
        wav_write(out / f"{stem}_ref.wav", mix.target * gain)
        roi_write(out / f"{stem}.roi", roi)
        rec = {"id": stem, "scenario": spec.scenario, "seed": spec.seed,
               "snr_db": spec.snr_db, "sir_db": spec.sir_db,
               "mixture": f"{stem}_mix.wav", "reference": f"{stem}_ref.wav", "roi": f"{stem}.roi",
               "room": mix.metadata["room"], "absorption": spec.room.absorption}
        if spec.scenario == "TS1":
            wav_write(out / f"{stem}_interferer.wav", mix.interferer * gain)
            rec["interferer"] = f"{stem}_interferer.wav"
        records.append(rec)
    manifest = {"seed": seed, "num_scenes": len(records), "scenes": records}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def demo_scene(seed=0, snr_db=0.0, duration=1.0):
    """One TS2 scene (mixture, reference, ROI frames) as written by the corpus generator."""
    sim_cfg = SimulateConfig(snr_db=[snr_db, snr_db], num_scenes=1, scenario="TS2",
                             duration_s=duration)
    spec = scene_spec(sim_cfg, seed, 0)
    mix = mix_scene(spec)
    gain = PEAK / max(float(np.max(np.abs(mix.mixture))), 1e-9)
    roi = synth_roi(SynthRoiSpec(mode=sim_cfg.roi_mode, seed=spec.seed), spec.target)
    return mix.mixture * gain, mix.target * gain, roi
