import math

import numpy as np
import pytest

from ave3net.errors import PositionOutOfRoom, SilentSource
from ave3net.losses import SDR_CAP_DB, sdr
from ave3net.sim import (MIN_APERTURE, RoomSpec, SceneSpec, SynthRoiSpec, _mouth, direct_delay,
                         image_method_rir, image_sources, mix_scene, synth_noise, synth_roi, synth_speech)

ANECHOIC = RoomSpec(dims=(6.0, 5.0, 3.0), absorption=1.0, max_order=0)


def power_db(x):
    return 10 * np.log10(np.mean(np.asarray(x, np.float64) ** 2))


def test_direct_path_peak_at_160():
    room = RoomSpec(dims=(6.0, 5.0, 3.0), absorption=0.3, max_order=0)
    h = image_method_rir(room, (1.0, 2.0, 1.5), (4.4, 2.0, 1.5))
    assert int(np.argmax(h)) == 160
    assert np.count_nonzero(h) == 1
    assert math.isclose(h[160], 1 / (4 * math.pi * 3.4))


def test_full_absorption_is_direct_only():
    room = RoomSpec(dims=(6.0, 5.0, 3.0), absorption=1.0, max_order=3)
    direct = RoomSpec(dims=(6.0, 5.0, 3.0), absorption=1.0, max_order=0)
    src, mic = (1.2, 2.1, 1.3), (4.0, 3.3, 1.1)
    a = image_method_rir(room, src, mic)
    b = image_method_rir(direct, src, mic)
    np.testing.assert_array_equal(a[:len(b)], b)
    assert not np.any(a[len(b):])


def _brute_force_images(dims, src, beta, order):
    """Mirror the source across the six wall planes recursively, merging coincident images."""
    planes = [(0, 0.0), (0, dims[0]), (1, 0.0), (1, dims[1]), (2, 0.0), (2, dims[2])]
    found = {}
    frontier = [(tuple(src), 1.0, 0, None)]
    while frontier:
        pos, gain, k, last = frontier.pop()
        key = tuple(round(v, 9) for v in pos)
        if key in found:
            assert math.isclose(found[key][0], gain, rel_tol=1e-12)
        else:
            found[key] = (gain, k)
        if k == order:
            continue
        for w, (axis, at) in enumerate(planes):
            if w == last:
                continue
            p = list(pos)
            p[axis] = 2 * at - p[axis]
            frontier.append((tuple(p), gain * beta[w], k + 1, w))
    return found


def test_image_sources_match_brute_force():
    absorption = (0.1, 0.3, 0.5, 0.2, 0.4, 0.6)
    room = RoomSpec(dims=(2.0, 2.0, 2.0), absorption=absorption, max_order=2)
    src, mic = (0.5, 0.7, 1.2), (1.4, 1.1, 0.6)
    pos, gain, order, dist = image_sources(room, src, mic)
    oracle = _brute_force_images(room.dims, src, room.reflection, 2)
    assert len(pos) == len(oracle)
    for p, g, k in zip(pos, gain, order):
        og, ok = oracle[tuple(round(v, 9) for v in p)]
        assert abs(g - og) <= 1e-6 and k == ok
    h = image_method_rir(room, src, mic)
    want = np.zeros(len(h))
    for p, (g, _) in oracle.items():
        d = np.linalg.norm(np.asarray(p) - mic)
        t = d / room.c * room.fs
        i = int(math.floor(t))
        want[i] += g / (4 * math.pi * d) * (1 - (t - i))
        want[i + 1] += g / (4 * math.pi * d) * (t - i)
    assert np.max(np.abs(h - want)) <= 1e-6


def test_reflection_energy_decays_with_order():
    room = RoomSpec(dims=(2.0, 2.0, 2.0), absorption=0.4, max_order=2)
    _, gain, order, _ = image_sources(room, (0.5, 0.7, 1.2), (1.4, 1.1, 0.6))
    for k in range(3):
        np.testing.assert_allclose(gain[order == k], room.reflection[0] ** k)


def test_positions_checked():
    with pytest.raises(PositionOutOfRoom):
        image_method_rir(ANECHOIC, (7.0, 1.0, 1.0), (1.0, 1.0, 1.0))


@pytest.mark.parametrize("seed", range(5))
def test_direct_delay_first_sample(seed):
    r = np.random.default_rng(seed)
    room = RoomSpec(dims=(5.0, 4.0, 3.0), absorption=0.3, max_order=2)
    src = tuple(r.uniform(0.3, 2.5, 3))
    mic = tuple(r.uniform(0.3, 2.5, 3))
    h = image_method_rir(room, src, mic)
    first = int(np.nonzero(h)[0][0])
    assert abs(first - round(direct_delay(room, src, mic))) <= 1


def _scene(scenario="TS2", snr=6.0, sir=None, room=ANECHOIC, seed=0):
    target = synth_speech(1.0, seed)
    interferer = synth_speech(1.0, seed + 100) if scenario == "TS1" else None
    return SceneSpec(scenario=scenario, target=target, noise=synth_noise(1.0, seed + 7), snr_db=snr,
                     interferer=interferer, sir_db=sir, seed=seed, room=room)


def test_anechoic_snr_gives_sdr():
    mix = mix_scene(_scene(snr=6.0))
    assert abs(sdr(mix.mixture, mix.target) - 6.0) <= 0.1


def test_reverberant_snr_sir_measured():
    room = RoomSpec(dims=(5.0, 4.0, 3.0), absorption=0.3, max_order=3)
    mix = mix_scene(_scene("TS1", snr=3.0, sir=-2.0, room=room, seed=4))
    assert abs(power_db(mix.target) - power_db(mix.noise) - 3.0) <= 0.5
    assert abs(power_db(mix.target) - power_db(mix.interferer) + 2.0) <= 0.5


def test_infinite_snr_is_target():
    mix = mix_scene(_scene(snr=np.inf))
    assert np.array_equal(mix.mixture, mix.target)
    assert sdr(mix.mixture, mix.target) == SDR_CAP_DB


def test_ts1_equal_power_at_zero_sir():
    mix = mix_scene(_scene("TS1", snr=10.0, sir=0.0, seed=2))
    assert abs(power_db(mix.target) - power_db(mix.interferer)) <= 0.1


def test_ts2_has_no_interferer():
    mix = mix_scene(_scene(snr=0.0))
    assert mix.interferer is None
    np.testing.assert_allclose(mix.mixture, mix.target + mix.noise, atol=1e-6)
    with pytest.raises(ValueError):
        SceneSpec(scenario="TS2", target=np.ones(10), noise=np.ones(10), snr_db=0.0, interferer=np.ones(10))


def test_silent_source():
    spec = _scene()
    spec.target = np.zeros(16000, np.float32)
    with pytest.raises(SilentSource):
        mix_scene(spec)


def test_mix_reproducible():
    room = RoomSpec(dims=(5.0, 4.0, 3.0), absorption=0.3, max_order=2)
    a = mix_scene(_scene("TS1", snr=5.0, sir=1.0, room=room, seed=3))
    b = mix_scene(_scene("TS1", snr=5.0, sir=1.0, room=room, seed=3))
    assert np.array_equal(a.mixture, b.mixture) and a.metadata == b.metadata


def test_blank_roi_mode():
    frames = synth_roi(SynthRoiSpec(mode="blank"), np.ones(16000))
    assert len(frames) == 25 and all(f.is_blank for f in frames)


def test_silent_target_closed_mouth():
    frames = synth_roi(SynthRoiSpec(), np.zeros(16000))
    closed = _mouth(50, MIN_APERTURE)
    assert all(np.array_equal(f.pixels, closed) for f in frames)


def test_envelope_drives_aperture():
    t = np.arange(16000) / 16000
    loud_then_quiet = np.sin(2 * np.pi * 200 * t) * np.where(t < 0.5, 0.2, 0.01)
    frames = synth_roi(SynthRoiSpec(), loud_then_quiet)
    dark = [int(np.sum(f.pixels < 0.3)) for f in frames]
    assert min(dark[:12]) > max(dark[13:])


@pytest.mark.parametrize("seconds", [1, 2, 3])
def test_detection_rate_blank_count(seconds):
    target = synth_speech(seconds, 1)
    spec = SynthRoiSpec(detection_rate=0.5, seed=11)
    frames = synth_roi(spec, target)
    for s in range(seconds):
        assert sum(f.is_blank for f in frames[25 * s:25 * s + 25]) == 12
    again = synth_roi(spec, target)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(frames, again))
