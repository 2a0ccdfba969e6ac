"""Tests for synthetic traces, attack injection and fleet generation."""

from __future__ import annotations

import math

import numpy as np
import pytest

from config import FEATURE_COUNT, AttackKind, FleetConfig
from datagen import (
    DOS_MESSAGE_ID,
    SHIFT_CHANNELS,
    SIGNATURE_CHANNELS,
    OemProfile,
    attacked_windows,
    default_profiles,
    export_trace,
    gen_fleet,
    gen_fleet_from_config,
    gen_trace,
    gen_vehicle,
    inject_attack,
)
from errors import InvalidArgumentError
from learn import FEATURE_NAMES, extract_features
from utils import read_csv, substream

PAYLOAD_ENTROPY = FEATURE_NAMES.index('payload_entropy')


@pytest.fixture
def profile() -> OemProfile:
    return default_profiles(3)[1]


@pytest.mark.unit
def test_default_profiles_are_numbered_from_one() -> None:
    profiles = default_profiles(4)
    assert [p.oem_id for p in profiles] == [1, 2, 3, 4]
    assert profiles[0].feature_shift[SIGNATURE_CHANNELS[0]] > 0


@pytest.mark.unit
def test_shift_scale_zero_removes_every_offset() -> None:
    for p in default_profiles(3, shift_scale=0.0):
        assert not p.feature_shift.any()


@pytest.mark.unit
def test_profile_validation() -> None:
    with pytest.raises(InvalidArgumentError):
        OemProfile(1, feature_shift=np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        OemProfile(1, component_count=0)
    with pytest.raises(InvalidArgumentError):
        OemProfile(1, traffic_rate_hz=0.0)


@pytest.mark.unit
def test_benign_trace_shape(profile) -> None:
    trace = gen_trace(profile, 128, substream(0, 'trace'))
    assert len(trace) == 128
    assert np.all(np.diff(trace['timestamp_us'].astype(np.int64)) >= 0)
    assert not trace['attack_tag'].any()
    assert set(trace['component_id']) <= set(range(profile.component_count))
    assert np.array_equal(trace['payload'][:, 7], trace['component_id'])


@pytest.mark.unit
def test_trace_needs_records(profile) -> None:
    with pytest.raises(InvalidArgumentError):
        gen_trace(profile, 0, substream(0))


@pytest.mark.unit
@pytest.mark.parametrize('kind', ['dos', 'fuzzing', 'spoofing'])
@pytest.mark.parametrize('intensity', [0.01, 0.3, 1.0])
def test_inserting_attacks_adds_tagged_records(profile, kind, intensity) -> None:
    trace = gen_trace(profile, 128, substream(1, 'trace'))
    attacked = inject_attack(trace, kind, intensity, substream(1, 'inject'))
    injected = max(1, math.ceil(intensity * 128))

    assert len(attacked) == 128 + injected
    assert int((attacked['attack_tag'] != 0).sum()) == injected
    assert np.all(np.diff(attacked['timestamp_us'].astype(np.int64)) >= 0)
    assert not trace['attack_tag'].any()


@pytest.mark.unit
def test_tamper_mutates_in_place(profile) -> None:
    trace = gen_trace(profile, 128, substream(2, 'trace'))
    attacked = inject_attack(trace, AttackKind.TAMPER, 0.1, substream(2, 'inject'))
    tagged = attacked['attack_tag'] == int(AttackKind.TAMPER)

    assert len(attacked) == 128
    assert int(tagged.sum()) == math.ceil(0.1 * 128)
    assert np.array_equal(attacked['timestamp_us'], trace['timestamp_us'])
    assert np.array_equal(attacked['payload'][:, 0], trace['payload'][:, 0])


@pytest.mark.unit
def test_dos_flood_uses_top_priority_identifier(profile) -> None:
    trace = gen_trace(profile, 128, substream(3, 'trace'))
    attacked = inject_attack(trace, 'DoS', 0.2, substream(3, 'inject'))
    flood = attacked[attacked['attack_tag'] == int(AttackKind.DOS)]
    assert set(flood['message_id']) == {DOS_MESSAGE_ID}
    assert flood['timestamp_us'][-1] <= trace['timestamp_us'][-1]


@pytest.mark.unit
def test_inject_attack_validation(profile) -> None:
    trace = gen_trace(profile, 16, substream(0))
    with pytest.raises(InvalidArgumentError):
        inject_attack(trace, 'replay', 0.1, substream(0))
    with pytest.raises(InvalidArgumentError):
        inject_attack(trace, AttackKind.NONE, 0.1, substream(0))
    with pytest.raises(InvalidArgumentError):
        inject_attack(trace, 'dos', 0.0, substream(0))
    with pytest.raises(InvalidArgumentError):
        inject_attack(trace[:0], 'dos', 0.5, substream(0))


@pytest.mark.unit
@pytest.mark.parametrize(
    'windows, ratio, expected', [(500, 4.8, 86), (40, 4.8, 7), (10, 1.0, 5)]
)
def test_attacked_window_count(windows, ratio, expected) -> None:
    assert attacked_windows(windows, ratio) == expected


@pytest.mark.unit
def test_vehicle_windows_follow_the_imbalance(profile) -> None:
    data, traces = gen_vehicle(profile, 0, 40, 4.8, seed=5)
    assert len(data) == len(traces) == 40
    assert int(data.labels.sum()) == attacked_windows(40, 4.8)
    assert list(data.record_counts) == [len(t) for t in traces]


@pytest.mark.unit
def test_fleet_is_deterministic_per_seed(small_fleet) -> None:
    first = gen_fleet_from_config(small_fleet, seed=8)
    second = gen_fleet_from_config(small_fleet, seed=8)
    other = gen_fleet_from_config(small_fleet, seed=9)

    assert first.oem_ids == [1, 2, 3]
    assert np.array_equal(first.all_data().features, second.all_data().features)
    assert not np.array_equal(first.all_data().features, other.all_data().features)


@pytest.mark.unit
def test_fleet_shapes(small_fleet) -> None:
    fleet = gen_fleet_from_config(small_fleet, seed=0)
    for oem in fleet.oem_ids:
        assert len(fleet.datasets[oem]) == small_fleet.vehicles_per_oem
        assert len(fleet.oem_dataset(oem)) == 2 * 40
    assert fleet.all_data().features.shape == (3 * 2 * 40, FEATURE_COUNT)


@pytest.mark.unit
def test_oem_shift_lands_on_features_only() -> None:
    """Features move with the OEM shift; the raw traces do not."""
    oem = default_profiles(3)[0]
    unshifted = OemProfile(1, component_count=oem.component_count)
    shifted, raw_shifted = gen_vehicle(oem, 0, 5, 4.8, seed=1)
    plain, raw_plain = gen_vehicle(unshifted, 0, 5, 4.8, seed=1)

    for a, b in zip(raw_shifted, raw_plain):
        assert np.array_equal(a, b)
    assert np.allclose(shifted.features - plain.features, oem.feature_shift)


@pytest.mark.unit
def test_fleet_validation() -> None:
    with pytest.raises(InvalidArgumentError):
        gen_fleet(0, 1, 1, 4.8, 0)
    with pytest.raises(InvalidArgumentError):
        gen_fleet(1, 1, 1, 0.0, 0)
    with pytest.raises(InvalidArgumentError):
        FleetConfig(n_oems=0)


@pytest.mark.unit
def test_export_trace_writes_one_row_per_record(tmp_path, profile) -> None:
    trace = inject_attack(
        gen_trace(profile, 8, substream(0)), 'spoofing', 0.2, substream(1)
    )
    path = export_trace(trace, str(tmp_path / 'trace.csv'))
    rows = read_csv(path)

    assert rows[0] == [
        'timestamp_us', 'component_id', 'message_id', 'payload', 'attack_tag'
    ]
    assert len(rows) == len(trace) + 1
    assert {r[4] for r in rows[1:]} == {'none', 'spoofing'}
    assert all(len(r[3]) == 16 for r in rows[1:])


@pytest.mark.unit
def test_profile_count_must_match_the_oem_count() -> None:
    with pytest.raises(InvalidArgumentError, match='2 OEM profiles'):
        gen_fleet(3, 1, 4, 4.8, 0, profiles=default_profiles(2))


@pytest.mark.slow
def test_fleet_class_ratio_follows_the_imbalance() -> None:
    """Three OEMs of ten vehicles, 1000 windows each, at 4.8:1."""
    fleet = gen_fleet(3, 10, 1000, 4.8, seed=0)
    labels = fleet.all_data().labels
    assert len(labels) == 30_000
    assert abs(labels.mean() - 0.172) <= 0.01
    for oem in fleet.oem_ids:
        for vehicle in fleet.datasets[oem]:
            assert int(vehicle.labels.sum()) == 172


def _oem_means(fleet):
    means, errors = {}, {}
    for oem in fleet.oem_ids:
        features = fleet.oem_dataset(oem).features
        means[oem] = features.mean(axis=0)
        errors[oem] = features.std(axis=0) / np.sqrt(len(features))
    return means, errors


@pytest.mark.slow
def test_zero_shift_fleet_has_matching_oem_means() -> None:
    """Identical profiles without shifts agree within sampling error."""
    profiles = [OemProfile(oem_id) for oem_id in (1, 2, 3)]
    fleet = gen_fleet(3, 4, 100, 4.8, seed=3, profiles=profiles)
    means, errors = _oem_means(fleet)
    for a, b in ((1, 2), (1, 3), (2, 3)):
        sigma = np.sqrt(errors[a] ** 2 + errors[b] ** 2)
        assert (np.abs(means[a] - means[b]) <= 4 * sigma + 1e-12).all()


@pytest.mark.slow
def test_default_shifts_separate_the_oem_means() -> None:
    """Outer OEMs differ by at least their configured offset minus sampling error."""
    profiles = [
        OemProfile(p.oem_id, feature_shift=p.feature_shift) for p in default_profiles(3)
    ]
    fleet = gen_fleet(3, 4, 100, 4.8, seed=3, profiles=profiles)
    means, errors = _oem_means(fleet)
    offset = np.abs(profiles[2].feature_shift - profiles[0].feature_shift)
    sigma = np.sqrt(errors[1] ** 2 + errors[3] ** 2)
    channels = list(SHIFT_CHANNELS)
    gap = np.abs(means[3] - means[1])[channels]
    assert (gap >= offset[channels] - 3 * sigma[channels]).all()


@pytest.mark.unit
@pytest.mark.parametrize('seed', range(5))
def test_fuzzing_raises_payload_entropy(profile, seed) -> None:
    trace = gen_trace(profile, 128, substream(seed, 'trace'))
    fuzzed = inject_attack(trace, 'fuzzing', 0.3, substream(seed, 'inject'))
    before = extract_features(trace).values[PAYLOAD_ENTROPY]
    after = extract_features(fuzzed).values[PAYLOAD_ENTROPY]
    assert after > before


@pytest.mark.unit
@pytest.mark.parametrize('seed', range(5))
def test_full_intensity_dos_at_least_doubles_the_message_rate(profile, seed) -> None:
    trace = gen_trace(profile, 128, substream(seed, 'trace'))
    flooded = inject_attack(trace, AttackKind.DOS, 1.0, substream(seed, 'inject'))

    def rate(window) -> float:
        stamps = window['timestamp_us'].astype(np.int64)
        return len(window) / (stamps[-1] - stamps[0])

    assert rate(flooded) >= 2 * rate(trace)
