"""Tests for dataset construction, normalization and splits."""

import numpy as np
import pendulum
import pytest

from dpn_building.datahub import (
    Action,
    Dataset,
    Disturbance,
    EmptyPartitionError,
    LengthMismatchError,
    NORMALIZED_FEATURES,
    NormStats,
    Observation,
    collect,
    encode_day_of_week,
    encode_hour,
    excitation_holds,
    excitation_schedule,
    split,
)
from dpn_building.thermal import Simulator, WeatherRecord, default_building


def monthly_dataset(months: list[tuple[int, int]], n_zones: int = 2) -> Dataset:
    """A synthetic dataset with a handful of quarter-hour rows per month."""
    timestamps = []
    for year, month in months:
        start = pendulum.datetime(year, month, 3, tz="America/Montreal")
        timestamps.extend(start.add(minutes=15 * k) for k in range(10 + month))
    n = len(timestamps)
    rng = np.random.default_rng(0)
    return Dataset(
        timestamps,
        rng.uniform(18, 22, size=(n, n_zones)),
        rng.uniform(0, 3000, size=(n, n_zones)),
        rng.uniform(17, 23, size=(n, n_zones)),
        np.column_stack([rng.uniform(-20, 0, n), rng.uniform(40, 90, n), rng.uniform(0, 500, n)]),
    )


EIGHT_MONTHS = [(2023, 10), (2023, 11), (2023, 12), (2024, 1), (2024, 2), (2024, 3), (2024, 4), (2024, 5)]


def test_excitation_levels_on_lattice():
    """Test that every level lies in [17, 23] on the 0.25 lattice."""
    schedule = excitation_schedule(2000, 3, seed=0)
    assert schedule.min() >= 17.0
    assert schedule.max() <= 23.0
    assert np.array_equal(np.round(schedule * 4) / 4, schedule)


def test_excitation_hold_lengths():
    """Test that every complete hold lasts 4 to 192 timesteps."""
    for runs in excitation_holds(5000, 4, seed=2):
        assert sum(length for _, length in runs) == 5000
        for _, length in runs[:-1]:
            assert 4 <= length <= 192
        assert 1 <= runs[-1][1] <= 192


def test_excitation_deterministic():
    """Test that the same seed gives the same schedule."""
    assert np.array_equal(excitation_schedule(500, 2, 9), excitation_schedule(500, 2, 9))
    assert not np.array_equal(excitation_schedule(500, 2, 9), excitation_schedule(500, 2, 10))


def test_collect_empty():
    """Test that a zero-length schedule yields an empty dataset."""
    topology, params = default_building(1, 2, seed=0)
    dataset = collect(Simulator(topology, params), np.zeros((0, 2)), [])
    assert len(dataset) == 0
    assert dataset.n_zones == 2


def test_collect_length_mismatch(weather_records):
    """Test that schedule and weather must cover the same timesteps."""
    topology, params = default_building(1, 2, seed=0)
    with pytest.raises(LengthMismatchError):
        collect(Simulator(topology, params), np.full((5, 2), 20.0), weather_records[:4])


def test_collect_low_setpoint_no_heating(weather_records):
    """Test that setpoints below every temperature never heat."""
    topology, params = default_building(1, 2, seed=0)
    sim = Simulator(topology, params, initial_temps=21.0)
    dataset = collect(sim, np.full((16, 2), 12.0), weather_records[:16])
    assert np.all(dataset.hvac_w == 0.0)


def test_collect_deterministic(small_building, weather_records):
    """Test that recollecting with the same inputs is bit-identical."""
    topology, params = small_building
    schedule = excitation_schedule(200, topology.n_zones, seed=5)
    a = collect(Simulator(topology, params), schedule, weather_records[:200])
    b = collect(Simulator(topology, params), schedule, weather_records[:200])
    assert np.array_equal(a.zone_temp, b.zone_temp)
    assert np.array_equal(a.hvac_w, b.hvac_w)
    assert a.stats == b.stats


def test_collect_alignment(small_dataset):
    """Test the row layout: observation before the row's setpoint is applied."""
    assert np.all(small_dataset.hvac_w[0] == 0.0)
    assert np.all(small_dataset.zone_temp[0] == 21.0)
    assert small_dataset.stats is not None


def test_observation_and_action_invariants():
    """Test the observation and action sanity bounds."""
    with pytest.raises(ValueError):
        Observation(zone_temp=20.0, hvac_power=-1.0)
    with pytest.raises(ValueError):
        Action(setpoint=35.0)
    assert Action(setpoint=21.0).setpoint == 21.0


def test_calendar_encoding_periodic():
    """Test that hour 0 and 24 encode identically and days have period 7."""
    assert encode_hour(0) == encode_hour(24)
    assert encode_day_of_week(2) == encode_day_of_week(9)


def test_disturbance_on_unit_circle(weather_records):
    """Test the sin/cos pairs lie on the unit circle."""
    for record in weather_records[::13]:
        d = Disturbance.from_record(record)
        assert abs(d.hour_sin**2 + d.hour_cos**2 - 1.0) < 1e-9
        assert abs(d.dow_sin**2 + d.dow_cos**2 - 1.0) < 1e-9


def test_disturbance_from_record():
    """Test the weather part of a disturbance is copied verbatim."""
    ts = pendulum.datetime(2024, 1, 15, 6, tz="America/Montreal")
    d = Disturbance.from_record(WeatherRecord(ts, -12.5, 80.0, 0.0))
    assert (d.t_out, d.rh, d.dni) == (-12.5, 80.0, 0.0)
    assert abs(d.hour_sin - 1.0) < 1e-12
    assert d.dow_sin == 0.0


def test_normalization_roundtrip(small_dataset):
    """Test denormalize(normalize(x)) = x for every feature."""
    stats = small_dataset.stats
    values = np.linspace(-30.0, 3000.0, 17)
    for name in NORMALIZED_FEATURES:
        back = stats.denormalize(name, stats.normalize(name, values))
        assert np.max(np.abs(back - values)) < 1e-9


def test_normalization_zero_spread_feature():
    """Test that a constant feature gets std 1.0."""
    dataset = monthly_dataset([(2024, 1)])
    dataset.weather[:, 2] = 0.0
    stats = NormStats.fit(dataset)
    assert stats.std[NORMALIZED_FEATURES.index("dni")] == 1.0
    assert all(s > 0 for s in stats.std)


def test_stats_dict_roundtrip(small_dataset):
    """Test stats serialization."""
    stats = small_dataset.stats
    assert NormStats.from_dict(stats.to_dict()) == stats


def test_split_partition_sizes():
    """Test that a 6/1/1 split of eight months follows month boundaries."""
    dataset = monthly_dataset(EIGHT_MONTHS)
    train, val, test = split(dataset)
    rows_per_month = {m: 10 + m for _, m in EIGHT_MONTHS}
    assert len(train) == sum(rows_per_month[m] for m in (10, 11, 12, 3, 4, 5))
    assert len(val) == rows_per_month[1]
    assert len(test) == rows_per_month[2]


def test_split_disjoint():
    """Test that no timestamp appears in two partitions."""
    train, val, test = split(monthly_dataset(EIGHT_MONTHS))
    stamps = [set(ts.timestamp() for ts in part.timestamps) for part in (train, val, test)]
    assert not stamps[0] & stamps[1]
    assert not stamps[0] & stamps[2]
    assert not stamps[1] & stamps[2]


def test_split_stats_from_train():
    """Test that validation and test share the training statistics exactly."""
    train, val, test = split(monthly_dataset(EIGHT_MONTHS))
    assert train.stats == NormStats.fit(train)
    assert val.stats == train.stats
    assert test.stats == train.stats


def test_split_empty_partition():
    """Test that a missing month raises EmptyPartitionError."""
    dataset = monthly_dataset([(2023, 10), (2024, 1)])
    with pytest.raises(EmptyPartitionError):
        split(dataset)


def test_window_starts_skip_gaps():
    """Test that windows never straddle a gap between months."""
    dataset = monthly_dataset([(2023, 12), (2024, 3)])
    starts = dataset.window_starts(5)
    # December has 22 rows, March 13: 18 + 9 windows
    assert len(starts) == 18 + 9
    epoch = dataset.epoch_seconds
    for s in starts:
        assert np.all(np.diff(epoch[s : s + 5]) == 900.0)


def test_dataset_save_load(tmp_path, small_dataset):
    """Test the per-zone CSV layout round-trips exactly."""
    small_dataset.save(tmp_path / "data")
    assert (tmp_path / "data" / "zone_00.csv").exists()
    assert (tmp_path / "data" / "stats.json").exists()
    loaded = Dataset.load(tmp_path / "data")
    assert np.array_equal(loaded.zone_temp, small_dataset.zone_temp)
    assert np.array_equal(loaded.hvac_w, small_dataset.hvac_w)
    assert np.array_equal(loaded.weather, small_dataset.weather)
    assert loaded.timestamps == small_dataset.timestamps
    assert loaded.stats == small_dataset.stats


def test_dataset_misaligned():
    """Test that misaligned arrays are rejected."""
    ts = [pendulum.datetime(2024, 1, 1, tz="UTC")]
    with pytest.raises(LengthMismatchError):
        Dataset(ts, np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((1, 3)))
