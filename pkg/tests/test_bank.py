import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import MONDAY, make_frame
from ttcomp.bank import (
    BankFormatError,
    PeriodicDataBank,
    build_bank,
    impute_zeros,
    load_bank,
    sample_keys,
    save_bank,
)
from ttcomp.ingest import SyntheticSpec, generate_synthetic, split, to_epoch_minutes
from ttcomp.series import PeriodConfig, make_windows, slot_of

WEEK = 2016
TUE_0600 = 288 + 6 * 12


def test_block_imputation_example():
    vals = np.full((12, 2), 70.0)
    vals[:4, 0] = [0, 40, 60, 0]
    vals[4:, 0] = 0
    out = impute_zeros(make_frame(vals), L=4).values
    np.testing.assert_allclose(out[:4, 0], [50, 40, 60, 50])
    # blocks with no nonzero value fall back to the same-slot mean, here
    # the sensor's global mean since each slot occurs once
    np.testing.assert_allclose(out[4:, 0], 50.0)
    np.testing.assert_array_equal(out[:, 1], 70.0)


def test_full_row_outage_uses_same_slot_mean():
    T = 3 * WEEK
    vals = np.full((T, 3), 55.0)
    vals[TUE_0600, :] = [60, 70, 80]
    vals[WEEK + TUE_0600, :] = [62, 72, 82]
    vals[2 * WEEK + TUE_0600, :] = 0
    out = impute_zeros(make_frame(vals)).values
    np.testing.assert_allclose(out[2 * WEEK + TUE_0600], [61, 71, 81])


def test_imputation_leaves_nonzero_untouched(rng):
    vals = rng.uniform(1, 80, (WEEK, 4))
    vals[rng.random(vals.shape) < 0.05] = 0
    vals[100] = 0
    out = impute_zeros(make_frame(vals)).values
    nz = vals != 0
    np.testing.assert_array_equal(out[nz], vals[nz])
    assert np.all(out > 0)


def test_imputation_rejects_dead_sensor():
    vals = np.ones((24, 2))
    vals[:, 1] = 0
    with pytest.raises(ValueError):
        impute_zeros(make_frame(vals))


def test_build_requires_zero_free():
    with pytest.raises(ValueError):
        build_bank(make_frame(np.zeros((5, 2))))


def test_bank_layout(periodic_frame):
    bank = build_bank(periodic_frame)
    assert (bank.P, bank.C) == (WEEK, 10)
    assert np.all(bank.Q == 2)
    ts, vals = bank.slot(TUE_0600)
    assert list(slot_of(ts)) == [TUE_0600, TUE_0600]
    assert ts[0] < ts[1]
    np.testing.assert_array_equal(vals[0], periodic_frame.values[TUE_0600].astype(np.float32))


def test_bank_only_from_train():
    with pytest.raises(ValueError):
        PeriodicDataBank(np.ones((1, 1)), [MONDAY], [0] + [1] * WEEK, built_from="test")


def _sparse_bank():
    # records only at slots 10 and 20
    offsets = np.zeros(WEEK + 1, dtype=np.int64)
    offsets[11:] = 1
    offsets[21:] = 2
    return PeriodicDataBank(np.array([[1.0], [2.0]]), [MONDAY + 50, MONDAY + 100], offsets)


def test_empty_slot_redirects_cyclically():
    bank = _sparse_bank()
    assert list(bank.resolve([0, 10, 11, 20, 21, WEEK - 1])) == [10, 10, 20, 20, 10, 10]


def test_sampling_marginals_without_replacement():
    T = 4 * WEEK
    frame = make_frame(np.arange(1, T + 1, dtype=float)[:, None])
    bank = build_bank(frame)
    rng = np.random.default_rng(0)
    idx = bank.draw(np.full(10000, 7), 2, rng)
    local = idx - bank.offsets[7]
    assert np.all(local[:, 0] != local[:, 1])
    freq = np.bincount(local.ravel(), minlength=4) / local.size
    np.testing.assert_allclose(freq, 0.25, atol=0.02)


def test_sampling_with_replacement_when_short():
    bank = build_bank(make_frame(np.arange(1, 2 * WEEK + 1, dtype=float)[:, None]))
    idx = bank.draw(np.full(2000, 3), 5, np.random.default_rng(1))
    local = idx - bank.offsets[3]
    assert set(np.unique(local)) == {0, 1}
    assert np.any(local[:, 0] == local[:, 1])


def test_draw_excludes_exact_time():
    bank = build_bank(make_frame(np.arange(1, 4 * WEEK + 1, dtype=float)[:, None]))
    ts, _ = bank.slot(9)
    idx = bank.draw(np.full(500, 9), 3, np.random.default_rng(2), exclude_near=np.full(500, ts[1]))
    assert not np.any(bank.timestamps[idx] == ts[1])


def test_sample_keys_uses_next_slot(periodic_frame):
    bank = build_bank(periodic_frame)
    w, _ = make_windows(periodic_frame, 12, 12)[TUE_0600]
    s = sample_keys(bank, w, 5, rng_seed=4)
    assert s.data.shape == (12, 5 * 10, 1)
    np.testing.assert_array_equal(s.source_slots, w.slots() + 1)
    assert np.all(slot_of(s.source_timestamps) == (w.slots() + 1)[:, None])
    # each key row is a full bank record, sensors laid out per draw
    rec = bank.values[bank.offsets[s.source_slots[0]] + s.record_indices[0, 0]]
    np.testing.assert_array_equal(s.data[0, :10, 0], rec)


def test_sample_keys_deterministic(periodic_frame):
    bank = build_bank(periodic_frame)
    w, _ = make_windows(periodic_frame, 12, 12)[50]
    a = sample_keys(bank, w, 5, 9)
    b = sample_keys(bank, w, 5, 9)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.record_indices, b.record_indices)


def test_week_wrap_sampling(periodic_frame):
    bank = build_bank(periodic_frame)
    start = to_epoch_minutes("2012-03-11 23:00:00")
    f = make_frame(np.full((24, 10), 50.0), start=start)
    w, _ = make_windows(f, 12, 12)[0]
    s = sample_keys(bank, w, 2, 0)
    assert s.source_slots[-1] == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, WEEK - 1), st.integers(0, 2**31))
def test_draw_stays_in_slot(R, slot, seed):
    bank = build_bank(make_frame(np.arange(1, 3 * WEEK + 1, dtype=float)[:, None]))
    idx = bank.draw([slot], R, np.random.default_rng(seed))
    assert idx.shape == (1, R)
    assert np.all((idx >= bank.offsets[slot]) & (idx < bank.offsets[slot + 1]))
    if R <= 3:
        assert len(set(idx[0])) == R


def test_round_trip_bitwise(tmp_path, rng):
    vals = rng.uniform(1, 80, (WEEK + 37, 3))
    bank = build_bank(make_frame(vals))
    save_bank(bank, tmp_path / "b.cpbk")
    back = load_bank(tmp_path / "b.cpbk")
    assert back.equals(bank)
    assert back.values.dtype == np.float32


def test_round_trip_custom_period(tmp_path):
    cfg = PeriodConfig(steps_per_hour=4, hours_per_day=24, days_per_week=7)
    frame = make_frame(np.arange(1, 700, dtype=float)[:, None], step=15)
    bank = build_bank(frame, cfg)
    save_bank(bank, tmp_path / "b.cpbk")
    back = load_bank(tmp_path / "b.cpbk")
    assert back.cfg == cfg and back.equals(bank)


def test_file_size_scales_with_records(tmp_path):
    spec = SyntheticSpec(C=8, zero_burst_rate=0.0, congestion_rate=0.0)
    one = build_bank(generate_synthetic(SyntheticSpec(**{**spec.to_dict(), "weeks": 2})))
    two = build_bank(generate_synthetic(SyntheticSpec(**{**spec.to_dict(), "weeks": 4})))
    save_bank(one, tmp_path / "a")
    save_bank(two, tmp_path / "b")
    ratio = (tmp_path / "b").stat().st_size / (tmp_path / "a").stat().st_size
    assert 1.9 < ratio < 2.1


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing", "empty"])
def test_corrupt_files(tmp_path, periodic_frame, mutate):
    path = tmp_path / "b.cpbk"
    save_bank(build_bank(periodic_frame), path)
    buf = bytearray(path.read_bytes())
    if mutate == "magic":
        buf[:4] = b"XXXX"
    elif mutate == "version":
        buf[4] = 9
    elif mutate == "truncate":
        buf = buf[: len(buf) // 2]
    elif mutate == "trailing":
        buf += b"\x00"
    else:
        buf = b""
    path.write_bytes(bytes(buf))
    with pytest.raises(BankFormatError):
        load_bank(path)


def test_bank_never_sees_test_split():
    frame = generate_synthetic(SyntheticSpec(C=4, weeks=3))
    tr, _, te = split(frame)
    bank = build_bank(impute_zeros(tr))
    assert bank.timestamps.max() < te.timestamps.min()
