from __future__ import annotations

from datetime import date, datetime, timedelta
from zoneinfo import ZoneInfo

import pytest
from helpers import ct, make_config, utc

from smartstate.clock import ClockTime
from smartstate.study import (
    OUTCOME_LATE_END,
    OUTCOME_SUCCESS,
    OUTCOME_TOO_LONG,
    OUTCOME_TOO_SHORT,
    FastRecord,
    WindowError,
    compute_window,
    cycle_of,
    error_rate,
    evaluate_fast,
    feedback_for,
    format_percent,
    make_fast_record,
    randomize_group,
    success_rate,
)

EASTERN = ZoneInfo("America/New_York")


def local(text: str) -> datetime:
    return datetime.fromisoformat(text).replace(tzinfo=EASTERN)


@pytest.fixture()
def config():
    return make_config()


class TestCycleOf:
    def test_boundary_belongs_to_new_cycle(self, config):
        assert cycle_of(local("2021-09-09T04:00"), config) == date(2021, 9, 9)

    def test_one_minute_before_boundary(self, config):
        assert cycle_of(local("2021-09-09T03:59"), config) == date(2021, 9, 8)

    def test_midnight_belongs_to_previous_cycle(self, config):
        assert cycle_of(local("2021-09-09T00:00"), config) == date(2021, 9, 8)

    def test_adjacent_instants_fall_in_consecutive_cycles(self, config):
        before = local("2021-09-09T03:59:59")
        after = local("2021-09-09T04:00:00")
        assert (cycle_of(after, config) - cycle_of(before, config)).days == 1

    def test_total_over_a_week_of_minutes(self, config):
        # Partition property: every minute lands in exactly one cycle and
        # the assignment is monotone.
        instant = local("2021-09-06T00:00")
        previous = cycle_of(instant, config)
        for _ in range(7 * 24 * 12):
            instant += timedelta(minutes=5)
            current = cycle_of(instant, config)
            assert current >= previous
            assert (current - previous).days <= 1
            previous = current

    def test_utc_input_converted_to_study_local(self, config):
        # 2021-09-09 07:30 UTC is 03:30 in New York: previous cycle.
        assert cycle_of(utc("2021-09-09T07:30"), config) == date(2021, 9, 8)


class TestComputeWindow:
    def test_seven_am_start(self, config):
        window = compute_window(ct("07:00"), config)
        assert window.target_end == ct("17:00")
        assert window.earliest_ok == ct("16:00")
        assert window.latest_ok == ct("18:00")

    def test_upper_bound_clamped_by_curfew(self, config):
        window = compute_window(ct("09:30"), config)
        assert window.target_end == ct("19:30")
        assert window.earliest_ok == ct("18:30")
        assert window.latest_ok == ct("19:59")

    def test_target_and_bound_both_clamped(self, config):
        window = compute_window(ct("10:30"), config)
        assert window.target_end == ct("19:59")
        assert window.earliest_ok == ct("19:30")
        assert window.latest_ok == ct("19:59")

    def test_start_at_curfew_rejected(self, config):
        with pytest.raises(WindowError):
            compute_window(ct("20:00"), config)
        with pytest.raises(WindowError):
            compute_window(ct("22:15"), config)

    def test_minute_grid_properties(self, config):
        # Brute-force re-derivation of the window invariants for every
        # start minute before the curfew. Clock times wrap at midnight, so
        # the earliest bound is compared modulo one day.
        for start_minute in range(4 * 60, 20 * 60):  # 04:00 .. 19:59 wall clock
            start = ClockTime.from_minutes(start_minute)
            window = compute_window(start, config)
            start_m = config.minutes_into_cycle(start)
            target_m = config.minutes_into_cycle(window.target_end)
            latest_m = config.minutes_into_cycle(window.latest_ok)
            earliest_m = config.minutes_into_cycle(window.earliest_ok)
            assert target_m - start_m <= 600
            if start_m + 600 < config.latest_end_minutes():
                assert target_m == start_m + 600
            assert latest_m < config.latest_end_minutes()
            assert earliest_m == (start_m + 540) % 1440
            assert latest_m == min(start_m + 660, config.latest_end_minutes() - 1)
            assert target_m == min(start_m + 600, latest_m)
            if start_m + 540 <= latest_m:  # a compliant window actually exists
                assert earliest_m <= target_m <= latest_m


class TestEvaluateFast:
    def test_figure_pair_success(self, config):
        assert evaluate_fast(ct("07:00"), ct("16:30"), config) == OUTCOME_SUCCESS

    def test_eleven_hours_inclusive(self, config):
        assert evaluate_fast(ct("07:00"), ct("18:00"), config) == OUTCOME_SUCCESS

    def test_nine_hours_inclusive(self, config):
        assert evaluate_fast(ct("07:00"), ct("16:00"), config) == OUTCOME_SUCCESS

    def test_too_short(self, config):
        assert evaluate_fast(ct("07:00"), ct("15:00"), config) == OUTCOME_TOO_SHORT

    def test_too_long(self, config):
        assert evaluate_fast(ct("07:00"), ct("18:01"), config) == OUTCOME_TOO_LONG

    def test_late_end(self, config):
        assert evaluate_fast(ct("10:45"), ct("20:15"), config) == OUTCOME_LATE_END

    def test_end_exactly_at_curfew_is_late(self, config):
        assert evaluate_fast(ct("10:00"), ct("20:00"), config) == OUTCOME_LATE_END

    def test_end_one_minute_before_curfew_ok(self, config):
        assert evaluate_fast(ct("10:00"), ct("19:59"), config) == OUTCOME_SUCCESS

    def test_post_midnight_end_stays_in_cycle(self, config):
        # 23:30 start to 01:00 end: 1.5 hours, post-midnight, same cycle.
        assert evaluate_fast(ct("23:30"), ct("01:00"), config) == OUTCOME_TOO_SHORT
        # 15:00 to 01:00 is 10 hours but ends well past the curfew.
        assert evaluate_fast(ct("15:00"), ct("01:00"), config) == OUTCOME_LATE_END

    def test_end_not_after_start_rejected(self, config):
        with pytest.raises(ValueError):
            evaluate_fast(ct("10:00"), ct("10:00"), config)

    def test_coarse_grid_matches_datetime_oracle(self, config):
        # 5-minute grid; the full 1-minute sweep runs in the acceptance suite.
        ref = datetime(2021, 9, 9)
        curfew = ref.replace(hour=20)

        def oracle(start_m: int, end_m: int) -> str:
            start_dt = ref.replace(hour=4) + timedelta(minutes=start_m)
            end_dt = ref.replace(hour=4) + timedelta(minutes=end_m)
            span = end_dt - start_dt
            if span < timedelta(hours=9):
                return OUTCOME_TOO_SHORT
            if span > timedelta(hours=11):
                return OUTCOME_TOO_LONG
            if end_dt >= curfew:
                return OUTCOME_LATE_END
            return OUTCOME_SUCCESS

        times = [ClockTime.from_minutes((m + 240) % 1440) for m in range(1440)]
        mismatches = 0
        for s in range(0, 1439, 5):
            for e in range(s + 5, 1440, 5):
                if evaluate_fast(times[s], times[e], config) != oracle(s, e):
                    mismatches += 1
        assert mismatches == 0


def record(outcome: str, day: int = 1) -> FastRecord:
    return FastRecord("p", date(2021, 9, day), ct("07:00"), ct("16:30"), 570, outcome)


class TestSuccessRate:
    def test_paper_arithmetic(self):
        records = [record(OUTCOME_SUCCESS, d % 28 + 1) for d in range(94)]
        assert success_rate(records, 100) == 0.94

    def test_zero_days_is_fresh_hundred_percent(self):
        assert success_rate([], 0) == 1.0

    def test_unreported_days_count_against(self):
        records = [record(OUTCOME_SUCCESS, d) for d in (1, 2, 3)]
        assert success_rate(records, 4) == 0.75

    def test_appending_failure_never_raises_rate(self):
        records = [record(OUTCOME_SUCCESS, 1)]
        base = success_rate(records, 1)
        worse = success_rate(records + [record(OUTCOME_TOO_SHORT, 2)], 2)
        assert worse <= base

    def test_appending_success_never_lowers_numerator(self):
        records = [record(OUTCOME_TOO_SHORT, 1)]
        base = success_rate(records, 2)
        better = success_rate(records + [record(OUTCOME_SUCCESS, 2)], 2)
        assert better >= base


class TestErrorRate:
    def test_paper_numbers_render_exactly(self):
        assert error_rate(548, 5596).percent() == "9.8%"

    def test_zero_errors(self):
        assert error_rate(0, 100).percent() == "0.0%"

    def test_simple_tenth(self):
        assert error_rate(5, 50).percent() == "10.0%"

    def test_no_outgoing_flagged_undefined(self):
        rate = error_rate(3, 0)
        assert rate.fraction == 0.0
        assert rate.defined is False

    def test_format_percent_one_decimal(self):
        assert format_percent(0.0979271) == "9.8%"
        assert format_percent(1.0) == "100.0%"


class TestRandomize:
    def test_deterministic_for_seed_and_participant(self):
        first = randomize_group("p1", 42)
        assert all(randomize_group("p1", 42) == first for _ in range(25))

    def test_draw_depends_on_seed(self):
        draws = {randomize_group("p1", seed) for seed in range(40)}
        assert draws == {"control", "restricted"}

    def test_ten_thousand_draws_near_even(self):
        hits = sum(1 for i in range(10_000)
                   if randomize_group(f"p{i:05d}", 42) == "control")
        assert 0.49 <= hits / 10_000 <= 0.51


class TestFeedback:
    def test_restricted_mapping(self):
        assert feedback_for(OUTCOME_SUCCESS) == "good_window"
        assert feedback_for(OUTCOME_TOO_SHORT) == "too_short_info"
        assert feedback_for(OUTCOME_TOO_LONG) == "too_long_info"
        assert feedback_for(OUTCOME_LATE_END) == "late_end_info"

    def test_neutral_groups_always_acknowledge(self):
        for outcome in (OUTCOME_SUCCESS, OUTCOME_TOO_SHORT,
                        OUTCOME_TOO_LONG, OUTCOME_LATE_END):
            assert feedback_for(outcome, neutral=True) == "ack_neutral"

    def test_unknown_outcome_rejected(self):
        with pytest.raises(ValueError):
            feedback_for("incomplete")


class TestMakeFastRecord:
    def test_complete_pair(self, config):
        rec = make_fast_record("p", date(2021, 9, 9), ct("07:00"), ct("16:30"), config)
        assert rec.outcome == OUTCOME_SUCCESS
        assert rec.duration_minutes == 570

    def test_missing_end_incomplete(self, config):
        rec = make_fast_record("p", date(2021, 9, 9), ct("07:00"), None, config)
        assert rec.outcome == "incomplete"
        assert rec.duration_minutes is None
