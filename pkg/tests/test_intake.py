from __future__ import annotations

from hypothesis import given, settings
from hypothesis import strategies as st

from smartstate.clock import ClockTime
from smartstate.intake import classify, parse_clock_time, sanitize, sanitize_bytes


class TestSanitize:
    def test_control_chars_and_whitespace(self):
        assert sanitize("  STARTCAL 7:00 AM \x07") == "startcal 7:00 am"

    def test_truncation_bound(self):
        assert len(sanitize("a" * 10_000)) == 512

    def test_already_clean_unchanged(self):
        assert sanitize("startcal 7:00 am") == "startcal 7:00 am"

    def test_invalid_utf8_bytes_dropped(self):
        assert sanitize_bytes(b"endcal \xff\xfe 4pm") == "endcal 4pm"

    @settings(max_examples=300, deadline=None)
    @given(st.text(max_size=600))
    def test_idempotent(self, raw):
        once = sanitize(raw)
        assert sanitize(once) == once

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=600))
    def test_output_printable_and_bounded(self, raw):
        out = sanitize(raw)
        assert len(out) <= 512
        assert all(ch.isprintable() for ch in out)
        assert "  " not in out
        assert out == out.strip().lower()


class TestClassify:
    def test_figure_walkthrough_startcal(self):
        intent = classify("startcal 7:00 am")
        assert intent.variant == "startcal"
        assert intent.time == ClockTime(7, 0)

    def test_bare_hour_is_ambiguous(self):
        intent = classify("startcal 7")
        assert intent.variant == "ambiguous_time"
        assert intent.keyword == "startcal"

    def test_no_keyword_unknown(self):
        assert classify("good morning").variant == "unknown"

    def test_keyword_anywhere_in_message(self):
        intent = classify("i endcal at 4:30 pm today")
        assert intent.variant == "endcal"
        assert intent.time == ClockTime(16, 30)

    def test_both_keywords_unknown(self):
        assert classify("startcal endcal 7 am").variant == "unknown"

    def test_misspellings_not_fuzzy_matched(self):
        assert classify("startcall 7:00 am").variant == "unknown"
        assert classify("stratcal 7:00 am").variant == "unknown"

    def test_keyword_with_punctuation_still_a_word(self):
        assert classify("startcal, 7:00 am").variant == "startcal"

    def test_keyword_but_no_digits_invalid(self):
        intent = classify("startcal now")
        assert intent.variant == "invalid_time"
        assert intent.keyword == "startcal"

    def test_out_of_range_invalid(self):
        assert classify("startcal 25:00").variant == "invalid_time"

    def test_multiple_times_first_wins_with_note(self):
        intent = classify("startcal 7:00 am or maybe 8:00 am")
        assert intent.variant == "startcal"
        assert intent.time == ClockTime(7, 0)
        assert intent.note is not None

    @settings(max_examples=300, deadline=None)
    @given(st.text(max_size=300))
    def test_total_on_arbitrary_sanitized_input(self, raw):
        intent = classify(sanitize(raw))
        assert intent.variant in ("startcal", "endcal", "ambiguous_time",
                                  "invalid_time", "unknown")

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=300))
    def test_classification_depends_only_on_sanitized_form(self, raw):
        once = sanitize(raw)
        assert classify(once) == classify(sanitize(once))

    def test_hours_1_to_12_ambiguous_exhaustive(self):
        for h in range(1, 13):
            assert classify(f"startcal {h}").variant == "ambiguous_time", h

    def test_hours_13_to_23_and_0_resolved_exhaustive(self):
        for h in range(13, 24):
            intent = classify(f"startcal {h}:15")
            assert intent.variant == "startcal", h
            assert intent.time == ClockTime(h, 15)
        intent = classify("startcal 0:30")
        assert intent.variant == "startcal"
        assert intent.time == ClockTime(0, 30)


class TestParseClockTime:
    def test_figure_time(self):
        parsed = parse_clock_time("7:00 am")
        assert parsed.status == "ok"
        assert parsed.time == ClockTime(7, 0)

    def test_bare_hour_ambiguous(self):
        assert parse_clock_time("7").status == "ambiguous"

    def test_24_hour_unambiguous(self):
        parsed = parse_clock_time("19:30")
        assert (parsed.status, parsed.time) == ("ok", ClockTime(19, 30))

    def test_out_of_range_hour(self):
        assert parse_clock_time("25:00").status == "invalid"

    def test_out_of_range_minute(self):
        assert parse_clock_time("7:75 am").status == "invalid"

    def test_no_digits(self):
        assert parse_clock_time("soon").status == "invalid"

    def test_meridiem_styles(self):
        for text in ("7am", "7 am", "7a.m.", "7 a.m.", "7:00am", "7:00 AM".lower()):
            parsed = parse_clock_time(text)
            assert (parsed.status, parsed.time) == ("ok", ClockTime(7, 0)), text

    def test_meridiem_table_exhaustive(self):
        for h in range(1, 12):
            assert parse_clock_time(f"{h} pm").time == ClockTime(h + 12, 0)
            assert parse_clock_time(f"{h} am").time == ClockTime(h, 0)
        assert parse_clock_time("12 am").time == ClockTime(0, 0)
        assert parse_clock_time("12 pm").time == ClockTime(12, 0)

    def test_minutes_with_no_meridiem_still_ambiguous(self):
        assert parse_clock_time("7:30").status == "ambiguous"

    def test_first_parseable_wins_over_garbage(self):
        parsed = parse_clock_time("99:99 then 6:15 pm")
        assert (parsed.status, parsed.time) == ("ok", ClockTime(18, 15))
