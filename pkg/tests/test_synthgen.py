import numpy as np
import pytest

from logattn.synthgen import (RED_AUTH_TYPES, GenConfig, GenConfigError, build_profiles, emit_lanl_format,
                              generate, generate_day, profile_loglik)
from logattn.tokenizer import SECONDS_PER_DAY, format_line, is_machine_event, parse_line, parse_red_line

CFG = GenConfig(n_users=10, n_pcs=50, n_days=2, lines_per_day=800, red_count_per_day=10, seed=4)


def test_same_day_twice_is_identical():
    a = [format_line(e) for e in generate_day(CFG, 1)]
    b = [format_line(e) for e in generate_day(CFG, 1)]
    assert a == b
    assert a != [format_line(e) for e in generate_day(GenConfig(**{**CFG.as_dict(), "seed": 5}), 1)]


def test_red_counts_and_placement():
    assert sum(e.red for e in generate_day(CFG, 0)) == 0          # before first_red_day
    assert sum(e.red for e in generate_day(CFG, 1)) == 10
    zero = GenConfig(**{**CFG.as_dict(), "red_count_per_day": 0})
    assert sum(e.red for e in generate_day(zero, 1)) == 0


def test_times_sorted_within_day_bounds():
    for day in range(2):
        events = generate_day(CFG, day)
        secs = [e.seconds for e in events]
        assert secs == sorted(secs)
        assert all(day * SECONDS_PER_DAY <= s < (day + 1) * SECONDS_PER_DAY for s in secs)
        assert len(events) == CFG.lines_per_day


def test_benign_lines_follow_profiles():
    profiles = {p.account: p for p in build_profiles(CFG)}
    events = [e for e in generate_day(CFG, 1) if not e.red]
    preferred = np.mean([e.fields[2] == profiles[e.user].src_pcs[0] for e in events])
    assert abs(preferred - CFG.preferred_src_prob) < 0.03
    assert all(e.fields[3] in profiles[e.user].destinations for e in events)
    assert not any(e.fields[4] in RED_AUTH_TYPES for e in events)
    assert not any(is_machine_event(e) for e in events)


def test_red_lines_leave_the_profile():
    profiles = {p.account: p for p in build_profiles(CFG)}
    for e in generate_day(CFG, 1):
        if e.red:
            assert e.fields[2] not in profiles[e.user].machines
            assert e.fields[3] not in profiles[e.user].machines


def test_red_lines_below_benign_5th_percentile():
    profiles = build_profiles(CFG)
    events = generate_day(CFG, 1)
    benign = np.array([profile_loglik(CFG, profiles, e) for e in events if not e.red])
    red = np.array([profile_loglik(CFG, profiles, e) for e in events if e.red])
    assert red.max() < np.percentile(benign, 5)


def test_emit_and_parse_round_trip(tmp_path):
    events = list(generate(CFG))
    auth, red = emit_lanl_format(events, tmp_path)
    lines = auth.read_text().splitlines()
    assert len(lines) == len(events)
    for line in lines:
        assert len(line.split(",")) == 9 and line.count("@") == 2
    keys = {parse_red_line(x) for x in red.read_text().splitlines()}
    parsed = [parse_line(x, keys) for x in lines]
    assert [(p.seconds, p.fields, p.red) for p in parsed] == [(e.seconds, e.fields, e.red) for e in events]


def test_config_validation_and_file(tmp_path):
    with pytest.raises(GenConfigError):
        GenConfig(red_count_per_day=10, lines_per_day=5)
    with pytest.raises(GenConfigError):
        GenConfig(n_pcs=4)
    path = tmp_path / "gen.cfg"
    path.write_text("# corpus\nn_users = 7\nlines_per_day = 100\npreferred_src_prob = 0.8\n")
    cfg = GenConfig.from_file(path)
    assert cfg.n_users == 7 and cfg.lines_per_day == 100 and cfg.preferred_src_prob == 0.8
    path.write_text("bogus = 1\n")
    with pytest.raises(GenConfigError):
        GenConfig.from_file(path)
