import json

import pytest

from rtqm.engine import CapacityProfile, ConfigurationError
from rtqm.workload import (
    PAGE_COUNT_MAX, PAGE_SIZE_MAX, PAGE_SIZE_MIN, TEMPLATES, Scenario, TraceFormatError,
    abrf_profile, apply_overrides, experiment_template, generate_bandwidth_trace,
    generate_web_page, load_bandwidth_trace, load_web_trace, template_grid,
    write_bandwidth_trace, write_web_trace,
)


def test_bandwidth_trace_round_trip(tmp_path):
    prof = CapacityProfile([(0, 10_000_000), (500_000, 20_000_000), (1_000_000, 5_000_000)])
    path = tmp_path / "bw.csv"
    write_bandwidth_trace(path, prof)
    got, summary = load_bandwidth_trace(path)
    assert got.starts == prof.starts and got.rates == prof.rates
    assert summary.segments == 3
    assert summary.declared_mean_mbps == pytest.approx(summary.mean_mbps, abs=1e-5)


@pytest.mark.parametrize("body, line", [
    ("time_ms,capacity_mbps\n0,10\n5,x\n", 3),
    ("time_ms,capacity_mbps\n0,10\n0,12\n", 3),
    ("time_ms,capacity_mbps\n5,10\n", 2),
    ("time_ms,capacity_mbps\n0,-1\n", 2),
    ("t,c\n0,10\n", 1),
    ("time_ms,capacity_mbps\n0,10,3\n", 2),
])
def test_bandwidth_trace_errors_name_file_and_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(TraceFormatError) as exc:
        load_bandwidth_trace(path)
    assert exc.value.line == line
    assert str(path) in str(exc.value)


def test_missing_trace_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError, match="nope.csv"):
        load_bandwidth_trace(tmp_path / "nope.csv")


def test_generated_trace_hits_requested_mean():
    prof = generate_bandwidth_trace(12.0, duration_ms=30_000, seed=3)
    from rtqm.workload import summarize_profile
    assert summarize_profile(prof).mean_mbps == pytest.approx(12.0, rel=1e-3)
    assert prof.rates == generate_bandwidth_trace(12.0, duration_ms=30_000, seed=3).rates


def test_web_trace_round_trip(tmp_path):
    page = {"offsets_ms": [0.0, 12.5], "sizes": [1000, 25000]}
    write_web_trace(tmp_path / "p.csv", page)
    assert load_web_trace(tmp_path / "p.csv") == page
    (tmp_path / "bad.csv").write_text("0,-5\n")
    with pytest.raises(TraceFormatError):
        load_web_trace(tmp_path / "bad.csv")


def test_web_pages_are_seeded_and_in_range():
    a, b = generate_web_page(7), generate_web_page(7)
    assert a == b
    assert generate_web_page(8) != a
    for seed in range(200):
        p = generate_web_page(seed)
        assert 1 <= len(p["sizes"]) <= PAGE_COUNT_MAX
        assert all(PAGE_SIZE_MIN <= s <= PAGE_SIZE_MAX for s in p["sizes"])


def test_scenario_json_round_trip(tmp_path):
    sc = experiment_template("multi_bottleneck")
    path = tmp_path / "s.json"
    sc.save(path)
    again = Scenario.load(path)
    assert again.to_dict() == sc.to_dict()
    assert json.loads(path.read_text())["hops"][0]["managed"] is True


def test_scenario_validation():
    with pytest.raises(ConfigurationError):
        Scenario.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        Scenario(scheduler="wfq").validate()
    sc = Scenario(sources=[{"type": "video", "id": "a"}, {"type": "bulk", "id": "a"}])
    with pytest.raises(ConfigurationError, match="duplicate"):
        sc.validate()


def test_overrides_address_nested_keys():
    sc = experiment_template("website_compete")
    out = apply_overrides(sc, ["scheduler=fifo", "hops.0.capacity_mbps=10", "sources.0.cca=GCC_LIKE",
                               "scheduler_config.alpha=0.2"])
    assert out.scheduler == "fifo"
    assert out.hops[0].capacity_mbps == 10
    assert out.sources[0]["cca"] == "GCC_LIKE"
    assert out.scheduler_config == {"alpha": 0.2}
    assert sc.scheduler == "confucius"
    for bad in ["nokey=1", "hops.3.capacity_mbps=1", "scheduler", "scheduler=wfq"]:
        with pytest.raises(ConfigurationError):
            apply_overrides(sc, [bad])


@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_every_template_grid_builds(name):
    for params in template_grid(name):
        experiment_template(name, **params).validate()


def test_unknown_template():
    with pytest.raises(ConfigurationError):
        experiment_template("nope")


def test_abrf_profiles():
    assert abrf_profile(24.0, 8, 1000.0, False) == [[0.0, 24.0], [1000.0, 3.0]]
    assert abrf_profile(24.0, 8, 1000.0, True) == [[0.0, 24.0], [1000.0, 12.0], [1250.0, 6.0], [1500.0, 3.0]]
