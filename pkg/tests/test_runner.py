from rtqm.checks import run_digest
from rtqm.metrics import build_report
from rtqm.runner import run_scenario
from rtqm.workload import apply_overrides, experiment_template


def short(name="website_compete", **params):
    sc = experiment_template(name, **params)
    return apply_overrides(sc, ["duration_ms=3000", "sources.1.first_ms=1000"])


def digest(sc):
    res = run_scenario(sc)
    return run_digest(res, build_report(res))


def test_same_scenario_same_bytes():
    sc = short(pages=1)
    assert digest(sc) == digest(sc)


def test_seed_changes_the_run():
    assert digest(short(pages=1, seed=1)) != digest(short(pages=1, seed=2))


def test_confucius_ignores_application_labels():
    sc = short(pages=1)
    blind = apply_overrides(sc, ["labels=false"])
    assert digest(sc) == digest(blind)


def test_managed_hop_records_queue_delays():
    res = run_scenario(short(pages=1))
    assert res.queue_delays_us and min(res.queue_delays_us) >= 0
    assert res.events > 0
    assert set(res.max_queue_delay_us) >= {"rt"}
