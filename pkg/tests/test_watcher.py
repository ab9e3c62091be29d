import threading
from dataclasses import replace

import httpx
import pytest

from hosputil.serve.artifact import read_artifact, write_artifact_atomic
from hosputil.serve.pipeline import write_manifest
from hosputil.serve.service import QueueFull, ServerThread, create_app
from hosputil.serve.watcher import GatePolicy, Watcher, evaluate_gate

from conftest import exposure_artifact
from helpers import cycle_config, write_cycle


def art_with(auc, n=100):
    return replace(exposure_artifact(), train_metrics={"test": {"auc": auc, "n": n}}, content_checksum="").sealed()


def test_gate_policy_parse():
    assert GatePolicy.parse("auc:0.02") == GatePolicy("auc", 0.02)
    assert GatePolicy.parse("accuracy").max_degradation == 0.01
    with pytest.raises(ValueError):
        GatePolicy.parse("f1:0.1")
    with pytest.raises(ValueError):
        GatePolicy("auc", -1)


def test_gate_verdicts():
    g = GatePolicy("auc", 0.01, 50)
    assert evaluate_gate(art_with(0.7), None, g).passed
    assert evaluate_gate(art_with(0.695), art_with(0.70), g).passed
    v = evaluate_gate(art_with(0.68), art_with(0.70), g)
    assert not v.passed and "dropped" in v.reason
    assert not evaluate_gate(art_with(0.9, n=10), None, g).passed
    assert not evaluate_gate(art_with(None), None, g).passed


@pytest.fixture
def setup(tmp_path):
    data = tmp_path / "data"
    entries = write_cycle(data, "2015", 0)
    manifest = data / "manifest.yaml"
    write_manifest(manifest, entries)
    w = Watcher(str(manifest), cycle_config(), tmp_path / "model.json", tmp_path / "audit.jsonl")
    return w, manifest, entries, data


def test_tick_is_idempotent(setup):
    w, manifest, _, _ = setup
    first = w.tick()
    assert first["promoted"] and first["error"] is None
    assert w.tick() is None and w.tick() is None
    assert w.runs == 1 and len(w.audit_records()) == 1
    # a fresh watcher resumes from the artifact's manifest hash
    w2 = Watcher(str(manifest), cycle_config(), w.artifact_path, w.audit_path)
    assert w2.tick() is None


def test_new_cycle_promotes_and_shuffled_cycle_is_rejected(setup):
    w, manifest, entries, data = setup
    w.tick()
    entries += write_cycle(data, "2017", 1, id_offset=10**6)
    write_manifest(manifest, entries)
    rec = w.tick()
    assert rec["promoted"] and read_artifact(w.artifact_path).data_manifest_hash == rec["manifest_hash"]
    good = read_artifact(w.artifact_path)
    entries += write_cycle(data, "2019", 2, id_offset=2 * 10**6, shuffle_outcome=True)
    write_manifest(manifest, entries)
    rec = w.tick()
    assert not rec["promoted"]
    assert rec["gate"]["current"] - rec["gate"]["new"] > 0.01
    assert read_artifact(w.artifact_path) == good


def test_failed_run_is_audited_and_keeps_model(setup):
    w, manifest, entries, data = setup
    w.tick()
    before = w.artifact_path.read_bytes()
    (data / entries[0].path).write_bytes(b"corrupted")
    write_manifest(manifest, entries + write_cycle(data, "2017", 1, id_offset=10**6))
    rec = w.tick()
    assert not rec["promoted"] and "ManifestError" in rec["error"]
    assert w.artifact_path.read_bytes() == before
    assert w.tick() is None  # not retried until the manifest changes


def test_unreadable_manifest_is_not_fatal(tmp_path):
    w = Watcher(str(tmp_path / "nope.yaml"), cycle_config(), tmp_path / "m.json", tmp_path / "a.jsonl")
    assert w.tick() is None
    rec = w.run("push")
    assert rec["error"] and not rec["promoted"]


def test_notify_coalesces_and_refuses_conflicts(setup):
    w, manifest, _, _ = setup
    assert w.notify() == "queued"
    assert w.notify() == "coalesced"
    assert w.notify(str(manifest)) == "coalesced"
    with pytest.raises(QueueFull):
        w.notify("other.yaml")


def test_background_loop_runs_push_once(setup):
    w, _, _, _ = setup
    promoted = threading.Event()
    w.on_promote = promoted.set
    w.interval = 3600
    w.start()
    try:
        assert promoted.wait(30)  # the initial poll
        assert w.wait_idle(30)
        w.notify()
        assert w.wait_idle(30)
    finally:
        w.stop()
    triggers = [r["trigger"] for r in w.audit_records()]
    assert triggers == ["poll", "push"]


def test_promote_callback_failure_is_recorded(setup):
    w, _, _, _ = setup

    def fail():
        raise RuntimeError("service down")

    w.on_promote = fail
    rec = w.tick()
    assert rec["promoted"] and "service down" in rec["error"]


def test_incumbent_recorded_on_new_split(setup):
    w, manifest, entries, data = setup
    w.tick()
    write_manifest(manifest, entries + write_cycle(data, "2017", 1, id_offset=10**6))
    rec = w.tick()
    assert 0.5 < rec["incumbent_on_new_test"] <= 1.0


def test_corrupt_incumbent_counts_as_absent(setup):
    w, _, _, _ = setup
    write_artifact_atomic(w.artifact_path, art_with(0.99))
    w.artifact_path.write_bytes(w.artifact_path.read_bytes()[:-5])
    assert w.current_artifact() is None
    assert w.tick()["promoted"]


def test_five_events_during_a_run_queue_one_more(setup):
    w, _, _, _ = setup
    in_run = threading.Event()
    release = threading.Event()

    def hold():
        in_run.set()
        release.wait(30)

    w.on_promote = hold
    w.interval = 3600
    w.start()
    try:
        assert in_run.wait(30)
        statuses = [w.notify() for _ in range(5)]
        w.on_promote = None
        release.set()
        assert w.wait_idle(30)
    finally:
        w.stop()
    assert statuses == ["queued"] + ["coalesced"] * 4
    assert w.runs == 2 and [r["trigger"] for r in w.audit_records()] == ["poll", "push"]


def test_unauthenticated_notify_runs_nothing(setup, artifact_file):
    w, _, _, _ = setup
    with ServerThread(create_app(artifact_file, "tok", w.notify)) as srv:
        assert httpx.post(srv.url + "/notify", headers={"X-Admin-Token": "nope"}).status_code == 401
    assert w.runs == 0 and not w.busy
