import json

import pytest

from utils.errors import InputError
from utils.manifest import MANIFEST_NAME, RunManifest, compare_checksums
from utils.run_store import RunStore
from utils.scheduler import AGGREGATION, NONE, SEPARATION, TraceRecord


def _manifest(layout_id="overlap", seed=0):
    return RunManifest(
        layout_id=layout_id,
        seed=seed,
        config={"guidance": {"m": 10, "n": 12}},
        layout={"id": layout_id, "prompt": ["a"], "boxes": [[0, 0, 1, 1]]},
        mode="two-stage",
    )


@pytest.fixture
def store(tmp_path):
    store = RunStore(f"sqlite:///{tmp_path / 'registry.db'}")
    yield store
    store.close()


def test_add_and_get_run(store):
    run_id = store.add_run(_manifest(), "/runs/overlap")
    run = store.get_run(run_id)
    assert run["layout_id"] == "overlap"
    assert run["run_dir"] == "/runs/overlap"
    assert run["manifest"] == _manifest().to_dict()
    assert store.get_run(run_id + 100) is None


def test_list_runs_newest_first(store):
    first = store.add_run(_manifest("a"))
    second = store.add_run(_manifest("b", seed=3))
    third = store.add_run(_manifest("a", seed=7))
    assert [r["id"] for r in store.list_runs()] == [third, second, first]
    assert [r["seed"] for r in store.list_runs(layout_id="a")] == [7, 0]


def test_trace_comes_back_in_execution_order(store):
    run_id = store.add_run(_manifest())
    records = [
        TraceRecord(1, NONE, None, None, {"0->1": 0.1}, [0.5], [0.2]),
        TraceRecord(3, AGGREGATION, 0.8, 2.0, {"0->1": 0.4}, [0.4], [0.3]),
        TraceRecord(2, SEPARATION, 0.5, 1.0, {"0->1": 0.3}, [0.45], [0.25]),
    ]
    assert store.add_trace(run_id, records) == 3
    trace = store.get_trace(run_id)
    assert [r.t for r in trace] == [3, 2, 1]
    assert trace[0] == records[1]
    assert trace[2].loss is None
    assert store.get_trace(run_id + 1) == []


def test_default_url_comes_from_environment(tmp_path):
    store = RunStore()
    try:
        store.add_run(_manifest())
    finally:
        store.close()
    assert (tmp_path / "runs.db").exists()


def test_manifest_records_only_listed_outputs(tmp_path):
    (tmp_path / "latent").mkdir()
    channel = tmp_path / "latent" / "channel_0.tolog"
    channel.write_bytes(b"abc")
    trace = tmp_path / "trace.jsonl"
    trace.write_text("{}\n")
    (tmp_path / "maps" / "step_50").mkdir(parents=True)
    (tmp_path / "maps" / "step_50" / "concept_0.tolog").write_bytes(b"left over")
    manifest = _manifest()
    manifest.record_outputs(tmp_path, [trace, channel])
    manifest.write(tmp_path)
    assert manifest.outputs == ["latent/channel_0.tolog", "trace.jsonl"]
    assert set(manifest.checksums) == set(manifest.outputs)

    loaded = RunManifest.load(tmp_path / MANIFEST_NAME)
    assert loaded == manifest
    manifest.record_outputs(tmp_path, [trace, tmp_path / MANIFEST_NAME])
    assert manifest.outputs == ["trace.jsonl"]


def test_broken_manifests(tmp_path):
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"layout_id": "x", "seed": 1}))
    with pytest.raises(InputError):
        RunManifest.load(partial)
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{nope")
    with pytest.raises(InputError):
        RunManifest.load(garbage)


def test_compare_checksums():
    expected = {"a": "1", "b": "2", "c": "3"}
    assert compare_checksums(expected, dict(expected)) == []
    assert compare_checksums(expected, {"a": "1", "b": "9", "d": "4"}) == ["b", "c", "d"]
