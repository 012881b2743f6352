"""Smoke test for the `sentinel` extension module.

Build and install first, e.g. `maturin build -m crates/py/Cargo.toml` and
`pip install` the wheel, then run `python crates/py/python/smoke_test.py`.
"""

import hashlib
import json
import tempfile
from pathlib import Path

import sentinel


def digest(name: str) -> str:
    return hashlib.sha256(name.encode()).hexdigest()


def image(name: str, quality: float = 0.9) -> dict:
    return {
        "id": name,
        "digest": digest(name),
        "width": 1920,
        "height": 1080,
        "quality_score": quality,
    }


def check_functions() -> None:
    assert sentinel.edit_distance("ABCO123", "ABC0123") == 1
    assert sentinel.edit_distance("GH345", "GHI3456") == 2
    assert abs(sentinel.cer([("ABCO123", "ABC0123"), ("GH345", "GHI3456"), ("X1", "X1")]) - 3 / 21) < 1e-12
    assert abs(sentinel.combine(0.9, 0.3, 1.0) - 0.63) < 1e-12
    assert [sentinel.route(c) for c in (0.96, 0.82, 0.45)] == ["auto_accept", "human_review", "auto_reject"]
    assert sentinel.lora_param_count(18, 7, 2048, 16) == 8257536
    t, p = sentinel.paired_t_test([0.02, 0.01, 0.03, 0.00, 0.02])
    assert abs(t - 3.138) < 1e-3 and abs(p - 0.0175) < 1e-3
    e, bins = sentinel.ece([(0.8, False)])
    assert e == 0.8 and len(bins) == 10
    state = {"pending_count": 500, "oldest_pending_at": None, "baseline_accuracy": None, "current_accuracy": None}
    assert sentinel.should_train(state, "2026-01-01T00:00:00Z") == "buffer_full"
    report = sentinel.evaluate_gate([0.0] * 20, [1.0] * 8 + [0.0] * 12, 0.95, 0.94)
    assert report["decision"] == "deploy", report


def check_pipeline(tmp: Path) -> None:
    script = {f"{digest('smoke')}/plate_recognition": {"text": "ABC1234", "token_probs": [0.8]}}
    bootstrap = tmp / "bootstrap.json"
    bootstrap.write_text(json.dumps(script))
    p = sentinel.Pipeline({"data_dir": str(tmp / "state"), "bootstrap_script": str(bootstrap)})
    assert p.active_version() == 1
    rec = p.recognize({"image": image("smoke"), "at": "2026-01-01T00:00:00Z"})
    assert rec["routing"] == "human_review", rec["routing"]
    assert rec["answers"]["plate_recognition"]["value"] == "ABC1234"
    assert p.review_queue()["items"][0]["id"] == rec["id"]
    out = p.correct(rec["id"], {"plate_recognition": "ABC1235"}, at="2026-01-01T00:01:00Z")
    assert out["pending_corrections"] == 1, out
    try:
        p.confirm(rec["id"])
    except sentinel.SentinelError as e:
        assert e.args[1] == 409
    else:
        raise AssertionError("second resolution should fail")
    m = p.metrics()
    assert m["predictions"] == 1 and m["pending_corrections"] == 1
    assert p.models()["current"] == 1


def check_simulation(tmp: Path) -> None:
    r = sentinel.simulate(str(tmp / "sim"), {"n_vehicles": 1500, "n_training": 300, "probe_size": 100})
    assert r["n_vehicles"] == 1500
    assert r["analytic_routing"]["within_3_sigma"]
    assert len(r["triggers"]) == len(r["jobs"]) >= 1


def main() -> None:
    check_functions()
    with tempfile.TemporaryDirectory() as d:
        check_pipeline(Path(d))
        check_simulation(Path(d))
    print("sentinel smoke test: ok")


if __name__ == "__main__":
    main()
