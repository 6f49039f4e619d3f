import json
import math

import synref

TINY = json.dumps(
    {
        "data": {
            "world": {"grid_h": 8, "grid_w": 8, "min_objects": 2, "max_objects": 3},
            "expressions_per_object": 2,
            "datasets": [
                {"name": "a", "dialect": "base", "pool": "p", "scene_count": 6},
                {"name": "b", "dialect": "plus", "pool": "p", "scene_count": 6},
            ],
        }
    }
)


def test_iou_analytic():
    assert math.isclose(synref.iou(0, 0, 2, 2, 1, 1, 3, 3), 1.0 / 7.0)
    assert synref.iou(0, 0, 2, 2, 0, 0, 2, 2) == 1.0
    assert synref.iou(0, 0, 2, 2, 5, 5, 7, 7) == 0.0


def test_contrastive_equal_terms():
    z = [1.0, 0.0]
    loss = synref.contrastive_loss(z, [z, z], [z] * 6, tau=0.1)
    assert math.isclose(loss, -math.log(2.0 / 8.0), abs_tol=1e-9)


def test_datasets_deterministic():
    first = synref.datasets_jsonl(TINY, seed=3)
    again = synref.datasets_jsonl(TINY, seed=3)
    other = synref.datasets_jsonl(TINY, seed=4)
    assert set(first) == {"a", "b"}
    assert first == again
    assert first["a"] != other["a"]
    assert first["a"].count("\n") > 1


def test_cli_gen_data(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(TINY)
    out = tmp_path / "out"
    assert synref.run(["gen-data", str(cfg), "--out", str(out)]) == 0
    assert (out / "a.jsonl").exists()
    assert (out / "b.jsonl").exists()
    assert (out / "config.resolved.json").exists()


def test_cli_error_codes():
    assert synref.run(["frobnicate"]) == 2
    assert synref.run(["gen-data", "--override", "bogus.key=1"]) == 2
