"""Smoke test for the driftfollow_py extension.

Build the module first (see README), then run:  python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import driftfollow_py as df  # noqa: E402


def main():
    p = df.init_params(1, 0)
    assert len(p) == 26, len(p)
    assert df.init_params(64, 42).values == df.init_params(64, 42).values
    assert df.init_params(64, 42).values != df.init_params(64, 43).values

    rows = [[5.0, 6.0, 1.0, 20.0]] * 10
    big = df.init_params(8, 3)
    a = big.forward(rows)
    assert abs(a) < 8.0
    g1 = big.backward(rows, 1.0)
    g2 = big.backward(rows, 2.0)
    assert all(abs(2 * x - y) < 1e-15 for x, y in zip(g1, g2))

    value, grad = df.penalty([1.0, 1.0], [1.0, 2.0], [0.0, 0.0], "fisher", 2.0)
    assert value == 3.0 and grad == [2.0, 4.0], (value, grad)

    assert abs(df.forgetting_score(23.01, 81.35) - 253.5) < 0.5
    assert abs(df.idm_accel(0.0, 0.0, 1e9) - 1.0) < 1e-6
    assert abs(df.percentile([1, 2, 3, 4, 5, 6, 7, 8, 9], 33.3) - 3.664) < 1e-12

    events = []
    for regime in ("low", "mid", "high"):
        events += df.generate_events(regime, 8, 0.1, 5)
    assert all(e.mean_fv_speed() > 9 for e in events if e.event_id.startswith("high"))
    tasks, (lower, upper) = df.split_tasks(events, 5)
    assert sum(len(t) for t in tasks) == len(events)
    assert lower < upper

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ev.jsonl")
        df.save_events(events, path)
        back = df.load_events(path)
        assert [e.spacing for e in back] == [e.spacing for e in events]

        cfg = {"hidden_size": "4", "epochs": "1", "batch_size": "4", "importance_cap": "200"}
        cks = df.run_curriculum(tasks, "ewc", cfg)
        assert [c.stage for c in cks] == [1, 2, 3]
        ck_path = os.path.join(d, cks[-1].file_name)
        cks[-1].save(ck_path)
        assert df.load_checkpoint(ck_path).params.values == cks[-1].params.values
        csv = df.stage_matrix_csv(cks, tasks)
        assert len(csv.strip().splitlines()) == 1 + 6
        assert all(math.isfinite(float(x)) for x in csv.splitlines()[1].split(",")[3:])

        out = os.path.join(d, "gen.jsonl")
        assert df.run_cli(["generate", "--count", "6", "--out", out]) == 0
        assert df.run_cli(["generate", "--count", "0"]) == 2

    print("driftfollow_py smoke test passed")


if __name__ == "__main__":
    main()
