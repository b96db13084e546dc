"""Smoke test for the streamal Python extension.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/streamal-*.whl
"""

import json
import math
import tempfile

import streamal


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    cfg = streamal.default_config()
    assert "gamma" in cfg

    csv = streamal.generate_stream("dim = 6\nn_tasks = 2\nframes_per_demo = 10\n", seed=1)
    assert csv.startswith("task_id,class_id,frame_idx,binary_label,f0,")
    assert csv == streamal.generate_stream("dim = 6\nn_tasks = 2\nframes_per_demo = 10\n", seed=1)

    assert close(streamal.ece([1.0, 0.0], [True, False]), 0.0)
    assert close(streamal.auc([0.1, 0.9, 0.8, 0.2], [False, True, True, False]), 1.0)
    assert close(streamal.query_success_rate([True, False], [False, True]), 1.0)
    assert close(streamal.normalized_entropy(0.5), 1.0)
    assert streamal.mcallester_bound(0.1, 5.0, 100, 0.05) > 0.1

    scores = streamal.bald_scores([[0.1, 0.5], [0.9, 0.5]])
    assert scores[0] > scores[1] and close(scores[1], 0.0)
    picks, joint = streamal.batchbald([[0.1, 0.5, 0.2], [0.9, 0.5, 0.8]], 2)
    assert picks[0] == 0 and len(joint) == 2

    f = streamal.LogOddsFilter(0.5)
    for _ in range(3):
        f.update(0.8)
    assert f.frames == 3 and close(f.log_odds, 3 * math.log(4.0))

    try:
        streamal.run("gama = 0.1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as d:
        report = json.loads(
            streamal.run("[scenario]\ndim = 8\nn_tasks = 2\nframes_per_demo = 20\n", d)
        )
        assert 0.0 <= report["aggregate"]["mean_precision"] <= 1.0
        clf = streamal.Classifier.load(f"{d}/checkpoints/task_001")
        x = [0.0] * clf.dim
        cls, p = clf.predict(x)
        assert cls in clf.class_ids() and 0.0 <= p <= 1.0
        assert len(clf.predict_all(x)) >= 1

    print("python smoke test passed")


if __name__ == "__main__":
    main()
