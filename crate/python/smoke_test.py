#!/usr/bin/env python3
"""Smoke test for the spherecal extension module.

Build and stage the module first:

    cargo build -p spherecal-py --release
    cp target/release/libspherecal.so python/spherecal.so

then run `python3 python/smoke_test.py`.
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import spherecal as sc

SPEC = """
name = "tiny"
seed = 5

[[dataset]]
family = "identity"
train = 24
val = 6
test = 6
gallery = 16
latent_dim = 6
noise = 0.05

[[dataset]]
family = "rotation"
train = 16
val = 6
test = 6
gallery = 16
latent_dim = 6
noise = 0.05
"""

RUN_CONFIG = """
name = "tiny-run"
benchmark = "{benchmark}"

[train]
seed = 7
epochs = 2
batch_size = 8
learning_rate = 1e-3
tau = 0.1
d_model = 12
rank = 3
hidden = 10
"""


def close(a, b, tol):
    return abs(a - b) < tol


def check_geometry():
    v = sc.normalize([3.0, 4.0])
    assert close(v[0], 0.6, 1e-12) and close(v[1], 0.8, 1e-12)

    u = [1.0, 0.0, 0.0]
    w = [0.0, 1.0, 0.0]
    assert close(sc.angle(u, w), math.pi / 2, 1e-12)

    mid = sc.slerp(u, w, 0.5)
    assert close(sum(x * x for x in mid), 1.0, 1e-12)
    assert close(sc.angle(u, mid), math.pi / 4, 1e-9)
    assert close(sc.angle(mid, w), math.pi / 4, 1e-9)


def check_losses_and_sampling():
    # All pairwise similarities equal -> loss is exactly ln N.
    loss = sc.info_nce([[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]], 0.5)
    assert close(loss, math.log(2.0), 1e-9)

    # Worked sampling example: G=[1,2], N=[10,20], eta=gamma=1 gives scores
    # [10e, 20e^2].
    p = sc.sampling_probabilities([1.0, 2.0], [10, 20], 1.0, 1.0, 0.0)
    s0, s1 = 10 * math.e, 20 * math.e**2
    assert close(p[0], s0 / (s0 + s1), 1e-12)
    assert close(p[0], 0.1553, 1e-4)
    assert close(sum(p), 1.0, 1e-12)

    assert close(sc.update_ema(2.0, 1.0, 0.9), 1.9, 1e-15)


def check_calibrator_identity():
    d, rank = 6, 2
    q0 = sc.normalize([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    a = [0.0] * (d * rank)
    for j in range(rank):
        a[j * rank + j] = 1.0  # A = [I_rank; 0]
    b = [0.0] * (rank * d)
    out = sc.calibrate(q0, a, b, rank, 0.7)
    # Zero up-projection leaves the proposal at q0, so the query cannot move.
    assert max(abs(x - y) for x, y in zip(out.q, q0)) < 1e-12
    # The cosine clamp bounds arccos away from exactly 0.
    assert out.omega < 1e-3
    assert close(out.ortho_loss, 0.0, 1e-12)
    assert close(out.reg_loss, float(rank), 1e-12)


def check_pipeline():
    with tempfile.TemporaryDirectory() as td:
        spec_path = os.path.join(td, "spec.toml")
        with open(spec_path, "w") as f:
            f.write(SPEC)
        benchmark = sc.generate(os.path.join(td, "bench"), spec_path=spec_path)
        assert os.path.exists(benchmark)

        config_path = os.path.join(td, "run.toml")
        with open(config_path, "w") as f:
            f.write(RUN_CONFIG.format(benchmark=benchmark))

        run_a = sc.train(config_path, out=os.path.join(td, "a"))
        run_b = sc.train(config_path, out=os.path.join(td, "b"))
        assert run_a == run_b, "identical configs must reproduce bit-identical metrics"
        metrics = json.loads(run_a)
        assert metrics["schema"] == "metrics/v1"
        assert len(metrics["per_dataset"]) == 2

        eval_json = sc.evaluate(
            os.path.join(td, "a", "checkpoint.bin"), benchmark, split="test"
        )
        assert json.loads(eval_json)["macro_mean_recall"] == metrics["macro_mean_recall"]

        text = sc.report(os.path.join(td, "a"))
        assert "== training" in text


def check_gradcheck():
    report = json.loads(sc.gradcheck())
    assert all(c["passed"] for c in report["checks"]), report
    names = {c["op"] for c in report["checks"]}
    assert {"slerp", "info_nce", "full_loss"} <= names

    bad = json.loads(sc.gradcheck(corrupt_op="slerp"))
    failing = [c["op"] for c in bad["checks"] if not c["passed"]]
    assert failing == ["slerp"], failing


def main():
    check_geometry()
    check_losses_and_sampling()
    check_calibrator_identity()
    check_pipeline()
    check_gradcheck()
    print("smoke test passed")


if __name__ == "__main__":
    main()
