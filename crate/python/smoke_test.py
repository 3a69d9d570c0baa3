"""Smoke test for the dgsa_py extension.

Build first:  cargo build --release -p dgsa-py
then run:     python3 python/smoke_test.py
"""
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension():
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libdgsa_py.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "dgsa_py.so"))
            sys.path.insert(0, tmp)
            import dgsa_py

            return dgsa_py
    sys.exit("libdgsa_py.so not found; run cargo build -p dgsa-py first")


def main():
    dg = import_extension()

    assert dg.lambda_init_schedule(1) == 0.2
    assert abs(dg.lambda_init_schedule(2) - (0.8 - 0.6 * math.exp(-0.3))) < 1e-12

    out = dg.rollout([[[1.0, 0.0], [0.0, 1.0]]] * 3)
    assert out == [[1.0, 0.0], [0.0, 1.0]], out

    cfg = dg.Config(
        os.path.join(ROOT, "configs", "text-tiny.cfg"),
        {"train.epochs": "1", "data.train_size": "64", "data.test_size": "32"},
    )
    assert cfg.get("model.variant") == "dgsa"

    errs = dg.gradcheck(cfg)
    assert all(e < 1e-4 for e in errs.values()), errs

    model, metrics = dg.train(cfg)
    print("metrics", metrics)
    assert 0.0 <= metrics["test_accuracy"] <= 1.0
    assert model.param_count() == dg.Model(cfg, seed=3).param_count()

    seq = int(cfg.get("model.max_seq_len"))
    row = [2 + (i % 10) for i in range(seq)]
    logits = model.logits([row, row])
    assert len(logits) == 2 and logits[0] == logits[1]

    layers, roll = model.rollout(row)
    assert len(layers) == int(cfg.get("model.depth"))
    assert all(abs(sum(r) - 1.0) < 1e-6 for r in roll)

    try:
        dg.Config(None, {"model.gate_layers": "2"})
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("gate_layers=2 accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
