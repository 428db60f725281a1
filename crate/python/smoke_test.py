"""Smoke test for the edm_downscale extension module.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import edm_downscale as ed


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    c = ed.precond_coeffs(0.5)
    assert close(c["c_skip"], 0.5)
    assert close(c["c_out"], 0.5 / math.sqrt(2))
    assert close(ed.loss_weight(0.5) * c["c_out"] ** 2, 1.0)

    levels = ed.edm_schedule(128)
    assert len(levels) == 128 and levels[0] == 80.0 and levels[-1] == 0.002
    assert all(a > b for a, b in zip(levels, levels[1:]))

    assert ed.crps_ensemble([1.5], 1.0) == 0.5
    assert close(ed.skill_score(0.5, 1.0), 0.5)

    coarse = ed.Grid(52.0, 4.0, -0.2, 0.2, 4, 4)
    fine = ed.Grid(51.9, 4.1, -0.05, 0.05, 9, 9)
    data = [float(i + 2 * j) for i in range(4) for j in range(4)]
    f = ed.Field(coarse, [("t2m", "K")], data)
    up = f.upsample(fine)
    assert up.shape == (9, 9, 1) and up.channels == ["t2m"]
    assert up.smooth(0.0).data() == up.data()
    try:
        ed.Field(coarse, ["t2m"], data[:-1])
    except ValueError:
        pass
    else:
        raise AssertionError("short data accepted")

    names = [name for name, _ in ed.list_checks()]
    for name in ("coefficients", "schedule", "crps", "tweedie", "euler", "spectral"):
        assert name in names
        passed, detail = ed.run_check(name)
        assert passed, detail

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        manifest = ed.gen_dataset(str(root / "data"), fine=16, count=12, test_count=2, stations=4, seed=3)
        assert manifest["task"] == "gaussian"
        assert ed.read_manifest(str(root / "data")) == manifest
        code = ed.run_cli(
            ["train", "--dataset", str(root / "data"), "--out", str(root / "ckpt"), "--steps", "3", "--seed", "3"]
        )
        assert code == 0
        ckpt = ed.read_checkpoint(str(root / "ckpt" / "checkpoint.edp"))
        assert ckpt["meta"]["steps"] == 3 and ckpt["parameters"] > 0
        assert ed.run_cli(["train", "--dataset", str(root / "missing"), "--out", str(root / "x")]) == 2

    print("edm_downscale smoke test passed")


if __name__ == "__main__":
    main()
