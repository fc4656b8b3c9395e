"""Smoke test for the fsl_engage_py extension module."""

import math
import tempfile
from pathlib import Path

import fsl_engage_py as fe


def main() -> None:
    assert fe.relabel(1, 2) == 5
    assert fe.decode(5) == (1, 2)
    assert [[fe.relabel(y, n) for y in (0, 1)] for n in range(3)] == [[0, 1], [2, 3], [4, 5]]
    assert fe.binarize(0.7, 0.5) == "high"
    assert fe.binarize(0.55, 0.5) == "discarded"
    assert fe.binarize(0.3, 0.5) == "low"

    model = fe.ProjectionModel(4, seed=3)
    r = model.project([0.5, -0.2, 0.1, 0.9])
    assert abs(math.sqrt(sum(v * v for v in r)) - 1.0) < 1e-12 or all(v == 0 for v in r)

    support = [[1.0, 0.0], [0.0, 1.0]]
    query = [[0.9, 0.1], [0.2, 0.8]]
    loss, d_support, d_query = fe.episode_loss("pn", support, [0, 1], query, [0, 1])
    assert loss > 0 and len(d_support) == 2 and len(d_query) == 2
    assert fe.predict(support, [0, 1], query) == [0, 1]

    mean, half = fe.mean_ci([0.0, 1.0] * 500)
    assert mean == 0.5 and abs(half - 0.031) < 5e-4
    assert fe.compare((0.80, 0.90), (0.85, 0.95)) == "on_par"
    assert all(passed for _, _, passed in fe.gradcheck(dim=3, trials=3))

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        n = fe.synth(str(data), seed=1)
        ds = fe.Dataset.load(str(data))
        assert len(ds) == n == 720 and ds.dim == 16
        assert len(ds.classes("test")) == 8

        ckpt = Path(tmp) / "pn.prj"
        best_epoch, best_val, epochs = fe.train(str(data), "pn", str(ckpt), seed=2)
        assert best_val >= 0.9, best_val
        accs = fe.evaluate(str(ckpt), str(data), episodes=50, seed=3)
        assert len(accs) == 50 and sum(accs) / len(accs) >= 0.9
        assert fe.ProjectionModel.load(str(ckpt)).dim == 16

        try:
            fe.train(str(data), "pn", str(ckpt), lr=0.02)
        except ValueError as e:
            assert "allow-lr" in str(e)
        else:
            raise AssertionError("lr guard did not fire")

        assert fe.run_cli(["gradcheck", "--dim", "3", "--trials", "2", "--out-dir", tmp]) == 0

    print(f"fsl_engage_py {fe.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
