"""Smoke test for the intent_py extension.

Build and install first, e.g.
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/intent_py-*.whl
then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile

import intent_py as ip


def main():
    assert len(ip.STRATEGIES) == 7 and "ENT_BALN" in ip.STRATEGIES
    assert ip.lambda_grid(0.2) == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]

    assert abs(ip.mask_entropy([[0.5, 0.5], [0.5, 0.5]]) - math.log(2)) < 1e-6
    p = [[0.125, 0.875], [0.25, 0.8125]]
    q = [[1 - v for v in row] for row in p]
    assert ip.balanced_entropy(p) == ip.balanced_entropy(q)
    assert ip.dice([[False, False]], [[False, False]]) == 1.0
    assert ip.dice([[True, False]], [[True, True]]) == 2 / 3

    pairs = ip.generate("shifted", 2, height=32, width=32, seed=1, intensity_bias=0.25, contrast=1.8)
    image, mask = pairs[0]
    assert len(image) == 32 and len(image[0]) == 32
    assert all(0.0 <= v <= 1.0 for row in image for v in row)

    net = ip.Network(depth=2, base_width=4, seed=0)
    tracked = net.forward(image, lam=1.0)
    assert len(tracked) == 32 and all(0.0 < v < 1.0 for row in tracked for v in row)

    net.reset_forward_count()
    report = ip.adapt(net, image, strategy="ENT_BALN", c=0.2, mask=mask)
    assert net.forward_count == 6
    assert abs(sum(report.weights) - 1.0) < 1e-6
    assert report.lambdas == ip.lambda_grid(0.2)
    assert 0.0 <= report.dice <= 1.0
    assert json.loads(report.to_json())["strategy"] == "ENT_BALN"

    degenerate = ip.adapt(net, image, strategy="AVERAGE", c=1.0)
    assert len(degenerate.weights) == 2

    with tempfile.TemporaryDirectory() as d:
        net.save(d + "/ckpt")
        again = ip.Network.load(d + "/ckpt")
        assert again.forward(image) == tracked

    try:
        ip.adapt(net, image, strategy="MEDIAN")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown strategy accepted")
    try:
        ip.Network.load("/nonexistent/ckpt")
    except OSError:
        pass
    else:
        raise AssertionError("missing checkpoint accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
