"""Smoke test for the pysentwhite extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/pysentwhite-*.whl
"""

import math
import os
import random
import tempfile

import pysentwhite as sw


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    # published arithmetic
    assert sw.format_x100(sw.average_rho([v / 100 for v in [68.68, 60.28, 61.94, 68.47, 67.31, 74.82, 72.82]])) == "67.76"
    assert sw.format_delta(0.6297, 0.6777) == "62.97 → 67.77 (+4.80)"

    # pooling and combination
    tokens = [[[1.0, 0.0], [3.0, 2.0]], [[0.0, 4.0], [2.0, 0.0]]]
    assert sw.pool_sentence(tokens, 0, "cls") == [1.0, 0.0]
    assert sw.pool_sentence(tokens, 0, "avg") == [2.0, 1.0]
    assert sw.combine_layers({1: [1.0, 2.0], 12: [3.0, 6.0]}, [1, 12]) == [2.0, 4.0]

    # correlations
    assert close(sw.spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]), 1.0)
    assert close(sw.spearman_rho([1, 2, 2, 3], [3, 2, 2, 1]), -1.0)
    assert close(sw.cosine_similarity([1.0, 0.0], [0.0, 2.0]), 0.0)

    # whitening gives identity scatter and survives save/load
    rng = random.Random(5)
    rows = [[rng.gauss(0, 1) * (i + 1) for i in range(4)] for _ in range(50)]
    t = sw.fit_whitening(rows)
    white = t.apply(rows)
    for a in range(4):
        for b in range(4):
            dot = sum(r[a] * r[b] for r in white)
            assert close(dot, 1.0 if a == b else 0.0, 1e-6), (a, b, dot)

    config = sw.PipelineConfig("avg", [1, 2], True)
    assert str(config) == "token=AVG, layer=L1+L2, whitening=T"

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.wht")
        t.save(path)
        again = sw.WhiteningTransform.load(path)
        assert again.apply(rows) == white

        # a tiny file where gold is the layer-1 AVG cosine
        records = []
        for sid in range(30):
            n_tok = rng.randint(1, 5)
            layers = [[[rng.gauss(0, 1) for _ in range(3)] for _ in range(n_tok)] for _ in range(3)]
            records.append((sid, layers))
        whb = os.path.join(d, "tiny.whb")
        sw.write_hidden_states(whb, records)
        info = sw.inspect(whb)
        assert info["records"] == 30 and info["num_layers"] == 3 and info["kind"] == "TOKENS", info

        def avg(sid):
            return sw.pool_sentence(records[sid][1], 1, "avg")

        tsv = os.path.join(d, "tiny.tsv")
        with open(tsv, "w") as f:
            for i in range(0, 30, 2):
                gold = 2.5 * (1 + sw.cosine_similarity(avg(i), avg(i + 1)))
                f.write(f"{gold}\ts{i}\ts{i + 1}\n")
            for i in range(1, 29, 2):
                gold = 2.5 * (1 + sw.cosine_similarity(avg(i), avg(i + 1)))
                f.write(f"{gold}\ts{i}\ts{i + 1}\n")
        rho = sw.evaluate(whb, tsv, sw.PipelineConfig("avg", [1]))
        assert sw.format_x100(rho) == "100.00", rho
        ids, emb = sw.embed_file(whb, sw.PipelineConfig("cls", [2], False))
        assert ids == list(range(30)) and len(emb[0]) == 3

        try:
            sw.evaluate(whb, tsv, sw.PipelineConfig("avg", [7]))
        except ValueError as e:
            assert "layer out of range" in str(e)
        else:
            raise AssertionError("expected a layer error")

    assert not math.isnan(rho)
    print("pysentwhite smoke test passed")


if __name__ == "__main__":
    main()
