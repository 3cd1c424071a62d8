"""Exercise the extension module end to end.

Build and install first:
    maturin develop -m crates/python/Cargo.toml --release
"""

import os
import random
import tempfile

import modulora_py as m


def check_pack():
    for bits in (2, 3, 4, 8):
        codes = [random.randrange(1 << bits) for _ in range(37)]
        words = m.pack(codes, bits)
        assert m.unpack(words, bits, len(codes)) == codes
    try:
        m.pack([1], 5)
    except ValueError:
        pass
    else:
        raise AssertionError("bits=5 accepted")


def check_quantizers():
    rng = random.Random(0)
    w = [[rng.gauss(0, 1) for _ in range(16)] for _ in range(8)]
    x = [[rng.gauss(0, 1) for _ in range(16)] for _ in range(64)]
    q = m.rtn(w, 4, group_size=8)
    assert (q.rows, q.cols, q.bits, q.group_size) == (8, 16, 4, 8)
    deq = q.dequantize()
    for code_row, w_row, d_row, r in zip(
        [q.codes()[i * 16:(i + 1) * 16] for i in range(8)], w, deq, range(8)
    ):
        for c, (wi, di) in enumerate(zip(w_row, d_row)):
            g = r * 2 + c // 8
            assert abs(q.scales[g] * code_row[c] + q.zeros[g] - di) < 1e-12
            assert abs(wi - di) <= q.scales[g] / 2 + 1e-9
    v = [1.0] * 16
    assert all(abs(a - sum(row)) < 1e-9 for a, row in zip(q.matvec(v), deq))
    o = m.optq(w, x, 3)
    r = m.rtn(w, 3)
    assert o.proxy_loss(w, x) <= r.proxy_loss(w, x)


def check_model():
    model = m.Model.random([16, 32, 16], bits=4, rank=4, seed=3)
    assert model.layer_shapes == [(32, 16), (16, 32)]
    frozen = model.frozen_hash
    base = model.forward([[0.5] * 16])
    report = model.finetune(steps=150, seed=3)
    assert report["schema"] == "modulora.train_report/1"
    assert report["frozen_hash_unchanged"]
    assert report["final_eval"]["mse"] < report["baseline"]["mse"]
    assert model.frozen_hash == frozen
    assert model.forward([[0.5] * 16]) != base

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.mlra")
        model.save(path)
        again = m.Model.load(path)
        assert again.to_bytes() == model.to_bytes()
        assert again.frozen_hash == frozen
        with open(path, "wb") as f:
            f.write(model.to_bytes()[:40])
        try:
            m.Model.load(path)
        except OSError as e:
            assert "truncated" in str(e)
        else:
            raise AssertionError("truncated checkpoint accepted")

    try:
        m.Model.random([16, 16], quantizer="optq")
    except ValueError:
        pass
    else:
        raise AssertionError("optq without calibration accepted")
    calibrated = m.Model.random([16, 16], quantizer="optq", calib=128, bits=3)
    assert calibrated.quantized(0).bits == 3


def check_memory():
    model = m.Model.random([4, 4, 8, 8], activation="identity")
    rows = {r["strategy"]: r for r in model.bench_memory()}
    assert rows["weight_materialize"]["peak_materialized_bytes"] == 512
    assert rows["row_materialize"]["peak_materialized_bytes"] == 64
    assert rows["quantizer_matvec"]["peak_materialized_bytes"] == 0
    assert all(r["passed"] for r in rows.values())
    assert m.expected_peak_bytes([(4, 4), (8, 8)], "weight") == 512


def check_bits():
    a = m.bench_bits(hidden=16, steps=10, seed=1)
    assert a == m.bench_bits(hidden=16, steps=10, seed=1)
    assert len(a["rows"]) == 3


if __name__ == "__main__":
    random.seed(0)
    for check in (check_pack, check_quantizers, check_model, check_memory, check_bits):
        check()
        print(f"ok {check.__name__}")
