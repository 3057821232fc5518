import gzip
import json
import math
import struct

import numpy as np
import pytest

from tenscirc import (
    FormatError,
    GuardError,
    InputError,
    build_qg,
    compile_circuit,
    fold,
    forward,
    load_circuit,
    save_circuit,
)
from tenscirc.bench import bench, estimate_footprint, require_within_guard
from tenscirc.data import (
    MixtureGenerator,
    load_csv,
    load_dense,
    load_idx,
    save_csv,
    save_dense,
    save_idx,
    split_dataset,
    synth,
)
from tenscirc.families import Categorical, Gaussian

# -- IDX -------------------------------------------------------------------------------

def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(2, 3, 4)).astype(np.uint8)
    labels = np.array([7, 1], dtype=np.uint8)
    save_idx(tmp_path / "x.idx", imgs)
    save_idx(tmp_path / "y.idx", labels)
    ds = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert ds.image_shape == (3, 4) and ds.num_vars == 12
    assert ds.values.reshape(2, 3, 4).astype(np.uint8).tobytes() == imgs.tobytes()
    np.testing.assert_array_equal(ds.labels, [7, 1])
    assert all(f == Categorical(256) for f in ds.families)


def test_idx_canonical_train_header(tmp_path):
    path = tmp_path / "train-images-idx3-ubyte.gz"
    with gzip.open(path, "wb", compresslevel=1) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 60000, 28, 28))
        fh.write(bytes(60000 * 28 * 28))
    ds = load_idx(path)
    assert len(ds) == 60000 and ds.image_shape == (28, 28) and ds.num_vars == 784


def test_idx_truncated_names_byte_counts(tmp_path):
    path = tmp_path / "x.idx"
    save_idx(path, np.zeros((2, 2, 2), dtype=np.uint8))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match=f"expected {len(raw)} bytes.*got {len(raw) - 3}"):
        load_idx(path)


def test_idx_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "x.idx"
    path.write_bytes(struct.pack(">IIII", 0x00000802, 1, 1, 1) + b"\x00")
    with pytest.raises(FormatError, match="offset 0"):
        load_idx(path)


# -- CSV -------------------------------------------------------------------------------

def test_csv_reals_become_gaussian(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,c\n0.5,1.25,-3\n2,0.1,7.5\n")
    ds = load_csv(path)
    assert ds.num_vars == 3 and len(ds) == 2
    assert all(isinstance(f, Gaussian) for f in ds.families)
    np.testing.assert_array_equal(ds.values, [[0.5, 1.25, -3], [2, 0.1, 7.5]])


def test_csv_non_numeric_cell_names_row_and_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("1,2\n3,x\n")
    with pytest.raises(FormatError, match="row 2, column 2"):
        load_csv(path)


def test_csv_categorical_schema_and_missing(tmp_path):
    path = tmp_path / "d.csv"
    save_csv(path, np.array([[0.0, 2.0], [np.nan, 1.0]]))
    ds = load_csv(path, schema=["categorical:3", "categorical:3"])
    np.testing.assert_array_equal(ds.values, [[0, 2], [-1, 1]])
    with pytest.raises(InputError):
        load_csv(path, schema=["categorical:2", "categorical:2"])


# -- synthetic mixtures -------------------------------------------------------------------

def test_synth_is_deterministic():
    gen = MixtureGenerator.random(8, 3, 2, 0.3, seed=4)
    a, b = synth(gen, 500, seed=9), synth(gen, 500, seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.meta == b.meta
    assert not np.array_equal(a.values, synth(gen, 500, seed=10).values)


def test_synth_entropy_within_bracket_and_monte_carlo():
    gen = MixtureGenerator.random(12, 3, 2, 0.3, seed=1)
    ds = synth(gen, 10, seed=0)
    h = ds.meta["entropy_nats"]
    lo, hi = ds.meta["entropy_bracket_nats"]
    assert lo <= h <= hi
    mc = gen.entropy_mc(10**6, seed=3)
    # the MC standard error of -mean log p is std(log p)/sqrt(n); five of them is generous
    std = float(np.std(gen.log_prob(gen.sample(100_000, seed=99))))
    assert abs(mc - h) <= 5 * std / math.sqrt(10**6)
    assert ds.meta["entropy_bpd"] == pytest.approx(h / (12 * math.log(2)), rel=1e-12)


def test_split_dataset_sizes_and_disjointness():
    gen = MixtureGenerator.random(4, 2, 3, 1.0, seed=0)
    ds = synth(gen, 100, seed=0)
    ds.values = np.arange(100)[:, None] % 3 * np.ones((1, 4), dtype=np.int64)
    tr, va, te = split_dataset(ds, (60, 20, 20), seed=1)
    assert (len(tr), len(va), len(te)) == (60, 20, 20)
    assert (tr.split, va.split, te.split) == ("train", "valid", "test")
    with pytest.raises(InputError):
        split_dataset(ds, (90, 20, 0))


# -- dense tensors ------------------------------------------------------------------------

def test_dense_round_trip(tmp_path):
    t = np.random.default_rng(0).normal(size=(2, 3, 4))
    save_dense(tmp_path / "t.bin", t)
    assert load_dense(tmp_path / "t.bin").tobytes() == t.tobytes()
    assert (tmp_path / "t.bin").read_bytes().startswith(b"dims: 2,3,4\n")


def test_dense_truncated(tmp_path):
    save_dense(tmp_path / "t.bin", np.zeros((2, 2)))
    raw = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_dense(tmp_path / "t.bin")


# -- circuit files -------------------------------------------------------------------------

@pytest.mark.parametrize("layer", ["tucker", "cp", "cpt", "cps", "cpxs"])
def test_circuit_round_trip_is_bit_exact(tmp_path, layer):
    c = compile_circuit(build_qg(3, 3), 3, layer, "categorical:4", folded=layer in ("cps", "cpxs"), seed=2)
    save_circuit(c, tmp_path / "c.json")
    back = load_circuit(tmp_path / "c.json")
    X = np.random.default_rng(0).integers(0, 4, size=(20, 9))
    assert forward(back, X).tobytes() == forward(c, X).tobytes()
    for name, p in c.params.items():
        assert back.params[name].value.tobytes() == p.value.tobytes()
        assert back.params[name].reparam == p.reparam


def test_folded_circuit_round_trip_keeps_groups(tmp_path):
    fc = fold(compile_circuit(build_qg(4, 4), 2, "cp", seed=0))
    save_circuit(fc, tmp_path / "c.json")
    back = load_circuit(tmp_path / "c.json")
    assert back.group_table() == fc.group_table()
    for g_old, g_new in zip(fc.groups, back.groups):
        np.testing.assert_array_equal(g_old.routing, g_new.routing)


def test_unknown_layer_kind_named(tmp_path):
    c = compile_circuit(build_qg(2, 2), 2, "cp")
    save_circuit(c, tmp_path / "c.json")
    obj = json.loads((tmp_path / "c.json").read_text())
    obj["layers"][5]["kind"] = "convolution"
    (tmp_path / "c.json").write_text(json.dumps(obj))
    with pytest.raises(FormatError, match="convolution"):
        load_circuit(tmp_path / "c.json")


def test_version_mismatch(tmp_path):
    c = compile_circuit(build_qg(2, 2), 2, "cp")
    save_circuit(c, tmp_path / "c.json")
    obj = json.loads((tmp_path / "c.json").read_text())
    obj["format_version"] = 99
    (tmp_path / "c.json").write_text(json.dumps(obj))
    with pytest.raises(FormatError, match="version"):
        load_circuit(tmp_path / "c.json")


# -- benchmark harness ---------------------------------------------------------------------

@pytest.mark.parametrize("K", [4, 8, 16])
def test_bench_parameter_counts_follow_block_formulas(K):
    tucker = bench(f"QG-Tucker-{K}", 4, 4, batch_size=8, reps=1, warmup=0, num_categories=2)
    cp = bench(f"QG-CP-{K}", 4, 4, batch_size=8, reps=1, warmup=0, num_categories=2)
    assert tucker.status == cp.status == "ok"
    assert tucker.params > cp.params
    rg = build_qg(4, 4)
    for kind, rep in (("tucker", tucker), ("cp", cp)):
        assert estimate_footprint(rg, K, kind, 8, 2)["params"] == rep.params


def test_bench_reports_oom_row_where_cp_runs():
    tucker = bench("QG-Tucker-512", 8, 8, batch_size=32, reps=1, warmup=0, num_categories=2)
    assert tucker.status == "oom" and math.isnan(tucker.forward_ms)
    cp = bench("QG-CP-64", 8, 8, batch_size=32, reps=1, warmup=0, num_categories=2)
    assert cp.status == "ok" and cp.forward_ms > 0
    with pytest.raises(GuardError):
        require_within_guard(build_qg(8, 8), 512, "tucker", 32)


class _JitteryClock:
    """Fake ``perf_counter``: each timed call takes 10 ms +-10%, every 7th call 3x longer."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.now = 0.0
        self.calls = 0
        self.started = False

    def __call__(self):
        if self.started:
            self.calls += 1
            slow = 3.0 if self.calls % 7 == 0 else 1.0
            self.now += 0.010 * slow * self.rng.uniform(0.9, 1.1)
        self.started = not self.started
        return self.now


@pytest.mark.parametrize("seed", range(5))
def test_bench_median_is_stable(monkeypatch, seed):
    from tenscirc import bench as bench_module

    medians = {}
    for reps in (1, 20):
        monkeypatch.setattr(bench_module.time, "perf_counter", _JitteryClock(seed))
        medians[reps] = bench_module._median_ms(lambda: None, reps, warmup=2)
    assert abs(medians[1] - medians[20]) <= 0.2 * medians[20]
    assert medians[20] == pytest.approx(10.0, rel=0.1)


def test_bench_reports_real_timings():
    rep = bench("QG-CP-8", 4, 4, batch_size=64, reps=3, warmup=1, num_categories=2)
    assert rep.status == "ok" and rep.reps == 3
    assert 0 < rep.forward_ms < rep.forward_backward_ms
    assert set(rep.as_row()) >= {"nomenclature", "forward_ms", "est_host_bytes", "params", "status"}


def test_bench_time_grows_with_batch():
    small = bench("QG-CP-32", 8, 8, batch_size=512, reps=15, warmup=3, num_categories=2, backward=False)
    large = bench("QG-CP-32", 8, 8, batch_size=1024, reps=15, warmup=3, num_categories=2, backward=False)
    assert 2.0 * 0.7 <= large.forward_ms / small.forward_ms <= 2.0 * 1.3
