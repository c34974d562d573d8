import csv
import gzip
import struct

import numpy as np
import pytest

from fedmac.datagen import (
    BadMagicError,
    CountMismatchError,
    PartitionError,
    SyntheticConfig,
    TruncatedFileError,
    dirichlet_partition,
    export_csv,
    gen_synthetic,
    label_histograms,
    load_idx,
    shard_partition,
    write_idx,
)
from fedmac.models import Batch


def _pooled(rng, n=2000, classes=10, dim=4):
    return Batch(rng.standard_normal((n, dim)), rng.integers(0, classes, n))


def _all_idx(ds):
    return np.concatenate([np.concatenate([c.train_idx, c.test_idx]) for c in ds.clients])


def _max_tv(h):
    return max(0.5 * np.abs(h[i] - h[j]).sum() for i in range(len(h)) for j in range(i + 1, len(h)))


def _mean_tv(h):
    n = len(h)
    return np.mean([0.5 * np.abs(h[i] - h[j]).sum() for i in range(n) for j in range(i + 1, n)])


def _pooled_hist(ds):
    counts = np.stack([np.bincount(np.concatenate([c.train.labels, c.test.labels]), minlength=ds.num_classes)
                       for c in ds.clients]).astype(float)
    return counts / counts.sum(axis=1, keepdims=True)


def test_synthetic_shapes_and_split():
    ds = gen_synthetic(SyntheticConfig(8, 0.5, 0.5, seed=3))
    assert ds.n_clients == 8 and ds.input_dim == 60 and ds.num_classes == 10
    for c in ds.clients:
        n = len(c.train) + len(c.test)
        assert 50 <= n <= 500
        assert abs(len(c.test) / n - 0.25) < 0.05
    assert "synthetic" in ds.provenance


def test_synthetic_deterministic_and_seed_sensitive():
    a = gen_synthetic(SyntheticConfig(5, 0.5, 0.5, seed=1))
    b = gen_synthetic(SyntheticConfig(5, 0.5, 0.5, seed=1))
    for ca, cb in zip(a.clients, b.clients):
        assert np.array_equal(ca.train.inputs, cb.train.inputs)
        assert np.array_equal(ca.test.labels, cb.test.labels)
    others = [gen_synthetic(SyntheticConfig(5, 0.5, 0.5, seed=s)) for s in range(2, 7)]
    assert all(not np.array_equal(o.clients[0].train.inputs[:1], a.clients[0].train.inputs[:1]) for o in others)


def test_synthetic_homogeneous_at_zero():
    ds = gen_synthetic(SyntheticConfig(2, 0.0, 0.0, samples_per_client=(1000, 1000), seed=0))
    p, q = _pooled_hist(ds) + 1e-12
    kl = float(np.sum(p * np.log(p / q)))
    assert kl < 0.05


def test_synthetic_heterogeneous_at_half():
    ds = gen_synthetic(SyntheticConfig(100, 0.5, 0.5, samples_per_client=(1000, 1000), seed=0))
    assert _max_tv(_pooled_hist(ds)) > 0.2


def test_synthetic_heterogeneity_monotone():
    means = []
    for ab in (0.0, 0.5, 1.0):
        tv = [_mean_tv(_pooled_hist(gen_synthetic(SyntheticConfig(10, ab, ab, samples_per_client=(400, 400), seed=s))))
              for s in range(5)]
        means.append(np.mean(tv))
    assert means[0] < means[1] < means[2]


def test_shard_two_labels_per_client(rng):
    data = _pooled(rng)
    ds = shard_partition(data, 20, 2, seed=0)
    for c in ds.clients:
        assert len(set(np.concatenate([c.train.labels, c.test.labels]).tolist())) == 2
    idx = _all_idx(ds)
    assert idx.size == np.unique(idx).size == len(data)
    sizes = [len(c.train) + len(c.test) for c in ds.clients]
    assert len(set(sizes)) > 1


def test_shard_single_client_gets_everything(rng):
    data = _pooled(rng, 300)
    ds = shard_partition(data, 1, 10, seed=0)
    assert np.array_equal(np.sort(_all_idx(ds)), np.arange(300))


def test_shard_infeasible(rng):
    data = _pooled(rng, 300)
    with pytest.raises(PartitionError):
        shard_partition(data, 3, 2, seed=0)
    with pytest.raises(PartitionError):
        shard_partition(data, 5, 11, seed=0)
    with pytest.raises(PartitionError):
        shard_partition(_pooled(rng, 30), 20, 2, seed=0)


def test_dirichlet_large_alpha_is_balanced(rng):
    data = _pooled(rng, 20000)
    ds = dirichlet_partition(data, 5, 1e6, seed=0)
    assert _max_tv(_pooled_hist(ds)) < 0.05


def test_dirichlet_partition_is_complete_and_deterministic(rng):
    data = _pooled(rng)
    a = dirichlet_partition(data, 10, 1.0, seed=4)
    b = dirichlet_partition(data, 10, 1.0, seed=4)
    idx = _all_idx(a)
    assert np.array_equal(np.sort(idx), np.arange(len(data)))
    assert np.array_equal(idx, _all_idx(b))
    changed = [not np.array_equal(idx, _all_idx(dirichlet_partition(data, 10, 1.0, seed=s))) for s in range(5, 10)]
    assert any(changed)
    with pytest.raises(PartitionError):
        dirichlet_partition(data, 10, 0.0, seed=0)


def test_label_histograms_rows_sum_to_one(rng):
    ds = shard_partition(_pooled(rng), 10, 2, seed=1)
    h = label_histograms(ds)
    np.testing.assert_allclose(h.sum(axis=1), 1.0)


def _write_pair(tmp_path, n_img=5, n_lab=5, gz=False):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n_img, 3, 4), dtype=np.uint8)
    labs = rng.integers(0, 10, n_lab, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(imgs, labs, ip, lp)
    if gz:
        for p in (ip, lp):
            p.with_suffix(".gz").write_bytes(gzip.compress(p.read_bytes()))
        ip, lp = ip.with_suffix(".gz"), lp.with_suffix(".gz")
    return imgs, labs, ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_idx_roundtrip(tmp_path, gz):
    imgs, labs, ip, lp = _write_pair(tmp_path, gz=gz)
    b = load_idx(ip, lp)
    assert b.inputs.shape == (5, 12)
    np.testing.assert_array_equal(b.inputs, imgs.reshape(5, 12) / 255.0)
    np.testing.assert_array_equal(b.labels, labs)
    assert b.inputs.min() >= 0 and b.inputs.max() <= 1


def test_idx_errors(tmp_path):
    _, _, ip, lp = _write_pair(tmp_path)
    raw = bytearray(lp.read_bytes())
    raw[3] = 0x07
    bad = tmp_path / "bad.idx"
    bad.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="bad magic"):
        load_idx(ip, bad)
    short = tmp_path / "short.idx"
    short.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError, match="truncated"):
        load_idx(short, lp)
    d = tmp_path / "mm"
    d.mkdir()
    _, _, ip2, lp2 = _write_pair(d, n_img=5, n_lab=4)
    with pytest.raises(CountMismatchError, match="count mismatch"):
        load_idx(ip2, lp2)
    header = tmp_path / "hdr.idx"
    header.write_bytes(struct.pack(">I", 0x803))
    with pytest.raises(TruncatedFileError):
        load_idx(header, lp)


def test_export_csv(tmp_path):
    ds = gen_synthetic(SyntheticConfig(2, 0.5, 0.5, input_dim=3, samples_per_client=(4, 6), seed=0))
    path = tmp_path / "d.csv"
    export_csv(ds, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["client_id", "split", "label", "x_0", "x_1", "x_2"]
    assert len(rows) - 1 == sum(len(c.train) + len(c.test) for c in ds.clients)
    first = rows[1]
    assert first[:2] == ["0", "train"]
    assert float(first[3]) == ds.clients[0].train.inputs[0, 0]
