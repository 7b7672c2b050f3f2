import numpy as np
import pytest

from inper.datagen import (
    DomainSpec,
    default_domains,
    generate,
    leave_one_out,
    load_dataset,
    rasterize,
    read_tdf,
    save_dataset,
    tdf_bytes,
    tdf_from_bytes,
    write_tdf,
)
from inper.errors import FormatError, InvalidParameterError, NotFoundError
from inper.nnet import ConvNet, TrainConfig, accuracy, train


@pytest.fixture(scope="module")
def default_set():
    return generate(default_domains(), per_domain=500, seed=0)


class TestDomainSpec:
    def test_rejects_bad_values(self):
        with pytest.raises(InvalidParameterError):
            DomainSpec(1, gain=(1.0, 0.0, 1.0))
        with pytest.raises(InvalidParameterError):
            DomainSpec(1, leakage=1.0)
        with pytest.raises(InvalidParameterError):
            DomainSpec(1, texture="plaid")
        with pytest.raises(InvalidParameterError):
            DomainSpec(1, bias=(0.0, 0.0))

    def test_generate_preconditions(self):
        with pytest.raises(InvalidParameterError):
            generate([DomainSpec(1)])
        with pytest.raises(InvalidParameterError):
            generate([DomainSpec(1), DomainSpec(1)])


class TestRasterize:
    @pytest.mark.parametrize("shape", ["disk", "cross", "stripes", "ring"])
    def test_nonempty_and_binary(self, shape):
        m = rasterize(shape, 16, 16, 8)
        assert set(np.unique(m)) == {0.0, 1.0}
        assert 20 < m.sum() < 32 * 32 / 2

    def test_ring_is_disk_minus_core(self):
        assert rasterize("ring", 16, 16, 8).sum() < rasterize("disk", 16, 16, 8).sum()

    def test_unknown(self):
        with pytest.raises(InvalidParameterError):
            rasterize("star", 16, 16, 8)


class TestGenerate:
    def test_shapes_and_range(self, default_set):
        ds = default_set
        assert ds.images.shape == (2000, 3, 32, 32) and ds.images.dtype == np.float32
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.domain_ids == [1, 2, 3, 4]
        assert ds.manifest["seed"] == 0 and ds.manifest["format_version"] == 1

    def test_stratified(self, default_set):
        for d in (1, 2, 3, 4):
            counts = np.bincount(default_set.labels[default_set.domains == d], minlength=4)
            assert counts.tolist() == [125, 125, 125, 125]

    def test_deterministic(self):
        a = generate(default_domains(), per_domain=40, seed=5)
        b = generate(default_domains(), per_domain=40, seed=5)
        c = generate(default_domains(), per_domain=40, seed=6)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.images.tobytes() != c.images.tobytes()

    def test_gain_ratio(self):
        specs = [
            DomainSpec(1, gain=(1.0, 1.0, 1.0), leakage=0.0),
            DomainSpec(2, gain=(2.0, 1.0, 0.5), leakage=0.0),
        ]
        ds = generate(specs, per_domain=1000, seed=1)
        m1 = ds.images[ds.domains == 1].mean(axis=(0, 2, 3))
        m2 = ds.images[ds.domains == 2].mean(axis=(0, 2, 3))
        np.testing.assert_allclose(m2 / m1, [2.0, 1.0, 0.5], rtol=0.05)

    def test_no_leakage_means_independent_of_label(self):
        specs = [DomainSpec(i, gain=s.gain, bias=s.bias, texture=s.texture, contrast=s.contrast, leakage=0.0)
                 for i, s in enumerate(default_domains(), start=1)]
        ds = generate(specs, per_domain=2000, seed=2)
        for d in (1, 2, 3, 4):
            sel = ds.domains == d
            means = ds.images[sel].mean(axis=(2, 3))
            for c in range(3):
                r = np.corrcoef(ds.labels[sel], means[:, c])[0, 1]
                assert abs(r) < 0.05, (d, c, r)

    def test_leakage_shifts_class_style(self, default_set):
        sel = default_set.domains == 1
        means = default_set.images[sel].mean(axis=(2, 3))
        per_class = np.stack([means[default_set.labels[sel] == k].mean(axis=0) for k in range(4)])
        assert np.ptp(per_class, axis=0).max() > 0.01

    def test_style_identifies_domain(self, default_set):
        ds = default_set
        feats = np.concatenate([ds.images.mean(axis=(2, 3)), ds.images.std(axis=(2, 3))], axis=1)
        rng = np.random.default_rng(0)
        order = rng.permutation(len(ds))
        tr, te = order[:1500], order[1500:]
        d2 = ((feats[te, None, :] - feats[None, tr, :]) ** 2).sum(axis=2)
        pred = ds.domains[tr][d2.argmin(axis=1)]
        assert (pred == ds.domains[te]).mean() >= 0.9

    def test_shape_carries_class(self, default_set):
        ds = default_set
        rng = np.random.default_rng(0)
        order = rng.permutation(len(ds))
        tr, te = order[:1600], order[1600:]
        model = ConvNet(4, seed=0)
        train(model, ds.images[tr], ds.labels[tr], TrainConfig(steps=600))
        assert accuracy(model, ds.images[te], ds.labels[te]) >= 0.95


class TestLeaveOneOut:
    def test_partition(self, default_set):
        src, tgt = leave_one_out(default_set, 3)
        assert set(src.domains.tolist()) == {1, 2, 4}
        assert set(tgt.domains.tolist()) == {3}
        assert len(src) + len(tgt) == len(default_set)
        merged = np.concatenate([src.images, tgt.images])
        key = lambda a: np.sort(a.reshape(len(a), -1).sum(axis=1))  # noqa: E731
        np.testing.assert_array_equal(key(merged), key(default_set.images))

    def test_repeatable(self, default_set):
        a = leave_one_out(default_set, 2)[0]
        b = leave_one_out(default_set, 2)[0]
        assert a.images.tobytes() == b.images.tobytes()

    def test_unknown_domain(self, default_set):
        with pytest.raises(NotFoundError):
            leave_one_out(default_set, 9)


class TestTDF:
    def test_round_trip(self, tmp_path):
        t = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
        write_tdf(tmp_path / "t.tdf", t)
        back = read_tdf(tmp_path / "t.tdf")
        assert back.tobytes() == t.tobytes() and back.shape == t.shape

    def test_header_layout(self):
        data = tdf_bytes(np.zeros((2, 5), np.float32))
        assert data[:4] == b"TDF1" and data[4] == 1 and data[5] == 2
        assert int.from_bytes(data[6:10], "little") == 2 and int.from_bytes(data[10:14], "little") == 5
        assert len(data) == 14 + 40

    def test_rejections(self):
        data = tdf_bytes(np.ones((3, 3), np.float32))
        for bad in (b"TDF2" + data[4:], data[:4] + b"\x02" + data[5:], data[:-1], data[:7], data[:4] + b"\x01\x00"):
            with pytest.raises(FormatError):
                tdf_from_bytes(bad)
        with pytest.raises(FormatError):
            tdf_bytes(np.float32(1.0))

    def test_dataset_round_trip(self, tmp_path):
        ds = generate(default_domains(), per_domain=8, seed=3)
        save_dataset(ds, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert back.images.tobytes() == ds.images.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.domains, ds.domains)
        assert back.manifest == ds.manifest

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(NotFoundError):
            load_dataset(tmp_path / "nothing")
