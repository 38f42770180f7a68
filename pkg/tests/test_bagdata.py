import json

import numpy as np
import pytest

from coupledmil.bagdata import (
    Bag,
    Dataset,
    DatasetParseError,
    DatasetSchemaError,
    Instance,
    SyntheticSpec,
    datasets_equal,
    features_matrix,
    generate_synthetic,
    load_dataset,
    partition_pseudobags,
    save_dataset,
    split_dataset,
)
from coupledmil.metrics import roc_auc


def make_bag(bag_id="b0", k=5, d=3, seed=0, label=(1.0, 0.0)):
    rng = np.random.default_rng(seed)
    return Bag(
        id=bag_id,
        instances=[Instance(rng.standard_normal(d)) for _ in range(k)],
        label=np.array(label),
    )


class TestBagInvariants:
    def test_empty_bag_rejected(self):
        with pytest.raises(ValueError, match="no instances"):
            Bag(id="x", instances=[], label=np.array([1.0, 0.0]))

    def test_label_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            make_bag(label=(0.5, 0.4))

    def test_label_entries_in_unit_interval(self):
        with pytest.raises(ValueError, match="outside"):
            make_bag(label=(1.5, -0.5))


class TestSyntheticGenerator:
    def test_rho_one_makes_all_instances_positive(self):
        spec = SyntheticSpec(num_bags=1, instances_per_bag=5, d_raw=4,
                             rho=1.0, positive_fraction=1.0, seed=3)
        ds = generate_synthetic(spec)
        assert all(inst.latent_positive for inst in ds.bags[0].instances)

    def test_determinism(self):
        spec = SyntheticSpec(num_bags=12, instances_per_bag=(3, 9), d_raw=5, seed=42)
        assert datasets_equal(generate_synthetic(spec), generate_synthetic(spec))

    def test_zero_delta_instances_indistinguishable(self):
        # with delta=0 the blobs coincide; projecting on the (degenerate)
        # separation direction must score at chance level
        spec = SyntheticSpec(num_bags=200, instances_per_bag=50, d_raw=8,
                             rho=0.5, delta=0.0, noise=1.0, seed=10)
        ds = generate_synthetic(spec)
        scores, labels = [], []
        for bag in ds.bags:
            for inst in bag.instances:
                scores.append(inst.features.sum())
                labels.append(int(inst.latent_positive))
        assert len(scores) == 10_000
        assert abs(roc_auc(scores, labels) - 0.5) <= 0.05

    def test_mil_label_consistency(self):
        spec = SyntheticSpec(num_bags=60, instances_per_bag=(1, 12), d_raw=4,
                             rho=0.3, seed=6)
        ds = generate_synthetic(spec)
        pos_bags = 0
        for bag in ds.bags:
            has_positive = any(inst.latent_positive for inst in bag.instances)
            assert bool(np.argmax(bag.label)) == has_positive
            pos_bags += has_positive
        assert 0 < pos_bags < len(ds.bags)

    def test_positive_bag_instance_count(self):
        spec = SyntheticSpec(num_bags=4, instances_per_bag=50, d_raw=4,
                             rho=0.1, positive_fraction=1.0, seed=1)
        for bag in generate_synthetic(spec).bags:
            assert sum(inst.latent_positive for inst in bag.instances) == 5

    @pytest.mark.parametrize("field,value", [
        ("rho", 0.0), ("rho", 1.5), ("delta", -1.0), ("num_bags", 0),
        ("positive_fraction", 1.2), ("noise", -0.1), ("instances_per_bag", 0),
    ])
    def test_invalid_spec_fields(self, field, value):
        kwargs = dict(num_bags=5, instances_per_bag=4, d_raw=3, seed=0)
        kwargs[field] = value
        with pytest.raises(ValueError):
            SyntheticSpec(**kwargs)


class TestPartition:
    def test_balanced_sizes(self):
        bag = make_bag(k=10)
        part = partition_pseudobags(bag, 4, np.random.default_rng(0))
        assert sorted(len(g) for g in part.groups) == [2, 2, 3, 3]

    def test_single_group(self):
        bag = make_bag(k=7)
        part = partition_pseudobags(bag, 1, np.random.default_rng(0))
        assert part.groups == [list(range(7))]
        assert part.num_empty == 0

    def test_small_bag_flags_empty_groups(self):
        bag = make_bag(k=3)
        part = partition_pseudobags(bag, 4, np.random.default_rng(5))
        sizes = sorted(len(g) for g in part.groups)
        assert sizes == [0, 1, 1, 1]
        assert part.num_empty == 1

    def test_zero_groups_rejected(self):
        with pytest.raises(ValueError):
            partition_pseudobags(make_bag(), 0, np.random.default_rng(0))

    def test_disjoint_cover_sweep(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            k = int(rng.integers(1, 41))
            n = int(rng.integers(1, 9))
            part = partition_pseudobags(make_bag(k=k), n, rng)
            flat = [i for g in part.groups for i in g]
            assert sorted(flat) == list(range(k))
            sizes = [len(g) for g in part.groups]
            assert max(sizes) - min(sizes) <= 1


class TestRoundTrip:
    def test_round_trip_identity(self, tmp_path):
        spec = SyntheticSpec(num_bags=15, instances_per_bag=(2, 7), d_raw=6, seed=9)
        ds = generate_synthetic(spec)
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        assert datasets_equal(load_dataset(path), ds)

    def test_double_round_trip_bytes(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(num_bags=5, instances_per_bag=3,
                                              d_raw=4, seed=2))
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(ds, p1)
        save_dataset(load_dataset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(num_bags=4, instances_per_bag=3,
                                              d_raw=4, seed=2))
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetParseError, match="truncated"):
            load_dataset(path)

    def test_malformed_record_reports_line(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        path.write_text(
            json.dumps({"d_raw": 2, "C": 2, "count": 1}) + "\n" + "{not json\n"
        )
        with pytest.raises(DatasetParseError, match="line 2"):
            load_dataset(path)

    def test_feature_length_mismatch(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        rec = {"id": "b", "label": [1.0, 0.0], "features": [[0.1, 0.2, 0.3]]}
        path.write_text(
            json.dumps({"d_raw": 2, "C": 2, "count": 1}) + "\n" + json.dumps(rec) + "\n"
        )
        with pytest.raises(DatasetSchemaError, match="d_raw"):
            load_dataset(path)

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        save_dataset(Dataset(bags=[], d_raw=3, num_classes=2), path)
        loaded = load_dataset(path)
        assert len(loaded.bags) == 0
        assert loaded.d_raw == 3

    def test_nine_significant_digits_in_file(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(num_bags=2, instances_per_bag=2,
                                              d_raw=3, seed=7))
        path = tmp_path / "ds.jsonl"
        save_dataset(ds, path)
        for line in path.read_text().splitlines()[1:]:
            for row in json.loads(line)["features"]:
                for v in row:
                    assert float(f"{v:.9g}") == v


class TestSplit:
    def make_dataset(self, pos=10, neg=10):
        bags = [make_bag(f"p{i}", label=(0.0, 1.0), seed=i) for i in range(pos)]
        bags += [make_bag(f"n{i}", label=(1.0, 0.0), seed=100 + i) for i in range(neg)]
        return Dataset(bags=bags, d_raw=3, num_classes=2)

    def test_stratified_counts(self):
        train, val, test = split_dataset(self.make_dataset(), (0.7, 0.1, 0.2), seed=0)
        for part, expect in ((train, 7), (val, 1), (test, 2)):
            labels = [int(np.argmax(b.label)) for b in part.bags]
            assert labels.count(0) == expect and labels.count(1) == expect

    def test_all_in_train(self):
        train, val, test = split_dataset(self.make_dataset(), (1.0, 0.0, 0.0), seed=0)
        assert len(train.bags) == 20 and not val.bags and not test.bags

    def test_deterministic(self):
        ds = self.make_dataset()
        a = split_dataset(ds, (0.7, 0.1, 0.2), seed=5)
        b = split_dataset(ds, (0.7, 0.1, 0.2), seed=5)
        for x, y in zip(a, b):
            assert [bag.id for bag in x.bags] == [bag.id for bag in y.bags]

    def test_disjoint_union(self):
        ds = self.make_dataset(7, 9)
        parts = split_dataset(ds, (0.5, 0.25, 0.25), seed=3)
        ids = [bag.id for part in parts for bag in part.bags]
        assert sorted(ids) == sorted(bag.id for bag in ds.bags)

    def test_small_stratum_warns(self):
        ds = self.make_dataset(pos=1, neg=10)
        with pytest.warns(UserWarning, match="best-effort"):
            split_dataset(ds, (0.7, 0.1, 0.2), seed=0)

    def test_bad_fractions(self):
        ds = self.make_dataset()
        with pytest.raises(ValueError):
            split_dataset(ds, (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(ValueError):
            split_dataset(ds, (-0.1, 0.6, 0.5), seed=0)


def test_features_matrix_shape():
    bag = make_bag(k=4, d=6)
    assert features_matrix(bag).shape == (4, 6)
