import numpy as np
import pytest
import torch

from fedskd_lab.data import (
    LabeledDataset,
    dirichlet_partition,
    iid_partition,
    largest_remainder,
    load_manifest,
    load_region_masks,
    make_grid_region_masks,
    make_synthetic_task,
    save_region_masks,
    stratified_folds,
    stratified_partition,
    stratified_split,
)
from fedskd_lab.errors import EmptyClientError, UnknownSiteError
from fedskd_lab.metrics import auc

from oracles import dirichlet_counts_oracle


def labels_only(labels, sites=None):
    labels = np.asarray(labels)
    return LabeledDataset(np.zeros((len(labels), 1), np.float32), labels, site_labels=sites)


def per_class_counts(ds, plan, classes):
    return {c: [int(((plan.assignment == k) & (ds.labels.numpy() == c)).sum()) for k in range(plan.n_clients)]
            for c in classes}


def philox(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


class TestDirichlet:
    def test_forced_proportions(self):
        ds = labels_only([0] * 10 + [1] * 10)
        plan = dirichlet_partition(ds, 3, 0.5, 0, proportions={0: [1, 0, 0], 1: [0.2, 0.4, 0.4]})
        counts = per_class_counts(ds, plan, [0, 1])
        assert counts[0] == [10, 0, 0]
        assert counts[1] == [2, 4, 4]

    def test_partition_law(self):
        ds = labels_only(np.arange(90) % 3)
        plan = dirichlet_partition(ds, 4, 0.3, 11)
        counts = per_class_counts(ds, plan, [0, 1, 2])
        assert all(sum(counts[c]) == 30 for c in counts)
        assert sorted(np.concatenate([plan.indices(k) for k in range(4)]).tolist()) == list(range(90))

    def test_matches_independent_reimplementation(self):
        ds = labels_only([0] * 30 + [1] * 30)
        plan = dirichlet_partition(ds, 3, 0.5, 1234)
        expected = dirichlet_counts_oracle(ds.labels.numpy(), 3, 0.5, 1234,
                                           lambda a: philox(1234, 5, a))
        assert per_class_counts(ds, plan, [0, 1]) == expected

    def test_empty_client_raises_after_redraws(self):
        with pytest.raises(EmptyClientError):
            dirichlet_partition(labels_only([0, 1]), 3, 0.5, 0)

    def test_skew_monotone_in_alpha(self):
        ds = labels_only(np.arange(60) % 2)

        def mean_max_share(alpha):
            shares = []
            for seed in range(50):
                counts = per_class_counts(ds, dirichlet_partition(ds, 3, alpha, seed), [0, 1])
                shares += [max(v) / 30 for v in counts.values()]
            return np.mean(shares)

        assert mean_max_share(0.1) > mean_max_share(10.0)

    def test_largest_remainder(self):
        assert largest_remainder([1 / 3, 1 / 3, 1 / 3], 10).tolist() == [4, 3, 3]
        assert largest_remainder([0.5, 0.25, 0.25], 7).sum() == 7
        assert largest_remainder([0.0, 1.0], 5).tolist() == [0, 5]


class TestStratified:
    def test_one_client_per_site(self):
        ds = labels_only([0, 1, 0, 1, 1], sites=[0, 0, 1, 1, 1])
        plan = stratified_partition(ds, {0: 0, 1: 1})
        assert plan.counts().tolist() == [2, 3]

    def test_all_sites_one_client(self):
        ds = labels_only([0, 1, 0], sites=[0, 1, 2])
        plan = stratified_partition(ds, {0: 0, 1: 0, 2: 0})
        assert plan.n_clients == 1 and plan.counts().tolist() == [3]

    def test_four_sites_into_two_clients(self):
        sites = np.repeat([0, 1, 2, 3], [5, 7, 2, 9])
        ds = labels_only(np.arange(len(sites)) % 2, sites=sites)
        plan = stratified_partition(ds, {0: 0, 1: 1, 2: 0, 3: 1})
        assert plan.counts().tolist() == [5 + 2, 7 + 9]

    def test_unknown_site(self):
        with pytest.raises(UnknownSiteError):
            stratified_partition(labels_only([0, 1], sites=[0, 5]), {0: 0})


def test_iid_partition_balanced():
    plan = iid_partition(labels_only(np.arange(31) % 2), 3, 0)
    assert sorted(plan.counts().tolist()) == [10, 10, 11]


def _ridge_probe(train, test, lam=10.0):
    X = train.inputs.reshape(len(train), -1).double().numpy()
    X = np.hstack([X, np.ones((len(X), 1))])
    y = 2.0 * train.labels.numpy() - 1
    w = np.linalg.solve(X.T @ X + lam * np.eye(X.shape[1]), X.T @ y)
    Xt = test.inputs.reshape(len(test), -1).double().numpy()
    return np.hstack([Xt, np.ones((len(Xt), 1))]) @ w


class TestSynthetic:
    def test_reproducible(self):
        a = make_synthetic_task(2, 2, 0.5, (1, 8, 8), seed=3, samples_per_client=10)
        b = make_synthetic_task(2, 2, 0.5, (1, 8, 8), seed=3, samples_per_client=10)
        for x, y in zip(a, b):
            assert torch.equal(x.inputs, y.inputs) and torch.equal(x.labels, y.labels)
            assert torch.equal(x.sensitive_attr, y.sensitive_attr)

    def test_class_counts_and_balanced_attr(self):
        shards = make_synthetic_task(2, 3, 0.5, (1, 8, 8), 0, class_counts=[[4, 0, 6], [2, 2, 2]])
        assert shards[0].class_counts(3).tolist() == [4, 0, 6]
        assert int(shards[0].sensitive_attr.sum()) == 2 + 3
        assert shards[1].site_labels.tolist() == [1] * 6

    def test_linear_probe_auc(self):
        shards = make_synthetic_task(3, 2, 0.5, (1, 16, 16), seed=0, samples_per_client=200)
        pooled = LabeledDataset.concat(shards)
        tr, te = stratified_split(pooled, 0.3, 0)
        test = pooled.subset(te)
        assert auc(_ridge_probe(pooled.subset(tr), test), test.labels.numpy()) > 0.9

    def test_zero_shift_clients_look_alike(self):
        shards = make_synthetic_task(3, 2, 0.0, (1, 16, 16), seed=1, samples_per_client=300)
        train = LabeledDataset.concat([s.subset(np.arange(150)) for s in shards])
        aucs = []
        for s in shards:
            held = s.subset(np.arange(150, 300))
            aucs.append(auc(_ridge_probe(train, held), held.labels.numpy()))
        assert max(aucs) - min(aucs) < 0.06

    def test_3d(self):
        (shard,) = make_synthetic_task(1, 2, 0.3, (2, 8, 8, 8), 0, samples_per_client=4)
        assert shard.inputs.shape == (4, 2, 8, 8, 8)


class TestMasks:
    def test_grid_2d(self):
        m = make_grid_region_masks((8, 8), (2, 2))
        assert m.r == 4 and m.sizes().tolist() == [16] * 4
        assert m.assignments[0, 0] == 1 and m.assignments[7, 7] == 4

    def test_single_region(self):
        m = make_grid_region_masks((5, 7), (1, 1))
        assert m.r == 1 and int(m.sizes()[0]) == 35

    def test_grid_3d(self):
        m = make_grid_region_masks((8, 8, 8), (2, 2, 2))
        assert m.r == 8 and m.sizes().tolist() == [64] * 8

    @pytest.mark.parametrize("suffix", [".txt", ".npz"])
    def test_file_round_trip(self, tmp_path, suffix):
        m = make_grid_region_masks((4, 6), (2, 3))
        save_region_masks(m, tmp_path / f"masks{suffix}")
        back = load_region_masks(tmp_path / f"masks{suffix}")
        assert back.r == 6 and torch.equal(back.assignments, m.assignments)

    def test_text_format(self, tmp_path):
        (tmp_path / "m.txt").write_text("# two regions\nregions 2 2 3\n1 1 2\n1 0 2\n")
        m = load_region_masks(tmp_path / "m.txt")
        assert m.assignments.tolist() == [[1, 1, 2], [1, 0, 2]]


class TestSplits:
    def test_stratified_split_keeps_every_class_in_test(self):
        ds = labels_only([0] * 9 + [1] * 3)
        tr, te = stratified_split(ds, 0.2, 0)
        assert sorted(np.concatenate([tr, te]).tolist()) == list(range(12))
        assert set(ds.labels.numpy()[te].tolist()) == {0, 1}

    def test_folds_cover_once(self):
        ds = labels_only(np.arange(23) % 2)
        folds = stratified_folds(ds, 5, 0)
        tests = np.concatenate([te for _, te in folds])
        assert sorted(tests.tolist()) == list(range(23))


def test_manifest_loader(tmp_path):
    rows = ["path,label,attr,site"]
    for i in range(4):
        np.save(tmp_path / f"x{i}.npy", np.full((1, 4, 4), i, np.float32))
        rows.append(f"x{i}.npy,{i % 2},{i // 2},{i}")
    (tmp_path / "manifest.csv").write_text("\n".join(rows) + "\n")
    ds = load_manifest(tmp_path / "manifest.csv")
    assert ds.inputs.shape == (4, 1, 4, 4) and ds.labels.tolist() == [0, 1, 0, 1]
    assert ds.sensitive_attr.tolist() == [0, 0, 1, 1] and ds.site_labels.tolist() == [0, 1, 2, 3]
