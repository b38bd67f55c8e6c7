import math

import numpy as np
import pytest

import imcat


def community_pairs(n_users=40, n_items=30, n_tags=12, seed=3):
    rng = np.random.default_rng(seed)
    ui = [(f"u{u}", f"i{i}") for u in range(n_users) for i in range(n_items)
          if rng.random() < (0.6 if u % 2 == i % 2 else 0.05)]
    it = [(f"i{i}", f"t{t}") for i in range(n_items) for t in range(n_tags)
          if rng.random() < (0.5 if i % 2 == t % 2 else 0.03)]
    return ui, it


@pytest.fixture(scope="module")
def dataset():
    imcat.set_quiet(True)
    f = imcat.FilterConfig()
    f.min_user, f.min_item, f.min_tag = 5, 5, 2
    ui, it = community_pairs()
    return imcat.split_dataset(imcat.from_pairs(ui, it, f), seed=1)


def test_dataset_split(dataset):
    assert dataset.is_split
    total = dataset.ui_train.nnz + dataset.ui_valid.nnz + dataset.ui_test.nnz
    assert total == dataset.ui_all.nnz
    assert len(dataset.users) == dataset.n_users
    assert dataset.stats()["n_items"] == dataset.n_items


def test_soft_assignment_oracle():
    # squared distances 0 and 3 give kernels 1 and 1/4
    q = imcat.soft_assign(np.zeros((1, 3)), np.array([[0.0] * 3, [1.0] * 3]), 1.0)
    assert q[0] == pytest.approx([0.8, 0.2], abs=1e-12)
    t = imcat.target_distribution(np.array([[0.8, 0.2], [0.5, 0.5]]))
    assert np.allclose(t.sum(axis=1), 1.0)
    assert imcat.kl_divergence(t, t) == pytest.approx(0.0, abs=1e-15)


def test_contrastive_oracle():
    eye = np.eye(2)
    term = math.log(math.e + 1.0) - 1.0
    loss = imcat.contrastive_loss([eye], [eye], np.ones((2, 1)), 1.0)
    assert loss == pytest.approx(2 * term, abs=1e-12)
    same = imcat.set_to_set_loss([eye], [eye], np.ones((2, 1)), [[[0], [1]]], 1.0)
    assert same == loss
    assert imcat.jaccard_similarity([1, 2, 3], [2, 3, 4, 5]) == pytest.approx(0.4)


@pytest.mark.parametrize("backbone", [imcat.Backbone.BprMf, imcat.Backbone.NeuMf,
                                      imcat.Backbone.LightGcn])
def test_grad_check(backbone):
    for loss in ["uv", "vt", "kl", "ca", "ca_star", "ind"]:
        r = imcat.grad_check(loss, backbone, seed=2)
        assert r.checked > 0
        assert r.max_rel_error < 1e-4


def test_train_and_evaluate(dataset, tmp_path):
    cfg = imcat.RunConfig({"d": 8, "K": 2, "batch": 64, "align_batch": 16, "max_epochs": 4,
                           "pretrain_epochs": 1, "cluster_update_every": 2, "lr": 0.01,
                           "quiet": True})
    assert cfg.to_dict()["K"] == 2
    trainer = imcat.Trainer(dataset, cfg)
    result = trainer.fit(str(tmp_path))
    assert len(result.history) == 4
    assert 0.0 <= result.test.recall <= 1.0
    model = imcat.read_checkpoint(str(tmp_path / "ckpt_best"))
    imcat.check_compatible(model, dataset)
    m = imcat.evaluate(model, dataset, "test", 20)
    assert m.recall == pytest.approx(result.test.recall, abs=1e-5)
    recs = imcat.recommend(model, dataset, 0, 5)
    assert len(recs) == 5
    assert not any(dataset.ui_train.contains(0, i) for i in recs)
    assert model.params()["user"].shape == (dataset.n_users, 8)


def test_errors_are_typed():
    with pytest.raises(imcat.ConfigError):
        imcat.RunConfig({"nonsense": 1})
    with pytest.raises(imcat.DimError):
        imcat.init_parameters(imcat.ModelDims(3, 3, 3, 8, 3))
    with pytest.raises(imcat.MissingFile):
        imcat.read_checkpoint("/nonexistent/ckpt")
    assert issubclass(imcat.MissingFile, imcat.Error)
