import numpy as np
import pytest

from pmss import data
from pmss.backbone import (
    Backbone,
    build_toy_cnn,
    build_toy_vit,
    grid_to_tokens,
    pretrain_source,
    tokens_to_grid,
)
from pmss.tensor import ShapeError, Tensor, no_grad


def small_cnn(seed=0):
    return build_toy_cnn(channels=(8, 16, 24, 32), stage_depths=(1, 1, 1, 1), seed=seed)


def test_default_shape_schedule():
    bb = build_toy_cnn(seed=0)
    x = Tensor(np.random.default_rng(0).random((1, 3, 64, 64)))
    with no_grad():
        f = bb.run_stage(0, x)
        sizes, chans = [], []
        for i in range(1, 5):
            f = bb.run_stage(i, f)
            sizes.append(f.shape[2])
            chans.append(f.shape[1])
    assert sizes == [32, 16, 8, 4]
    assert chans == [32, 64, 128, 256]


def test_zero_depth_rejects():
    with pytest.raises(ShapeError):
        build_toy_cnn(channels=(8, 16), stage_depths=(1, 0), seed=0)
    with pytest.raises(ShapeError):
        build_toy_cnn(channels=(8, -1), stage_depths=(1, 1), seed=0)


def test_same_seed_builds_identical_weights():
    a, b = small_cnn(seed=3), small_cnn(seed=3)
    assert a.state_hash() == b.state_hash()
    c = small_cnn(seed=4)
    assert a.state_hash() != c.state_hash()


def test_run_stage_is_pure():
    bb = small_cnn()
    bb.freeze()
    x = Tensor(np.random.default_rng(1).random((1, 3, 32, 32)))
    with no_grad():
        f1 = bb.run_stage(0, x)
        f2 = bb.run_stage(0, x)
    assert np.array_equal(f1.data, f2.data)


def test_stage_stride_halves_resolution():
    bb = small_cnn()
    with no_grad():
        f0 = bb.run_stage(0, Tensor(np.random.default_rng(0).random((1, 3, 32, 32))))
        f1 = bb.run_stage(1, f0)
        f2 = bb.run_stage(2, f1)
    assert f0.shape[2] == 16  # stem stride 2
    assert f1.shape[2] == 16  # stage 1 stride 1
    assert f2.shape[2] == 8  # stage 2 stride 2


def test_compose_equals_full_forward():
    bb = small_cnn(seed=2)
    x = Tensor(np.random.default_rng(2).random((2, 3, 32, 32)))
    with no_grad():
        f = x
        for i in range(bb.n_stages + 1):
            f = bb.run_stage(i, f)
        mono = bb.forward(x)
    assert np.array_equal(f.data, mono.data)


def test_stage_index_and_channel_mismatch_reject():
    bb = small_cnn()
    with pytest.raises(ShapeError):
        bb.run_stage(9, Tensor(np.zeros((1, 8, 4, 4))))
    with pytest.raises(ShapeError):
        with no_grad():
            bb.run_stage(1, Tensor(np.zeros((1, 5, 4, 4))))


def test_freeze_marks_all_params():
    bb = small_cnn()
    bb.freeze()
    assert bb.frozen
    assert all(not t.requires_grad for _, t in bb.named_params())


def test_serialization_round_trip(tmp_path):
    bb = small_cnn(seed=9)
    bb.freeze()
    bb.provenance = "test-run"
    path = tmp_path / "bb.ckpt"
    bb.save(path)
    back = Backbone.load(path)
    assert back.state_hash() == bb.state_hash()
    assert back.frozen
    assert back.provenance == "test-run"
    x = Tensor(np.random.default_rng(0).random((1, 3, 32, 32)))
    with no_grad():
        np.testing.assert_array_equal(back.forward(x).data, bb.forward(x).data)


# -- toy transformer ---------------------------------------------------------

def test_vit_partitions_evenly():
    bb = build_toy_vit(embed_dim=16, layers=12, patch=8, seed=0, n_stages=3, image_size=32)
    assert bb.n_stages == 3
    assert all(len(s.blocks) == 4 for s in bb.stages)


def test_vit_indivisible_split_rejects():
    with pytest.raises(ShapeError):
        build_toy_vit(embed_dim=16, layers=12, patch=8, seed=0, n_stages=5, image_size=32)


def test_grid_token_roundtrip_is_identity():
    x = Tensor(np.random.default_rng(0).random((2, 5, 3, 4)))
    back = tokens_to_grid(grid_to_tokens(x), 3, 4)
    assert np.array_equal(back.data, x.data)


def test_vit_stage_outputs_grid_form():
    bb = build_toy_vit(embed_dim=16, layers=6, patch=8, seed=1, n_stages=3, image_size=32)
    x = Tensor(np.random.default_rng(0).random((2, 3, 32, 32)))
    with no_grad():
        f = bb.run_stage(0, x)
        assert f.shape == (2, 16, 4, 4)
        f = bb.run_stage(1, f)
        assert f.shape == (2, 16, 4, 4)


# -- pretraining -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_source():
    spec = data.SynthSpec(seed=77, size=32, train_count=12, val_count=4)
    train, val = data.generate(spec)
    return train, val


def test_pretrain_zero_steps_freezes_without_update(tiny_source):
    train_ds, _ = tiny_source
    bb = small_cnn(seed=5)
    before = bb.state_hash()
    pretrain_source(bb, train_ds, steps=0, lr=0.02)
    assert bb.frozen
    assert bb.state_hash() == before
    assert "source-pretrain" in bb.provenance


def test_pretrain_rejects_frozen_backbone(tiny_source):
    train_ds, _ = tiny_source
    bb = small_cnn(seed=5)
    bb.freeze()
    with pytest.raises(ValueError):
        pretrain_source(bb, train_ds, steps=1, lr=0.02)


def test_pretraining_strictly_improves_source_miou(source_data):
    from pmss.pipeline import LossSpec, StagePipeline, TuningStrategy, evaluate, train

    train_ds, val_ds = source_data
    bb = build_toy_cnn(channels=(16, 32, 64, 128), stage_depths=(1, 1, 1, 1), seed=6)
    pipe = StagePipeline.build(
        bb, train_ds.num_classes, None, spm_stages=(), seed=0,
        strategy=TuningStrategy(tag="full"), loss_spec=LossSpec(),
    )
    pipe.apply_strategy()
    step0 = evaluate(pipe, val_ds)["miou"]
    train(pipe, train_ds, steps=150, lr=0.02, seed=0, batch=2)
    trained = evaluate(pipe, val_ds)["miou"]
    assert trained > step0


def test_head_tuning_prefers_pretrained_backbone(pretrained_backbone, downstream_data):
    from pmss.pipeline import LossSpec, StagePipeline, TuningStrategy, evaluate, train

    bb_pre, _ = pretrained_backbone
    train_ds, val_ds = downstream_data

    def head_score(backbone, seed):
        pipe = StagePipeline.build(
            backbone, train_ds.num_classes, None, spm_stages=(), seed=seed,
            strategy=TuningStrategy(tag="head"), loss_spec=LossSpec(),
        )
        pipe.apply_strategy()
        train(pipe, train_ds, steps=200, lr=0.02, seed=seed, batch=4)
        return evaluate(pipe, val_ds)["miou"]

    bb_rnd = build_toy_cnn(channels=(16, 32, 64, 128), stage_depths=(2, 2, 2, 2), seed=991)
    bb_rnd.freeze()
    pre_mean = np.mean([head_score(bb_pre, s) for s in range(3)])
    rnd_mean = np.mean([head_score(bb_rnd, s) for s in range(3)])
    assert pre_mean > rnd_mean
