import numpy as np
import pytest

from brickforge.autodiff import Tensor, backward, no_grad
from brickforge.autodiff.optim import Adam
from brickforge.bricks import Geometry
from brickforge.datagen import generate_rad_object, render_silhouettes
from brickforge.errors import BadImageSize, IndexOutOfRange, TooManyBricks
from brickforge.model import (
    ModelConfig,
    TreeTransformer,
    assemble_batch,
    autoregressive_assemble,
    expected_parameter_count,
    placement_probs,
    predicted_actions,
    query_features,
)
from brickforge.pipeline import action_loss
from brickforge.tree import actions_from_tree, bfs_tree, decode_actions, graph_from_bricks, validate_tree

SMALL = dict(feature_dim=32, enc_layers=1, dec_layers=2, heads=4, mlp_dim=64, image_size=32,
             patch_size=8, grid=16, max_bricks=24)


@pytest.fixture(scope="module")
def small():
    return TreeTransformer(ModelConfig(**SMALL), seed=3)


def views_of(tree):
    return render_silhouettes(tree.voxels())


def test_default_shapes_and_parameter_count():
    cfg = ModelConfig()
    model = TreeTransformer(cfg)
    assert cfg.n_patches == 16
    feats = model.encode_images(np.zeros((3, 32, 32)))
    assert feats.shape == (1, 16, 64)
    logits = model.decode_step_logits(feats, query_features(generate_rad_object(1, Geometry(32))))
    assert logits.shape == (1, 1, 34)
    assert model.num_parameters() == expected_parameter_count(cfg) == 791522
    names = model.named_parameters()
    assert {"enc.block0.attn.wq.w", "head.up.w", "emb.type", "emb.pos"} <= set(names)


def test_parameter_count_tracks_config():
    for kw in (SMALL, dict(SMALL, use_geo=False), dict(SMALL, max_bricks=40)):
        cfg = ModelConfig(**kw)
        assert TreeTransformer(cfg).num_parameters() == expected_parameter_count(cfg)


def test_bad_image_size(small):
    with pytest.raises(BadImageSize):
        small.encode_images(np.zeros((3, 20, 20)))
    with pytest.raises(BadImageSize):
        small.encode_images(np.zeros((2, 16, 16)))


def test_zero_input_rows_differ_only_by_position(small):
    patches = np.zeros((1, small.cfg.n_patches, 3 * 64))
    x = small.enc.patch(Tensor(patches))
    assert np.allclose(x.data[0] - x.data[0, :1], 0.0)


def test_zero_tables_give_zero_embedding(small):
    model = TreeTransformer(ModelConfig(**SMALL), seed=0)
    for p in (model.emb.type, model.emb.dir, model.emb.dep, model.emb.pos, model.emb.rot):
        p.data[:] = 0
    out = model.embed_brick(np.array([[16, 2, 0, 8, 8, 8, 0]]))
    assert np.array_equal(out.data, np.zeros((1, 32)))


def test_embedding_additivity(small, cycle_poses):
    geom = Geometry(32)
    tree = bfs_tree(graph_from_bricks(cycle_poses, geom), cycle_poses, 0, geom)
    model = TreeTransformer(ModelConfig(**dict(SMALL, grid=32)), seed=1)
    f = query_features(tree)
    assert np.array_equal(f[3, :3], f[5, :3])  # same type, direction, depth
    e = model.embed_brick(f).data
    pos = model.emb.pos.data
    geo3 = pos[f[3, 3]] + pos[f[3, 4]] + pos[f[3, 5]] + model.emb.rot.data[f[3, 6]]
    geo5 = pos[f[5, 3]] + pos[f[5, 4]] + pos[f[5, 5]] + model.emb.rot.data[f[5, 6]]
    assert np.allclose(e[3] - e[5], geo3 - geo5, atol=1e-6)
    g = f[3].copy()
    g[3] += 1
    diff = model.embed_brick(g[None]).data[0] - e[3]
    assert np.allclose(diff, pos[f[3, 3] + 1] - pos[f[3, 3]], atol=1e-6)


def test_embedding_ablation_switch():
    cfg = ModelConfig(**dict(SMALL, use_str=False))
    model = TreeTransformer(cfg, seed=0)
    a = model.embed_brick(np.array([[0, 0, 1, 3, 3, 3, 0]])).data
    b = model.embed_brick(np.array([[5, 1, 4, 3, 3, 3, 0]])).data
    assert np.array_equal(a, b)


def test_index_out_of_range(small):
    with pytest.raises(IndexOutOfRange):
        small.embed_brick(np.array([[17, 0, 0, 0, 0, 0, 0]]))
    with pytest.raises(IndexOutOfRange):
        small.embed_brick(np.array([[0, 0, 0, 0, 0, 99, 0]]))


def test_too_many_bricks(small):
    feats = np.zeros((1, 25, 7), dtype=np.int64)
    with pytest.raises(TooManyBricks):
        small.forward(np.zeros((3, 16, 16)), feats)


def test_causal_mask(small, rng):
    tree = generate_rad_object(8, Geometry(16), rng)
    f = query_features(tree)
    img = views_of(tree)
    full = small.forward(img, f).data
    part = small.forward(img, f[:4]).data
    assert np.allclose(full[0, :4], part[0], atol=1e-5)


def test_cross_attention_sensitivity(rng):
    model = TreeTransformer(ModelConfig(**SMALL), seed=0)
    geom = Geometry(16)
    trees = [generate_rad_object(5, geom, rng) for _ in range(4)]
    images = np.stack([views_of(t) for t in trees])
    feats = np.stack([query_features(t) for t in trees])
    labels = [actions_from_tree(t) for t in trees]
    opt = Adam(model, lr=1e-3)
    for _ in range(10):
        loss = action_loss(model.forward(images, feats), labels)
        backward(loss)
        opt.step()
        opt.zero_grad()
    with no_grad():
        base = model.forward(images[:1], feats[:1]).data
    img = images[:1].copy()
    img[:, :, :8, :8], img[:, :, 8:, 8:] = img[:, :, 8:, 8:].copy(), img[:, :, :8, :8].copy()
    moved = model.forward(img, feats[:1]).data
    assert not np.allclose(base, moved)


def test_negative_bias_decodes_single_root(small):
    model = TreeTransformer(ModelConfig(**SMALL), seed=0)
    model.head.up.b.data[:] = -10
    model.head.down.b.data[:] = -10
    counter = {}
    tree, records = autoregressive_assemble(np.zeros((3, 16, 16)), model, counter=counter)
    assert len(tree) == 1 and counter["head_evals"] == 1
    assert records[0].probs.shape == (32,)


def test_external_occupancy_blocks_up_side():
    model = TreeTransformer(ModelConfig(**SMALL), seed=0)
    model.head.up.b.data[:] = 10
    model.head.down.b.data[:] = 10
    occ = np.zeros((16, 16, 16), dtype=np.uint8)
    occ[9] = 1  # the layer right above the root
    tree, records = autoregressive_assemble(np.zeros((3, 16, 16)), model, occupancy=occ)
    assert all(tree.edge[c].direction == 1 for c in tree.children(0))
    assert not records[0].legal[:16].any()
    assert (records[0].probs[:16] == 0).all()


def test_incremental_decode_matches_full_forward(small, rng):
    model = TreeTransformer(ModelConfig(**dict(SMALL, head_bias=0.0)), seed=5)
    img = views_of(generate_rad_object(6, Geometry(16), rng))
    counter = {}
    tree, records = autoregressive_assemble(img, model, counter=counter)
    assert len(tree) > 3
    assert counter["head_evals"] == len(tree)
    full = placement_probs(model.forward(img, query_features(tree))).data[0]
    legal = np.array([r.legal for r in records])
    assert np.allclose(full * legal, np.array([r.probs for r in records]), atol=1e-5)
    # the decode equals replaying its own thresholded actions
    replay, _ = decode_actions(predicted_actions(records), Geometry(16), max_bricks=24)
    assert replay == tree


def test_batch_decode_matches_single(rng):
    model = TreeTransformer(ModelConfig(**dict(SMALL, head_bias=0.0)), seed=6)
    geom = Geometry(16)
    images = np.stack([views_of(generate_rad_object(n, geom, rng)) for n in (2, 5, 9)])
    batch = assemble_batch(images, model)
    for img, (tree, _, _) in zip(images, batch):
        single, _ = autoregressive_assemble(img, model)
        assert single == tree


def test_random_weight_decodes_are_legal():
    geom = Geometry(16)
    for seed in range(20):
        model = TreeTransformer(ModelConfig(**dict(SMALL, head_bias=0.0)), seed=seed)
        img = (np.random.default_rng(seed).random((3, 16, 16)) < 0.3).astype(np.float32)
        tree, _ = autoregressive_assemble(img, model)
        assert validate_tree(tree) == []
        assert tree.geom == geom


def test_config_round_trip():
    cfg = ModelConfig(**SMALL)
    assert ModelConfig.from_dict({k: float(v) for k, v in cfg.to_dict().items()}) == cfg
    with pytest.raises(ValueError):
        ModelConfig(image_size=60)
