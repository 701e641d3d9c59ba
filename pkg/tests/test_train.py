import numpy as np
import pytest

from brickforge import train as train_mod
from brickforge.bricks import Geometry
from brickforge.datagen import generate_digit_set, generate_rad_set, records_from_trees
from brickforge.errors import ParseError
from brickforge.model import ModelConfig
from brickforge.train import (
    SampleCache,
    TrainConfig,
    build_configs,
    load_checkpoint,
    load_config,
    new_state,
    parse_config_text,
    pretrain,
    save_checkpoint,
    selftrain,
)

TINY = ModelConfig(feature_dim=16, enc_layers=1, dec_layers=1, heads=2, mlp_dim=32, image_size=16,
                   patch_size=8, grid=16, max_bricks=8)


def rad_records(count=6, n=4, seed=5):
    return records_from_trees(generate_rad_set(count, n, Geometry(16), seed=seed))


def cfg(**kw):
    base = dict(batch_size=3, epochs=2, grid=16, max_bricks=8, val_decode=False)
    base.update(kw)
    return TrainConfig(**base)


def params(state):
    return {k: v.copy() for k, v in state.model.state_dict().items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_parse_config_text():
    text = "# comment\nlr = 0.01\n\nepochs=3  # trailing\n"
    assert parse_config_text(text) == {"lr": "0.01", "epochs": "3"}
    with pytest.raises(ParseError) as err:
        parse_config_text("lr = 1\nnonsense\n")
    assert err.value.line == 2


def test_build_configs_and_shipped_files():
    m, t = build_configs({"lr": "0.5", "grid": "16", "reorder_augment": "off"})
    assert t.lr == 0.5 and t.grid == 16 and m.grid == 16 and t.reorder_augment is False
    with pytest.raises(ParseError):
        build_configs({"bogus": "1"})
    with pytest.raises(ParseError):
        build_configs({"epochs": "many"})
    m, t = build_configs(load_config("desk.cfg"))
    assert m.grid == t.grid == 32
    m, t = build_configs(load_config("full.cfg"))
    assert m.grid == 64 and m.max_bricks == 64


def test_pretrain_deterministic_without_augmentation():
    recs = rad_records()
    a, rows_a = pretrain(recs, cfg(reorder_augment=False), TINY)
    b, rows_b = pretrain(recs, cfg(reorder_augment=False), TINY)
    assert same_params(params(a), params(b))
    assert [r["loss"] for r in rows_a] == [r["loss"] for r in rows_b]


def test_augmentation_changes_labels_across_epochs(monkeypatch):
    recs = rad_records(count=4, n=6)
    seen = []
    real = SampleCache.get

    def spy(self, i, root=0):
        seen.append((i, root))
        return real(self, i, root)

    monkeypatch.setattr(SampleCache, "get", spy)
    pretrain(recs, cfg(epochs=3, batch_size=4), TINY)
    per_epoch = [sorted(seen[k * 4:(k + 1) * 4]) for k in range(3)]
    assert len({tuple(e) for e in per_epoch}) > 1
    assert any(root != 0 for _, root in seen)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    state, _ = pretrain(rad_records(), cfg(epochs=1), TINY)
    p1, p2 = tmp_path / "a.tsba", tmp_path / "b.tsba"
    save_checkpoint(p1, state)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()
    assert load_checkpoint(p1).model.cfg == TINY


def test_resume_matches_uninterrupted_run(tmp_path):
    recs = rad_records()
    full, rows_full = pretrain(recs, cfg(epochs=3), TINY)
    path = tmp_path / "half.tsba"
    pretrain(recs, cfg(epochs=1), TINY, checkpoint_path=path)
    resumed, rows_res = pretrain(recs, cfg(epochs=3), state=load_checkpoint(path))
    assert resumed.epoch == 3
    assert same_params(params(full), params(resumed))
    assert [r["loss"] for r in rows_full[1:]] == [r["loss"] for r in rows_res]


def test_invalid_records_are_skipped():
    recs = rad_records(count=4)
    recs[1].tree.bricks[-1] = recs[1].tree.bricks[0]
    recs[2].tree = None
    state, rows = pretrain(recs, cfg(epochs=1), TINY)
    assert rows[0]["skipped"] == 2
    assert np.isfinite(rows[0]["loss"])


def test_pretrain_never_uses_the_silhouette_pipeline(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("pipeline called during pre-training")

    monkeypatch.setattr(train_mod, "render_probabilistic", boom)
    monkeypatch.setattr(train_mod, "silhouette_loss", boom)
    pretrain(rad_records(), cfg(epochs=1), TINY, val_records=rad_records(2, seed=9))


def test_selftrain_never_reads_labels(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("labels read during self-training")

    monkeypatch.setattr(train_mod, "actions_from_tree", boom)
    monkeypatch.setattr(train_mod, "SampleCache", boom)
    recs = generate_digit_set(4, Geometry(16), seed=1)
    assert all(r.tree is None for r in recs)
    state = new_state(TINY, seed=1)
    before = params(state)
    state, rows = selftrain(recs, cfg(epochs=1, batch_size=2, lr=1e-2), state)
    assert np.isfinite(rows[0]["loss"])
    assert not same_params(before, params(state))


def test_selftrain_deterministic():
    recs = generate_digit_set(4, Geometry(16), seed=2)
    outs = []
    for _ in range(2):
        state, rows = selftrain(recs, cfg(epochs=1, batch_size=2), new_state(TINY, seed=4))
        outs.append((params(state), rows[0]["loss"]))
    assert same_params(outs[0][0], outs[1][0]) and outs[0][1] == outs[1][1]


def test_metrics_file_is_json_lines(tmp_path):
    import json

    path = tmp_path / "m.jsonl"
    pretrain(rad_records(), cfg(epochs=2, val_decode=True), TINY, val_records=rad_records(2, seed=9),
             metrics_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["split"] for r in rows] == ["train", "train", "val"]
    assert 0.0 <= rows[-1]["iou"] <= 1.0


def test_selftrain_resets_optimizer_and_resumes(tmp_path):
    recs = generate_digit_set(4, Geometry(16), seed=3)
    pre, _ = pretrain(rad_records(), cfg(epochs=1), TINY)
    assert pre.adam["step"] == 2
    full, _ = selftrain(recs, cfg(epochs=2, batch_size=2), load_checkpoint_copy(pre, tmp_path / "p.tsba"))
    assert full.adam["step"] == 4  # fresh moments: two epochs of two batches
    half, _ = selftrain(recs, cfg(epochs=1, batch_size=2), load_checkpoint_copy(pre, tmp_path / "p.tsba"),
                        checkpoint_path=tmp_path / "h.tsba")
    resumed, _ = selftrain(recs, cfg(epochs=1, batch_size=2), load_checkpoint(tmp_path / "h.tsba"),
                           reset_optimizer=False)
    assert resumed.epoch == full.epoch == 3
    assert same_params(params(full), params(resumed))


def load_checkpoint_copy(state, path):
    save_checkpoint(path, state)
    return load_checkpoint(path)


def test_single_object_overfit():
    recs = records_from_trees(generate_rad_set(1, 5, Geometry(32), seed=13))
    c = TrainConfig(epochs=200, batch_size=1, reorder_augment=False, val_decode=False)
    state, rows = pretrain(recs, c, ModelConfig(max_bricks=32))
    losses = [r["loss"] for r in rows]
    assert losses[-1] < 0.01
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_selftrain_decodes_stay_legal(monkeypatch):
    from brickforge.tree import validate_tree

    seen = []
    real = train_mod.selftrain_step

    def checked(model, images, c, geom):
        loss, trees = real(model, images, c, geom)
        seen.extend(validate_tree(t) for t in trees)
        return loss, trees

    monkeypatch.setattr(train_mod, "selftrain_step", checked)
    recs = generate_digit_set(4, Geometry(16), seed=6)
    selftrain(recs, cfg(epochs=2, batch_size=2, lr=1e-2), new_state(TINY, seed=2))
    assert len(seen) == 8 and all(p == [] for p in seen)
