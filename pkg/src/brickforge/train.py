"""Supervised pre-training, silhouette self-training, checkpoints and configs."""

import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import tensor as T
from .autodiff.checkpoint import load_tensors, save_tensors
from .autodiff.optim import adam_step, init_adam_state
from .autodiff.tensor import backward, no_grad
from .bricks import Geometry
from .datagen import render_silhouettes
from .errors import DataError, OutOfBounds, ParseError
from .metrics import connection_accuracy, iou, step_accuracy
from .model import (
    ModelConfig,
    TreeTransformer,
    assemble_batch,
    pad_features,
    placement_probs,
    query_features,
)
from .pipeline import (
    action_loss,
    render_probabilistic,
    silhouette_loss,
    teacher_forced_accuracy,
    teacher_forced_predictions,
)
from .tree import actions_from_tree, decode_actions, reorder_actions, validate_tree

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).with_name("configs")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 200
    alpha: float = 0.4
    seed: int = 0
    reorder_augment: bool = True
    max_bricks: int = 32
    grid: int = 32
    tau: float = 0.5
    projection: str = "nonzero_mean"
    eval_every: int = 0  # 0: only after the last epoch
    val_decode: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive, epochs non-negative")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.projection not in ("nonzero_mean", "max"):
            raise ValueError(f"unknown projection {self.projection!r}")


# --------------------------------------------------------------------------
# config files


def _coerce(value, default):
    if isinstance(default, bool):
        low = str(value).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return type(default)(value)


def parse_config_text(text):
    """``key = value`` lines with ``#`` comments -> dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line=lineno)
        out[key] = value
    return out


def load_config(path):
    path = Path(path)
    if not path.exists() and (CONFIG_DIR / path).exists():
        path = CONFIG_DIR / path
    return parse_config_text(path.read_text(encoding="utf-8"))


def build_configs(values=None):
    """Split flat key/value settings into (ModelConfig, TrainConfig)."""
    values = dict(values or {})
    model_keys = {f.name: f.default for f in fields(ModelConfig)}
    train_keys = {f.name: f.default for f in fields(TrainConfig)}
    mkw, tkw = {}, {}
    for key, value in values.items():
        if value is None:
            continue
        if key not in model_keys and key not in train_keys:
            raise ParseError(f"unknown config key {key!r}")
        try:
            if key in train_keys:
                tkw[key] = _coerce(value, train_keys[key])
            if key in model_keys:
                mkw[key] = _coerce(value, model_keys[key])
        except ValueError as exc:
            raise ParseError(f"bad value for {key}: {exc}") from exc
    return ModelConfig(**mkw), TrainConfig(**tkw)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    model: TreeTransformer
    adam: dict
    epoch: int = 0


def state_tensors(state):
    cfg = state.model.cfg
    out = {}
    for key, value in asdict(cfg).items():
        out[f"cfg.{key}"] = np.array(float(value), dtype=np.float32)
    out.update(state.model.state_dict())
    for name in sorted(state.adam["m"]):
        out[f"adam.m.{name}"] = state.adam["m"][name]
        out[f"adam.v.{name}"] = state.adam["v"][name]
    out["adam.step"] = np.array(state.adam["step"], dtype=np.float32)
    out["train.epoch"] = np.array(state.epoch, dtype=np.float32)
    return out


def save_checkpoint(path, state):
    save_tensors(path, state_tensors(state))


def load_checkpoint(path):
    tensors = load_tensors(path)
    cfg_values = {k[4:]: float(v) for k, v in tensors.items() if k.startswith("cfg.")}
    cfg = ModelConfig.from_dict(cfg_values)
    model = TreeTransformer(cfg)
    params = {k: v for k, v in tensors.items() if not k.startswith(("cfg.", "adam.", "train."))}
    model.load_state_dict(params)
    adam = init_adam_state()
    adam["step"] = int(tensors.get("adam.step", 0))
    for k, v in tensors.items():
        if k.startswith("adam.m."):
            adam["m"][k[7:]] = v
        elif k.startswith("adam.v."):
            adam["v"][k[7:]] = v
    return TrainState(model, adam, int(tensors.get("train.epoch", 0)))


def new_state(model_cfg, seed=0):
    return TrainState(TreeTransformer(model_cfg, seed=seed), init_adam_state(), 0)


def optimizer_step(state, lr, weight_decay):
    named = state.model.named_parameters()
    params = {k: p.data for k, p in named.items()}
    grads = {k: p.grad for k, p in named.items() if p.grad is not None}
    adam_step(params, grads, state.adam, lr, weight_decay=weight_decay)
    state.model.zero_grad()


# --------------------------------------------------------------------------
# supervised samples


class SampleCache:
    """Teacher-forcing samples per (record, root), built lazily and memoised."""

    def __init__(self, records, geom):
        self.records = records
        self.geom = geom
        self._cache = {}
        self.skipped = set()
        self.checked = set()
        self.reorder_fallbacks = 0

    def valid(self, i):
        if i in self.checked:
            return True
        if i in self.skipped:
            return False
        rec = self.records[i]
        try:
            if rec.tree is None:
                raise DataError(f"record {rec.id} has no assembly tree")
            if rec.tree.geom.size != self.geom.size:
                raise DataError(f"record {rec.id} grid {rec.tree.geom.size} != {self.geom.size}")
            problems = validate_tree(rec.tree)
            if problems:
                raise DataError(f"record {rec.id}: {problems[0]}")
        except DataError as exc:
            log.warning("skipping %s", exc)
            self.skipped.add(i)
            return False
        self.checked.add(i)
        return True

    def get(self, i, root=0):
        key = (i, root)
        if key not in self._cache:
            tree = self.records[i].tree
            if root:
                try:
                    tree, _ = reorder_actions(tree, root)
                except OutOfBounds:
                    self.reorder_fallbacks += 1
                    return self.get(i, 0)
            labels = actions_from_tree(tree)
            _, report = decode_actions(labels, tree.geom, max_bricks=len(tree))
            legal = np.array(report.legal, dtype=bool)
            views = render_silhouettes(tree.voxels())
            self._cache[key] = (views, query_features(tree), labels, legal)
        return self._cache[key]


def _batches(order, size):
    for s in range(0, len(order), size):
        yield order[s:s + size]


def supervised_step(model, samples):
    images = np.stack([s[0] for s in samples])
    feats, _ = pad_features([s[1] for s in samples])
    logits = model.forward(images, feats)
    loss = action_loss(logits, [s[2] for s in samples], [s[3] for s in samples])
    return loss, logits


def teacher_forced_eval(model, cache, indices, batch_size=64, extra=None):
    """Mean action loss and per-step accuracy at the canonical root.

    ``extra``, if a dict, also receives the per-slot ``connection_acc``.
    """
    losses, preds, labels = [], [], []
    with no_grad():
        for batch in _batches(list(indices), batch_size):
            samples = [cache.get(i, 0) for i in batch]
            loss, logits = supervised_step(model, samples)
            losses.append(loss.item() * len(batch))
            for b, s in enumerate(samples):
                preds += teacher_forced_predictions(logits.data[b], len(s[2]), s[3])
                labels += s[2]
    count = max(len(list(indices)), 1)
    if extra is not None:
        extra["connection_acc"] = connection_accuracy(preds, labels)
    return float(np.sum(losses) / count), step_accuracy(preds, labels)


def assemble_records(model, records, tau=0.5, max_bricks=None, batch_size=32, counter=None):
    """Decode every record from its silhouettes; returns the trees."""
    trees = []
    for batch in _batches(list(records), batch_size):
        images = np.stack([r.views() for r in batch])
        trees += [t for t, _, _ in assemble_batch(images, model, tau, max_bricks, counter=counter)]
    return trees


def assembly_iou(model, records, tau=0.5, max_bricks=None, batch_size=32):
    trees = assemble_records(model, records, tau, max_bricks, batch_size)
    return [iou(t.voxels(), r.target_voxels()) for t, r in zip(trees, records)]


class MetricsLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []

    def write(self, epoch, split, loss, acc=None, iou_value=None, **extra):
        row = {"epoch": int(epoch), "split": split, "loss": float(loss),
               "acc": None if acc is None else float(acc),
               "iou": None if iou_value is None else float(iou_value)}
        row.update(extra)
        self.rows.append(row)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")
        return row


def _due(cfg, epoch):
    last = epoch + 1 == cfg.epochs
    return last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)


def pretrain(records, cfg, model_cfg=None, state=None, val_records=(), metrics_path=None,
             checkpoint_path=None, max_steps=None):
    """Minimise the action loss on labelled assemblies; returns (state, metrics rows).

    ``state`` resumes from a checkpoint: epochs before ``state.epoch`` are
    skipped and every epoch re-seeds its shuffle from ``(seed, epoch)`` so a
    resumed run follows the uninterrupted one step for step.
    """
    state = state or new_state(model_cfg or ModelConfig(grid=cfg.grid), cfg.seed)
    geom = Geometry(state.model.cfg.grid)
    train = SampleCache(list(records), geom)
    val = SampleCache(list(val_records), geom)
    logger = MetricsLog(metrics_path)
    steps = 0
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = [int(i) for i in rng.permutation(len(train.records)) if train.valid(int(i))]
        total, hits, count = 0.0, 0, 0
        for batch in _batches(order, cfg.batch_size):
            roots = [int(rng.integers(len(train.records[i].tree))) if cfg.reorder_augment else 0
                     for i in batch]
            samples = [train.get(i, r) for i, r in zip(batch, roots)]
            loss, logits = supervised_step(state.model, samples)
            backward(loss)
            optimizer_step(state, cfg.lr, cfg.weight_decay)
            total += loss.item() * len(batch)
            for b, s in enumerate(samples):
                h, n = teacher_forced_accuracy(logits.data[b, :len(s[2])], s[2], s[3])
                hits += h
                count += n
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        state.epoch = epoch + 1
        logger.write(epoch, "train", total / max(len(order), 1), hits / max(count, 1),
                     skipped=len(train.skipped), seconds=round(time.perf_counter() - t0, 3))
        if val.records and _due(cfg, epoch):
            vidx = [i for i in range(len(val.records)) if val.valid(i)]
            counters = {}
            vloss, vacc = teacher_forced_eval(state.model, val, vidx, extra=counters)
            viou = None
            if cfg.val_decode:
                viou = float(np.mean(assembly_iou(state.model, [val.records[i] for i in vidx],
                                                  cfg.tau, cfg.max_bricks)))
            logger.write(epoch, "val", vloss, vacc, viou, **counters)
        log.info("epoch %d loss %.4f", epoch, logger.rows[-1]["loss"])
        if checkpoint_path:
            save_checkpoint(checkpoint_path, state)
        if max_steps is not None and steps >= max_steps:
            break
    return state, logger.rows


# --------------------------------------------------------------------------
# self-training


def selftrain_step(model, images, cfg, geom):
    """Decode, re-run the decoder with gradients, and score the projected silhouettes."""
    decoded = assemble_batch(images, model, cfg.tau, cfg.max_bricks)
    trees = [d[0] for d in decoded]
    feats, _ = pad_features([query_features(t) for t in trees])
    logits = model.forward(images, feats)
    probs = placement_probs(logits, geom.n_types)
    losses = []
    for b, (tree, records, _) in enumerate(decoded):
        legal = np.array([r.legal for r in records], dtype=probs.dtype)
        p = T.getitem(probs, (b, slice(0, len(tree)))) * legal
        pred = render_probabilistic(tree.bricks, p, geom, cfg.alpha, cfg.projection)
        losses.append(silhouette_loss(pred, images[b]))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return T.scale(total, 1.0 / len(losses)), trees


def selftrain(records, cfg, state, val_records=(), metrics_path=None, checkpoint_path=None,
              epoch_offset=None, reset_optimizer=True):
    """Fit the decoder to silhouettes alone; assembly labels are never read.

    Records only need ``views()``; target voxels, when present, are used for
    the logged IoU and nothing else. Adam moments from pre-training are
    dropped unless ``reset_optimizer`` is False (resuming a self-training run).
    """
    geom = Geometry(state.model.cfg.grid)
    if reset_optimizer:
        state.adam = init_adam_state()
    images_all = np.stack([r.views() for r in records]).astype(np.float32)
    logger = MetricsLog(metrics_path)
    start = state.epoch if epoch_offset is None else epoch_offset
    for epoch in range(start, start + cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(records))
        total = 0.0
        for batch in _batches(order, cfg.batch_size):
            loss, _ = selftrain_step(state.model, images_all[batch], cfg, geom)
            backward(loss)
            optimizer_step(state, cfg.lr, cfg.weight_decay)
            total += loss.item() * len(batch)
        state.epoch = epoch + 1
        logger.write(epoch, "train", total / max(len(records), 1),
                     seconds=round(time.perf_counter() - t0, 3))
        if val_records and _due_self(cfg, epoch - start):
            vimages = np.stack([r.views() for r in val_records]).astype(np.float32)
            vloss = 0.0
            with no_grad():
                for batch in _batches(np.arange(len(val_records)), cfg.batch_size):
                    vloss += selftrain_step(state.model, vimages[batch], cfg, geom)[0].item() * len(batch)
            values = assembly_iou(state.model, val_records, cfg.tau, cfg.max_bricks)
            logger.write(epoch, "val", vloss / len(val_records), None, float(np.mean(values)))
        if checkpoint_path:
            save_checkpoint(checkpoint_path, state)
    return state, logger.rows


def _due_self(cfg, k):
    return k + 1 == cfg.epochs or (cfg.eval_every and (k + 1) % cfg.eval_every == 0)
