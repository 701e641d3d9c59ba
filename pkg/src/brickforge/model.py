"""Tree-transformer: patch image encoder, brick queries, causal decoder, two-sided head."""

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import _kernels
from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor, no_grad
from .bricks import DOWN, UP, BrickPose, Geometry, _unchecked_child, flat_cells
from .errors import BadImageSize, IndexOutOfRange, TooManyBricks
from .tree import DecodeReport, Edge, LegoTree

ROOT_TYPE = 16
ROOT_DIR = 2
N_FEATURES = 7  # t, dir, dep, x, y, z, r


@dataclass
class ModelConfig:
    feature_dim: int = 64
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 8
    mlp_dim: int = 512
    image_size: int = 64
    patch_size: int = 16
    channels: int = 3
    n_types: int = 16
    max_bricks: int = 64
    grid: int = 32
    use_str: bool = True
    use_geo: bool = True
    head_bias: float = -2.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.feature_dim % self.heads:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by {self.heads} heads")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_slots(self):
        return 2 * (self.n_types + 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = getattr(cls, k)
            out[k] = type(default)(v) if not isinstance(default, bool) else bool(round(float(v)))
        return cls(**out)


def expected_parameter_count(cfg):
    D, M, L = cfg.feature_dim, cfg.mlp_dim, cfg.n_types
    ln = 2 * D
    attn = 4 * (D * D + D)
    mlp = D * M + M + M * D + D
    patch_in = cfg.channels * cfg.patch_size ** 2
    enc = patch_in * D + D + cfg.n_patches * D + cfg.enc_layers * (2 * ln + attn + mlp) + ln
    dec = cfg.dec_layers * (3 * ln + 2 * attn + mlp) + ln
    emb = (L + 1 + 3 + cfg.max_bricks + 1 + cfg.grid + 1 + 2) * D
    head = 2 * (D * (L + 1) + L + 1)
    return enc + dec + emb + head


# --------------------------------------------------------------------------
# image input


def prepare_images(images, cfg):
    """[3,S,S] or [B,3,S,S] silhouettes -> [B, patches, C*p*p] patch rows."""
    x = np.asarray(images, dtype=T.get_default_dtype())
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2] != x.shape[3]:
        raise BadImageSize(f"expected [{cfg.channels}, S, S] views, got shape {tuple(np.shape(images))}")
    S = x.shape[2]
    if S <= 0 or cfg.image_size % S:
        raise BadImageSize(f"view size {S} does not divide model image size {cfg.image_size}")
    f = cfg.image_size // S
    if f > 1:
        x = x.repeat(f, axis=2).repeat(f, axis=3)
    B, C, H, W = x.shape
    p = cfg.patch_size
    x = x.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // p) * (W // p), C * p * p)


# --------------------------------------------------------------------------
# modules


class EncoderBlock(nn.Module):
    def __init__(self, cfg, rng):
        self.ln1 = nn.LayerNorm(cfg.feature_dim)
        self.attn = nn.MultiHeadAttention(cfg.feature_dim, cfg.heads, rng)
        self.ln2 = nn.LayerNorm(cfg.feature_dim)
        self.mlp = nn.MLP(cfg.feature_dim, cfg.mlp_dim, rng)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg, rng):
        self.patch = nn.Linear(cfg.channels * cfg.patch_size ** 2, cfg.feature_dim, rng)
        self.pos = nn.Parameter(rng.normal(0.0, 0.02, size=(cfg.n_patches, cfg.feature_dim)))
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.enc_layers)]
        self.ln = nn.LayerNorm(cfg.feature_dim)

    def __call__(self, patches):
        x = self.patch(Tensor(patches)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


class BrickEmbedding(nn.Module):
    """E(b) = E_t + E_dir + E_dep + E_p(x) + E_p(y) + E_p(z) + E_r with one shared E_p."""

    def __init__(self, cfg, rng):
        D = cfg.feature_dim
        self.sizes = (cfg.n_types + 1, 3, cfg.max_bricks + 1, cfg.grid + 1, 2)
        self.use_str = cfg.use_str
        self.use_geo = cfg.use_geo
        self.type = nn.Parameter(rng.normal(0.0, 0.02, size=(self.sizes[0], D)))
        self.dir = nn.Parameter(rng.normal(0.0, 0.02, size=(3, D)))
        self.dep = nn.Parameter(rng.normal(0.0, 0.02, size=(self.sizes[2], D)))
        self.pos = nn.Parameter(rng.normal(0.0, 0.02, size=(self.sizes[3], D)))
        self.rot = nn.Parameter(rng.normal(0.0, 0.02, size=(2, D)))

    def check(self, feats):
        feats = np.asarray(feats, dtype=np.int64)
        if feats.shape[-1] != N_FEATURES:
            raise IndexOutOfRange(f"brick features need {N_FEATURES} columns, got {feats.shape}")
        limits = np.array([self.sizes[0], 3, self.sizes[2], self.sizes[3], self.sizes[3],
                           self.sizes[3], 2])
        bad = (feats < 0) | (feats >= limits)
        if bad.any():
            col = int(np.argwhere(bad)[0][-1])
            name = ("type", "dir", "depth", "x", "y", "z", "r")[col]
            raise IndexOutOfRange(f"brick feature {name} out of range: {feats[bad][0]}")
        return feats

    def __call__(self, feats):
        f = self.check(feats)
        terms = []
        if self.use_str:
            terms += [T.embedding(self.type, f[..., 0]), T.embedding(self.dir, f[..., 1]),
                      T.embedding(self.dep, f[..., 2])]
        if self.use_geo:
            terms += [T.embedding(self.pos, f[..., 3]), T.embedding(self.pos, f[..., 4]),
                      T.embedding(self.pos, f[..., 5]), T.embedding(self.rot, f[..., 6])]
        if not terms:
            return Tensor(np.zeros(f.shape[:-1] + (self.type.shape[1],), dtype=self.type.dtype))
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out


class DecoderBlock(nn.Module):
    def __init__(self, cfg, rng):
        self.ln1 = nn.LayerNorm(cfg.feature_dim)
        self.self_attn = nn.MultiHeadAttention(cfg.feature_dim, cfg.heads, rng)
        self.ln2 = nn.LayerNorm(cfg.feature_dim)
        self.cross_attn = nn.MultiHeadAttention(cfg.feature_dim, cfg.heads, rng)
        self.ln3 = nn.LayerNorm(cfg.feature_dim)
        self.mlp = nn.MLP(cfg.feature_dim, cfg.mlp_dim, rng)

    def __call__(self, x, self_k, self_v, cross_k, cross_v, mask, h=None):
        h = self.ln1(x) if h is None else h
        x = x + self.self_attn.attend(h, self_k, self_v, mask)
        x = x + self.cross_attn.attend(self.ln2(x), cross_k, cross_v)
        return x + self.mlp(self.ln3(x))


class BrickDecoder(nn.Module):
    def __init__(self, cfg, rng):
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.dec_layers)]
        self.ln = nn.LayerNorm(cfg.feature_dim)


class ActionHead(nn.Module):
    """Two feature_dim -> (n_types + 1) maps: [up types, up-stop, down types, down-stop]."""

    def __init__(self, cfg, rng):
        self.up = nn.Linear(cfg.feature_dim, cfg.n_types + 1, rng)
        self.down = nn.Linear(cfg.feature_dim, cfg.n_types + 1, rng)
        # placement slots start at a sparse prior, stop slots at 0.5
        self.up.b.data[:cfg.n_types] = cfg.head_bias
        self.down.b.data[:cfg.n_types] = cfg.head_bias

    def __call__(self, h):
        return T.concat([self.up(h), self.down(h)], axis=-1)


def causal_mask(L):
    return np.triu(np.ones((L, L), dtype=bool), k=1)[None, None]


class TreeTransformer(nn.Module):
    def __init__(self, cfg=None, seed=0):
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.enc = ImageEncoder(cfg, rng)
        self.emb = BrickEmbedding(cfg, rng)
        self.dec = BrickDecoder(cfg, rng)
        self.head = ActionHead(cfg, rng)

    @property
    def geometry(self):
        return Geometry(self.cfg.grid)

    def encode_images(self, images):
        """Silhouette views -> image features [B, patches, feature_dim]."""
        return self.enc(prepare_images(images, self.cfg))

    def embed_brick(self, feats):
        return self.emb(feats)

    def decode_step_logits(self, image_feats, feats):
        """Teacher-forced logits [B, L, 34] for brick queries ``feats`` [B, L, 7]."""
        feats = np.asarray(feats, dtype=np.int64)
        if feats.ndim == 2:
            feats = feats[None]
        L = feats.shape[1]
        if L > self.cfg.max_bricks:
            raise TooManyBricks(f"{L} bricks exceed the model limit of {self.cfg.max_bricks}")
        x = self.emb(feats)
        mask = causal_mask(L)
        for blk in self.dec.blocks:
            h = blk.ln1(x)
            k, v = blk.self_attn.keys_values(h)
            ck, cv = blk.cross_attn.keys_values(image_feats)
            x = blk(x, k, v, ck, cv, mask, h=h)
        return self.head(self.dec.ln(x))

    def forward(self, images, feats):
        return self.decode_step_logits(self.encode_images(images), feats)

    __call__ = forward


# --------------------------------------------------------------------------
# queries and slot bookkeeping


def query_features(tree):
    """Per-brick query indices [n, 7] computed from the tree's edges and poses."""
    out = np.zeros((len(tree), N_FEATURES), dtype=np.int64)
    for i, (p, e, d) in enumerate(zip(tree.bricks, tree.edge, tree.depth)):
        t, dr = (ROOT_TYPE, ROOT_DIR) if e is None else (e.ctype.index, e.direction)
        out[i] = (t, dr, d, p.x, p.y, p.z, p.r)
    return out


def pad_features(feature_list):
    L = max(len(f) for f in feature_list)
    out = np.zeros((len(feature_list), L, N_FEATURES), dtype=np.int64)
    valid = np.zeros((len(feature_list), L), dtype=bool)
    for b, f in enumerate(feature_list):
        out[b, :len(f)] = f
        valid[b, :len(f)] = True
    return out, valid


def placement_logit_index(n_types=16):
    """Logit column of each of the 2 * n_types placement slots (skipping the stop slots)."""
    c = np.arange(2 * n_types)
    return c + (c >= n_types)


def placement_probs(logits, n_types=16):
    """Sigmoid probabilities of the placement slots, [..., 2 * n_types]."""
    idx = placement_logit_index(n_types)
    return T.sigmoid(T.getitem(logits, (Ellipsis, idx)))


# --------------------------------------------------------------------------
# autoregressive decoding


class ActionProbRecord(NamedTuple):
    pose: BrickPose
    probs: np.ndarray  # [32], zero on illegal placements
    legal: np.ndarray  # [32] bool


class _DecodeState:
    def __init__(self, geom, occupancy, max_bricks):
        root = geom.root_pose
        self.tree = LegoTree([root], [None], [None], [0], geom)
        self.flat = np.zeros(geom.n_cells, dtype=np.uint8)
        if occupancy is not None:
            self.flat |= (np.asarray(occupancy).reshape(-1) > 0).astype(np.uint8)
        self.flat[flat_cells(root, geom)] = 1
        self.max_bricks = max_bricks
        self.probs = []
        self.evaluated = 0
        self.expanded = 0
        self.report = DecodeReport()
        self.records = []


def assemble_batch(images, model, tau=0.5, max_bricks=None, occupancy=None, counter=None):
    """Decode a batch of silhouette sets; returns a list of (tree, records, report).

    Bricks are evaluated in waves: every brick spawned so far but not yet
    scored goes through the decoder together, re-using cached self-attention
    keys/values of earlier bricks, so each brick's head runs exactly once.
    Expansion is sequential in BFS order against a live occupancy grid, so
    illegal placements are never emitted.
    """
    cfg = model.cfg
    geom = Geometry(cfg.grid)
    N = min(max_bricks or cfg.max_bricks, cfg.max_bricks)
    n_types = cfg.n_types
    place_idx = placement_logit_index(n_types)
    with no_grad():
        mem = model.encode_images(images)
        B = mem.shape[0]
        occ = [None] * B
        if occupancy is not None:
            occ_arr = np.asarray(occupancy)
            occ = [occ_arr] * B if occ_arr.ndim == 3 else list(occ_arr)
        states = [_DecodeState(geom, occ[b], N) for b in range(B)]
        blocks = model.dec.blocks
        H = cfg.heads
        dh = cfg.feature_dim // H
        dtype = mem.dtype
        cross = [blk.cross_attn.keys_values(mem) for blk in blocks]
        cache_k = [np.zeros((B, H, N, dh), dtype=dtype) for _ in blocks]
        cache_v = [np.zeros((B, H, N, dh), dtype=dtype) for _ in blocks]
        while True:
            active = [b for b in range(B) if states[b].evaluated < len(states[b].tree)]
            if not active:
                break
            starts = np.array([states[b].evaluated for b in active])
            ends = np.array([len(states[b].tree) for b in active])
            W = int((ends - starts).max())
            K = int(ends.max())
            feats = np.zeros((len(active), W, N_FEATURES), dtype=np.int64)
            for i, b in enumerate(active):
                f = query_features(states[b].tree)[starts[i]:ends[i]]
                feats[i, :len(f)] = f
            pos = starts[:, None] + np.arange(W)[None, :]
            allowed_upto = np.minimum(pos, ends[:, None] - 1)
            mask = (np.arange(K)[None, None, :] > allowed_upto[:, :, None])[:, None]
            x = model.emb(feats)
            for li, blk in enumerate(blocks):
                h = blk.ln1(x)
                k_new, v_new = blk.self_attn.keys_values(h)
                ck = cache_k[li]
                cv = cache_v[li]
                for i, b in enumerate(active):
                    n = ends[i] - starts[i]
                    ck[b, :, starts[i]:ends[i]] = k_new.data[i, :, :n]
                    cv[b, :, starts[i]:ends[i]] = v_new.data[i, :, :n]
                k = Tensor(ck[active, :, :K])
                v = Tensor(cv[active, :, :K])
                xk = Tensor(cross[li][0].data[active])
                xv = Tensor(cross[li][1].data[active])
                x = blk(x, k, v, xk, xv, mask, h=h)
            logits = model.head(model.dec.ln(x)).data
            probs = 1.0 / (1.0 + np.exp(-logits[..., place_idx].astype(np.float64)))
            for i, b in enumerate(active):
                st = states[b]
                n = ends[i] - starts[i]
                st.probs.extend(probs[i, :n])
                st.evaluated = int(ends[i])
                if counter is not None:
                    counter["head_evals"] = counter.get("head_evals", 0) + int(n)
                _expand_ready(st, geom, tau)
    return [(st.tree, st.records, st.report) for st in states]


def _expand_ready(st, geom, tau):
    tree = st.tree
    while st.expanded < st.evaluated:
        n = st.expanded
        p = tree.bricks[n]
        probs = st.probs[n]
        legal, spawned = _kernels.expand_brick(
            st.flat, geom.size, p.x, p.y, p.z, p.r,
            geom.slot_offsets, geom.cell_offsets, probs >= tau,
            st.max_bricks - len(tree.bricks),
        )
        st.report.consumed += 1
        st.report.legal.append(legal)
        st.report.dropped += int(((probs >= tau) & legal).sum() - spawned.sum())
        st.records.append(ActionProbRecord(p, np.where(legal, probs, 0.0), legal))
        for c in np.flatnonzero(spawned):
            t, d = geom.slot_to_edge(int(c))
            tree.bricks.append(_unchecked_child(p, t, d))
            tree.parent.append(n)
            tree.edge.append(Edge(t, d))
            tree.depth.append(tree.depth[n] + 1)
        st.expanded += 1


def autoregressive_assemble(images, model, tau=0.5, max_bricks=None, occupancy=None, counter=None):
    """Assemble one object from its three views: returns (tree, probability records)."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise BadImageSize(f"expected one [3, S, S] silhouette set, got shape {images.shape}")
    tree, records, _ = assemble_batch(images[None], model, tau, max_bricks, occupancy, counter)[0]
    return tree, records


def predicted_actions(records, n_types=16, tau=0.5):
    """Thresholded legal placements per brick as ActionRecords."""
    from .tree import ActionRecord

    out = []
    for r in records:
        on = np.flatnonzero(r.probs >= tau)
        out.append(ActionRecord([c for c in on if c < n_types], [c - n_types for c in on if c >= n_types]))
    return out


__all__ = [
    "ModelConfig", "TreeTransformer", "ActionProbRecord", "autoregressive_assemble",
    "assemble_batch", "query_features", "pad_features", "placement_probs",
    "placement_logit_index", "expected_parameter_count", "prepare_images", "causal_mask",
    "predicted_actions", "UP", "DOWN",
]
