"""End-to-end desk-scale spotter.

Pipeline: tiny strided-conv backbone -> multi-level tokens -> efficient-mixer
encoder -> spline proposal head (control points, top-K, curve sampling,
positional queries) -> transformer decoder over per-point queries -> four
prediction heads (instance score, characters, center points, bounding box),
trained with Hungarian set matching.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .encoder import EncoderStack, MultiLevelTokenizer, TokenFeatures, token_coordinates
from .errors import NumericError
from .splines import (
    BOUNDARY_CLAMP,
    PositionalQueryHead,
    ProposalSet,
    sample_curve,
    sample_curve_batch,
    select_topk,
)
from .tensor import Conv2d, LayerNorm, Linear, Tensor, gelu, log_softmax, mlp, softmax

__all__ = [
    "SpotterConfig",
    "SpotterModel",
    "SpotterOutput",
    "GtInstance",
    "AdamW",
    "transcribe",
    "build_point_char_targets",
    "compute_loss",
    "hungarian_match",
    "brute_force_match",
    "train_step",
]

BLANK_OFFSET = 0  # blank class index is num_classes

# loss weights: instance focal, character CE, center-point L1, bbox L1,
# plus the auxiliary per-token proposal-score focal term
LOSS_WEIGHTS = {"instance": 2.0, "char": 1.0, "points": 5.0, "bbox": 2.0,
                "proposal": 1.0}
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class SpotterConfig:
    channels: int = 32
    encoder_depth: int = 2
    decoder_depth: int = 2
    num_proposals: int = 100      # K
    points_per_curve: int = 25    # n
    num_classes: int = 96
    image_size: int = 128
    tau: float = 0.5
    backbone_stem: int = 16
    # ablation switches: disable token mixing (memory = raw tokens) or
    # curve-sampled queries (all n queries collapse to the proposal centroid)
    mix_features: bool = True
    curve_queries: bool = True

    def __post_init__(self):
        if self.num_proposals < 1:
            raise ValueError("num_proposals must be >= 1")
        if self.points_per_curve < 2:
            raise ValueError("points_per_curve must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.image_size % 32 != 0:
            raise ValueError("image_size must be divisible by 32")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SpotterConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SpotterOutput:
    """Forward-pass result; fields are graph Tensors during training."""
    instance_logits: Tensor        # [K]
    char_logits: Tensor            # [K, n, num_classes + 1]
    center_points: Tensor          # [K, n, 2], in [0, 1]
    bbox: Tensor                   # [K, 4] normalized (cx, cy, w, h)
    proposals: ProposalSet
    token_score_logits: Tensor     # [N] per-token proposal scores
    token_coords: np.ndarray       # [N, 2]
    memory: TokenFeatures


@dataclass
class GtInstance:
    control_points: np.ndarray     # [4, 2] normalized
    char_ids: np.ndarray           # [L] ints < num_classes
    bbox: np.ndarray               # [4] normalized (cx, cy, w, h)
    sampled_points: np.ndarray = field(default=None)  # [n, 2], filled lazily

    def points(self, n: int, tau: float) -> np.ndarray:
        if self.sampled_points is None or self.sampled_points.shape[0] != n:
            self.sampled_points = sample_curve(self.control_points, n, tau)
        return self.sampled_points


class Backbone:
    """Small strided-conv stack emitting maps at strides 8, 16, 32."""

    def __init__(self, channels: int, stem: int, rng: np.random.Generator, dtype=np.float32):
        self.convs = [
            Conv2d(1, stem, rng, stride=2, dtype=dtype),
            Conv2d(stem, channels, rng, stride=2, dtype=dtype),
            Conv2d(channels, channels, rng, stride=2, dtype=dtype),  # -> F3
            Conv2d(channels, channels, rng, stride=2, dtype=dtype),  # -> F4
            Conv2d(channels, channels, rng, stride=2, dtype=dtype),  # -> F5
        ]

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h, w = image.shape[:2]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"image extents {(h, w)} not divisible by 32")
        x = image.reshape(h, w, 1)
        x = gelu(self.convs[0](x))
        x = gelu(self.convs[1](x))
        f3 = self.convs[2](x)
        f4 = self.convs[3](gelu(f3))
        f5 = self.convs[4](gelu(f4))
        return f3, f4, f5

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        return out


class ProposalHead:
    """Per-token control-point offsets and scores; top-K spline proposals."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.offset_fc1 = Linear(channels, 2 * channels, rng, dtype=dtype)
        self.offset_fc2 = Linear(2 * channels, 8, rng, dtype=dtype, scale=1e-3)
        self.score = Linear(channels, 1, rng, dtype=dtype)

    def __call__(self, memory: TokenFeatures, coords: np.ndarray, k: int,
                 n: int, tau: float,
                 curve: bool = True) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
        """Returns (score_logits [N], control_points [K,4,2], sampled [K,n,2], idx)."""
        tokens = memory.tokens
        offsets = mlp(tokens, [self.offset_fc1, self.offset_fc2], gelu)  # [N, 8]
        score_logits = self.score(tokens).reshape(-1)                    # [N]

        idx = select_topk(score_logits.data, k)
        p_hat = np.clip(coords[idx], BOUNDARY_CLAMP, 1.0 - BOUNDARY_CLAMP)
        logit_p = (np.log(p_hat) - np.log1p(-p_hat)).astype(tokens.dtype)
        top_offsets = offsets.take(idx, axis=0).reshape(k, 4, 2)
        crp = (top_offsets + Tensor(logit_p.reshape(k, 1, 2))).sigmoid()
        if curve:
            sampled = sample_curve_batch(crp, n, tau)
        else:
            # curvature-blind queries: points interpolate the end controls
            t = np.linspace(0.0, 1.0, n)
            w = np.zeros((n, 4), dtype=tokens.dtype)
            w[:, 0] = 1.0 - t
            w[:, 3] = t
            sampled = Tensor(w).matmul(crp)
        return score_logits, crp, sampled, idx

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.offset_fc1.params(f"{prefix}.offset_fc1")
        out.update(self.offset_fc2.params(f"{prefix}.offset_fc2"))
        out.update(self.score.params(f"{prefix}.score"))
        return out


class DecoderLayer:
    """Grouped self-attention, cross-attention to encoder memory, feed-forward."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        c = channels
        self.ln1 = LayerNorm(c, dtype=dtype)
        self.self_q = Linear(c, c, rng, dtype=dtype)
        self.self_k = Linear(c, c, rng, dtype=dtype)
        self.self_v = Linear(c, c, rng, dtype=dtype)
        self.self_o = Linear(c, c, rng, dtype=dtype)
        self.ln2 = LayerNorm(c, dtype=dtype)
        self.cross_q = Linear(c, c, rng, dtype=dtype)
        self.cross_k = Linear(c, c, rng, dtype=dtype)
        self.cross_v = Linear(c, c, rng, dtype=dtype)
        self.cross_o = Linear(c, c, rng, dtype=dtype)
        self.ln3 = LayerNorm(c, dtype=dtype)
        self.fc1 = Linear(c, 2 * c, rng, dtype=dtype)
        self.fc2 = Linear(2 * c, c, rng, dtype=dtype)
        self.scale = 1.0 / np.sqrt(c)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        # self-attention stays within each instance group of n points
        h = self.ln1(x)
        q, k, v = self.self_q(h), self.self_k(h), self.self_v(h)
        attn = softmax(q.matmul(k.swapaxes(-1, -2)) * self.scale, axis=-1)
        x = x + self.self_o(attn.matmul(v))

        h = self.ln2(x)
        q = self.cross_q(h)
        mk = self.cross_k(memory)
        mv = self.cross_v(memory)
        attn = softmax(q.matmul(mk.swapaxes(0, 1)) * self.scale, axis=-1)
        x = x + self.cross_o(attn.matmul(mv))

        h = self.ln3(x)
        return x + mlp(h, [self.fc1, self.fc2], gelu)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("ln1", "self_q", "self_k", "self_v", "self_o", "ln2",
                     "cross_q", "cross_k", "cross_v", "cross_o", "ln3",
                     "fc1", "fc2"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out


class PredictionHeads:
    """Instance score, character class, center points, and bounding box."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.instance = Linear(channels, 1, rng, dtype=dtype)
        self.chars = Linear(channels, num_classes + 1, rng, dtype=dtype)
        self.point_offset = Linear(channels, 2, rng, dtype=dtype, scale=1e-3)
        self.bbox = Linear(channels, 4, rng, dtype=dtype)

    def __call__(self, decoded: Tensor, sampled: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        pooled = decoded.mean(axis=1)                           # [K, C]
        inst = self.instance(pooled).reshape(-1)                # [K]
        chars = self.chars(decoded)                             # [K, n, cls+1]
        ps = sampled.clamp(BOUNDARY_CLAMP, 1.0 - BOUNDARY_CLAMP)
        ps_logit = ps.log() - (1.0 - ps).log()
        centers = (self.point_offset(decoded) + ps_logit).sigmoid()
        bbox = self.bbox(pooled).sigmoid()                      # [K, 4]
        return inst, chars, centers, bbox

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("instance", "chars", "point_offset", "bbox"):
            out.update(getattr(self, name).params(f"{prefix}.{name}"))
        return out


class SpotterModel:
    def __init__(self, config: SpotterConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = config.channels
        self.backbone = Backbone(c, config.backbone_stem, rng, dtype=dtype)
        self.tokenizer = MultiLevelTokenizer(c, rng, dtype=dtype)
        self.encoder = EncoderStack(c, config.encoder_depth, rng, dtype=dtype)
        self.proposal_head = ProposalHead(c, rng, dtype=dtype)
        self.query_head = PositionalQueryHead(c, rng, dtype=dtype)
        self.decoder = [DecoderLayer(c, rng, dtype=dtype)
                        for _ in range(config.decoder_depth)]
        self.heads = PredictionHeads(c, config.num_classes, rng, dtype=dtype)
        self._coords_cache: dict[tuple, np.ndarray] = {}

    # -- forward ---------------------------------------------------------

    def decoder_forward(self, queries: Tensor, memory: TokenFeatures) -> Tensor:
        x = queries
        for layer in self.decoder:
            x = layer(x, memory.tokens)
        return x

    def forward(self, image: np.ndarray) -> SpotterOutput:
        cfg = self.config
        img = Tensor(np.asarray(image, dtype=self.dtype))
        f3, f4, f5 = self.backbone(img)
        tokens = self.tokenizer(f3, f4, f5)
        memory = self.encoder(tokens) if cfg.mix_features else tokens

        key = tuple((s.level, s.height, s.width) for s in memory.level_spans)
        if key not in self._coords_cache:
            self._coords_cache[key] = token_coordinates(memory.level_spans)
        coords = self._coords_cache[key]

        score_logits, crp, sampled, idx = self.proposal_head(
            memory, coords, cfg.num_proposals, cfg.points_per_curve, cfg.tau,
            curve=cfg.curve_queries)
        queries = self.query_head(sampled)
        decoded = self.decoder_forward(queries, memory)
        inst, chars, centers, bbox = self.heads(decoded, sampled)

        proposals = ProposalSet(
            control_points=crp.data.copy(),
            sampled_points=np.clip(sampled.data, 0.0, 1.0),
            scores=score_logits.data[idx].copy(),
            n=cfg.points_per_curve)
        return SpotterOutput(instance_logits=inst, char_logits=chars,
                             center_points=centers, bbox=bbox,
                             proposals=proposals, token_score_logits=score_logits,
                             token_coords=coords, memory=memory)

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.backbone.params("backbone"))
        out.update(self.tokenizer.params("tokenizer"))
        if self.config.mix_features:
            out.update(self.encoder.params("encoder"))
        out.update(self.proposal_head.params("proposal"))
        out.update(self.query_head.params("query"))
        for i, layer in enumerate(self.decoder):
            out.update(layer.params(f"decoder.layer{i}"))
        out.update(self.heads.params("heads"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        for name, tensor in params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing parameter '{name}'")
            arr = arrays[name].astype(tensor.dtype)
            if arr.shape != tensor.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape}, model {tensor.shape}")
            tensor.data = arr


# -- transcription --------------------------------------------------------


def transcribe(char_logits: np.ndarray, alphabet: str) -> str:
    """Per-point argmax, collapse adjacent repeats, drop blanks."""
    logits = np.asarray(char_logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite character logits")
    blank = len(alphabet)
    ids = logits.argmax(axis=-1)
    out, prev = [], -1
    for i in ids:
        if i != prev and i != blank:
            out.append(alphabet[i])
        prev = i
    return "".join(out)


def build_point_char_targets(char_ids: np.ndarray, n: int, blank: int) -> np.ndarray:
    """Distribute L characters over n points segment-wise.

    The first point of a segment whose character repeats the previous
    segment's becomes blank, so collapse-decoding recovers the string.
    """
    char_ids = np.asarray(char_ids)
    length = char_ids.size
    if length == 0:
        return np.full(n, blank, dtype=int)
    seg = np.minimum((np.arange(n) * length) // n, length - 1)
    targets = char_ids[seg].astype(int)
    for i in range(1, n):
        if seg[i] != seg[i - 1] and char_ids[seg[i]] == char_ids[seg[i - 1]]:
            targets[i] = blank
    return targets


# -- matching --------------------------------------------------------------


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimal-cost assignment of targets (columns) to proposals (rows)."""
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])


def brute_force_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Exhaustive assignment enumeration; oracle for the Hungarian matcher."""
    k, g = cost.shape
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(k), g):
        total = sum(cost[p, j] for j, p in enumerate(perm))
        if total < best_cost - 1e-15:
            best_cost = total
            best = [(p, j) for j, p in enumerate(perm)]
    return sorted(best, key=lambda rc: rc[1])


def matching_cost(outputs: SpotterOutput, truths: list[GtInstance],
                  n: int, tau: float) -> np.ndarray:
    """[K, G] assignment cost: score term + center-point L1 + bbox L1."""
    scores = 1.0 / (1.0 + np.exp(-outputs.instance_logits.data))
    centers = outputs.center_points.data
    bbox = outputs.bbox.data
    k = scores.shape[0]
    cost = np.zeros((k, len(truths)))
    for j, gt in enumerate(truths):
        pts = gt.points(n, tau)
        cost[:, j] = (LOSS_WEIGHTS["instance"] * (-scores)
                      + LOSS_WEIGHTS["points"] * np.abs(centers - pts).mean(axis=(1, 2))
                      + LOSS_WEIGHTS["bbox"] * np.abs(bbox - gt.bbox).mean(axis=1))
    return cost


# -- loss --------------------------------------------------------------------


def _focal_loss(logits: Tensor, targets: np.ndarray,
                alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Binary focal loss, summed and normalized by the positive count so a
    handful of matched proposals is not drowned out by the background."""
    t = np.asarray(targets, dtype=logits.dtype)
    p = logits.sigmoid().clamp(1e-7, 1.0 - 1e-7)
    t_t = Tensor(t)
    pt = p * t_t + (1.0 - p) * (1.0 - t_t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    loss = (1.0 - pt) ** gamma * pt.log() * Tensor(-alpha_t)
    return loss.sum() * (1.0 / max(1.0, float(t.sum())))


def compute_loss(outputs: SpotterOutput, truths: list[GtInstance],
                 config: SpotterConfig) -> tuple[Tensor, dict[str, float]]:
    """Hungarian-matched set loss with a fixed per-term weighting."""
    n = config.points_per_curve
    blank = config.num_classes
    k = outputs.instance_logits.shape[0]
    zero = Tensor(np.zeros((), dtype=outputs.instance_logits.dtype))

    inst_targets = np.zeros(k)
    if truths:
        cost = matching_cost(outputs, truths, n, config.tau)
        pairs = hungarian_match(cost)
        rows = [r for r, _ in pairs]
        inst_targets[rows] = 1.0

        gt_pts = np.stack([truths[c].points(n, config.tau) for _, c in pairs])
        gt_box = np.stack([truths[c].bbox for _, c in pairs])
        gt_chars = np.stack([build_point_char_targets(truths[c].char_ids, n, blank)
                             for _, c in pairs])

        m_centers = outputs.center_points.take(rows, axis=0)
        m_bbox = outputs.bbox.take(rows, axis=0)
        m_chars = outputs.char_logits.take(rows, axis=0)

        diff = m_centers - Tensor(gt_pts.astype(m_centers.dtype))
        points_l1 = (diff * diff + 1e-12) ** 0.5
        points_loss = points_l1.mean()
        bdiff = m_bbox - Tensor(gt_box.astype(m_bbox.dtype))
        bbox_loss = ((bdiff * bdiff + 1e-12) ** 0.5).mean()

        logp = log_softmax(m_chars, axis=-1)
        onehot = np.zeros(m_chars.shape, dtype=m_chars.dtype)
        mi, ni = np.meshgrid(np.arange(len(rows)), np.arange(n), indexing="ij")
        onehot[mi, ni, gt_chars] = 1.0
        char_loss = -(logp * Tensor(onehot)).sum(axis=-1).mean()
    else:
        points_loss = bbox_loss = char_loss = zero

    inst_loss = _focal_loss(outputs.instance_logits, inst_targets)

    # auxiliary supervision of the per-token proposal scores: the token
    # nearest each ground-truth curve midpoint (per pyramid level) is positive
    tok_targets = np.zeros(outputs.token_score_logits.shape[0])
    if truths:
        coords = outputs.token_coords
        for gt in truths:
            mid = gt.points(n, config.tau)[n // 2]
            for span in outputs.memory.level_spans:
                sl = slice(span.start, span.start + span.length)
                d = np.abs(coords[sl] - mid).sum(axis=1)
                tok_targets[span.start + int(d.argmin())] = 1.0
    prop_loss = _focal_loss(outputs.token_score_logits, tok_targets)

    total = (LOSS_WEIGHTS["instance"] * inst_loss
             + LOSS_WEIGHTS["char"] * char_loss
             + LOSS_WEIGHTS["points"] * points_loss
             + LOSS_WEIGHTS["bbox"] * bbox_loss
             + LOSS_WEIGHTS["proposal"] * prop_loss)
    breakdown = {
        "instance": float(inst_loss.data),
        "char": float(char_loss.data),
        "points": float(points_loss.data),
        "bbox": float(bbox_loss.data),
        "proposal": float(prop_loss.data),
        "total": float(total.data),
    }
    if not np.isfinite(breakdown["total"]):
        raise NumericError(f"non-finite loss: {breakdown}")
    return total, breakdown


# -- optimizer ----------------------------------------------------------------


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for '{name}'")
            dt = p.data.dtype
            m = self.m[name] = (b1 * self.m[name] + (1.0 - b1) * g).astype(dt)
            v = self.v[name] = (b2 * self.v[name] + (1.0 - b2) * g * g).astype(dt)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * (update + self.weight_decay * p.data)).astype(dt)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m/{name}"] = self.m[name]
            out[f"opt.v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name, p in self.params.items():
            self.m[name] = arrays[f"opt.m/{name}"].astype(p.dtype).reshape(p.shape)
            self.v[name] = arrays[f"opt.v/{name}"].astype(p.dtype).reshape(p.shape)


def train_step(model: SpotterModel, optimizer: AdamW,
               images: list[np.ndarray], truths: list[list[GtInstance]]) -> dict[str, float]:
    """One AdamW update on the mean loss over the batch."""
    optimizer.zero_grad()
    losses, breakdowns = [], []
    for image, truth in zip(images, truths):
        out = model.forward(image)
        loss, bd = compute_loss(out, truth, model.config)
        losses.append(loss)
        breakdowns.append(bd)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    total = total * (1.0 / len(losses))
    total.backward()
    optimizer.step()
    agg = {key: float(np.mean([bd[key] for bd in breakdowns]))
           for key in breakdowns[0]}
    return agg
