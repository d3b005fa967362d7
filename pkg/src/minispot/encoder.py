"""Multi-level token construction and the efficient-mixer encoder.

The mixer replaces the quadratic query-key product with a learned
per-channel weight vector: a single projection produces Q (= K), a second
produces V, and K @ w_m yields one attention scalar per token. V is scaled
row-wise by that vector, passed through a linear layer, added to Q, and
projected once more. No N x N buffer is ever materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Conv2d, LayerNorm, Linear, Tensor, gelu, mlp, softmax

__all__ = [
    "LevelSpan",
    "TokenFeatures",
    "MixerTrace",
    "EfficientMixer",
    "EMTBlock",
    "EncoderStack",
    "MultiLevelTokenizer",
    "token_coordinates",
]


@dataclass(frozen=True)
class LevelSpan:
    level: int
    start: int
    length: int
    height: int
    width: int


@dataclass
class TokenFeatures:
    """Flattened multi-level feature sequence [N, C] with its level layout."""
    tokens: Tensor
    level_spans: list[LevelSpan]

    def __post_init__(self):
        n = self.tokens.shape[0]
        if sum(s.length for s in self.level_spans) != n:
            raise ValueError("level spans do not cover the token sequence")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


@dataclass
class MixerTrace:
    """Inspection record of one mixer application."""
    w_attn: np.ndarray
    g: np.ndarray
    largest_intermediate: tuple[int, ...] = field(default=())


def token_coordinates(level_spans: list[LevelSpan]) -> np.ndarray:
    """Normalized (x, y) cell-center coordinate of every token, [N, 2]."""
    coords = []
    for span in level_spans:
        ys, xs = np.mgrid[0:span.height, 0:span.width]
        cx = (xs.reshape(-1) + 0.5) / span.width
        cy = (ys.reshape(-1) + 0.5) / span.height
        coords.append(np.stack([cx, cy], axis=1))
    return np.concatenate(coords, axis=0)


class MultiLevelTokenizer:
    """Builds the token sequence from three backbone maps plus a derived level.

    The coarsest input map is downsampled once more by a 3x3 stride-2 conv;
    all four maps are flattened row-major and concatenated in level order.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        self.extra_conv = Conv2d(channels, channels, rng, kernel=3, stride=2,
                                 padding=1, dtype=dtype)

    def __call__(self, f3: Tensor, f4: Tensor, f5: Tensor) -> TokenFeatures:
        maps = [(3, f3), (4, f4), (5, f5)]
        for _, fmap in maps:
            if fmap.shape[-1] != self.channels:
                raise ValueError(
                    f"channel mismatch: expected {self.channels}, got {fmap.shape[-1]}")
        f6 = self.extra_conv(f5)
        maps.append((6, f6))
        spans, flat, start = [], [], 0
        for level, fmap in maps:
            h, w, c = fmap.shape
            if h < 1 or w < 1:
                raise ValueError(f"level {level} collapsed to empty spatial extent")
            spans.append(LevelSpan(level, start, h * w, h, w))
            flat.append(fmap.reshape(h * w, c))
            start += h * w
        return TokenFeatures(Tensor.concat(flat, axis=0), spans)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.extra_conv.params(f"{prefix}.extra_conv")


class EfficientMixer:
    """Linear-complexity token mixer with a learnable multi-level weight vector."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.channels = channels
        scale = 1.0 / np.sqrt(channels)
        self.w_k = Tensor(rng.normal(0.0, scale, size=(channels, channels)).astype(dtype),
                          requires_grad=True)
        self.w_v = Tensor(rng.normal(0.0, scale, size=(channels, channels)).astype(dtype),
                          requires_grad=True)
        self.w_m = Tensor(rng.normal(0.0, scale, size=(channels,)).astype(dtype),
                          requires_grad=True)
        self.phi_inner = Linear(channels, channels, rng, dtype=dtype)
        # small output scale keeps the surrounding residual block close to
        # the identity at init, so stacking mixers never starts worse than
        # the unmixed features
        self.phi_outer = Linear(channels, channels, rng, dtype=dtype,
                                scale=0.01 / np.sqrt(channels))
        self.d = float(channels)

    def __call__(self, x: Tensor, check_finite: bool = True) -> tuple[Tensor, MixerTrace]:
        stages: list[tuple[str, Tensor]] = []

        q = x.matmul(self.w_k)          # Q and K are the same projection
        stages.append(("q", q))
        v = x.matmul(self.w_v)
        stages.append(("v", v))
        w_attn = q.matmul(self.w_m)     # [N]
        stages.append(("w_attn", w_attn))
        context = v * w_attn.reshape(-1, 1) * (1.0 / np.sqrt(self.d))
        stages.append(("context", context))
        g = self.phi_inner(context)
        stages.append(("g", g))
        out = self.phi_outer(g + q)
        stages.append(("out", out))

        if check_finite:
            for name, t in stages:
                if not np.all(np.isfinite(t.data)):
                    raise FloatingPointError(f"non-finite values at mixer stage '{name}'")

        largest = max((t.shape for _, t in stages), key=np.prod)
        trace = MixerTrace(w_attn=w_attn.data.copy(), g=g.data.copy(),
                           largest_intermediate=tuple(largest))
        return out, trace

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v,
               f"{prefix}.w_m": self.w_m}
        out.update(self.phi_inner.params(f"{prefix}.phi_inner"))
        out.update(self.phi_outer.params(f"{prefix}.phi_outer"))
        return out


class EMTBlock:
    """Pre-norm residual block: x = EM(LN(f)) + f; out = MLP(LN(x)) + x."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 hidden: int | None = None, dtype=np.float32):
        hidden = hidden or 2 * channels
        self.ln1 = LayerNorm(channels, dtype=dtype)
        self.mixer = EfficientMixer(channels, rng, dtype=dtype)
        self.ln2 = LayerNorm(channels, dtype=dtype)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype,
                          scale=0.01 / np.sqrt(hidden))

    def __call__(self, f: TokenFeatures) -> TokenFeatures:
        mixed, _ = self.mixer(self.ln1(f.tokens))
        x = mixed + f.tokens
        out = mlp(self.ln2(x), [self.fc1, self.fc2], gelu) + x
        return TokenFeatures(out, f.level_spans)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.ln1.params(f"{prefix}.ln1"))
        out.update(self.mixer.params(f"{prefix}.mixer"))
        out.update(self.ln2.params(f"{prefix}.ln2"))
        out.update(self.fc1.params(f"{prefix}.fc1"))
        out.update(self.fc2.params(f"{prefix}.fc2"))
        return out


class EncoderStack:
    def __init__(self, channels: int, depth: int, rng: np.random.Generator, dtype=np.float32):
        if depth < 1:
            raise ValueError("encoder depth must be >= 1")
        self.blocks = [EMTBlock(channels, rng, dtype=dtype) for _ in range(depth)]

    def __call__(self, f: TokenFeatures) -> TokenFeatures:
        for block in self.blocks:
            f = block(f)
        return f

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{prefix}.block{i}"))
        return out


def softmax_attention(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tensor:
    """Reference quadratic single-head attention, used for benchmark contrast."""
    q = x.matmul(w_q)
    k = x.matmul(w_k)
    v = x.matmul(w_v)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = q.matmul(k.swapaxes(-1, -2)) * scale
    return softmax(scores, axis=-1).matmul(v)
