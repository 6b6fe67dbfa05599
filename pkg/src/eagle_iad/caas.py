"""A deterministic toy attention stack for studying confidence-aware attention scaling.

Each layer is residual multi-head attention and nothing else::

    x_i^l = x_i^{l-1} + sum_h sum_{j<=i} A^{l,h}_{i,j} x_j^{l-1} W_V^{l,h}

with ``A`` the causal softmax of scaled dot-product logits. A two-column
unembedding reads out "correct" vs "incorrect" at the last position after
every layer (a logit-lens probe).

The seeded weights follow a fixed recipe. Four hidden dimensions carry
meaning: 0 = evidence for the correct answer, 1 = evidence for the incorrect
answer, 2 = visual salience (key side), 3 = a marker shared by the answer
position (query side) and the textual-prior tokens (key side). The answer
position therefore looks at salient image tokens throughout, and at the
textual prior with a gain that rises in late layers, which reproduces the
way a misleading prior can override visual evidence near the output.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

CORRECT, INCORRECT, SALIENCE, MARKER = 0, 1, 2, 3
PRIOR_BIASES = ("correct", "misleading", "none")


@dataclass(frozen=True)
class TokenLayout:
    n_visual: int
    n_text: int
    ground_truth: tuple[int, ...]
    prior: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_visual < 1 or self.n_text < 1:
            raise ValueError("need at least one visual and one text token")
        if any(not 0 <= g < self.n_visual for g in self.ground_truth):
            raise ValueError("ground-truth tokens must be visual tokens")
        if any(not self.n_visual <= p < self.seq_len - 1 for p in self.prior):
            raise ValueError("prior tokens must be text tokens before the answer position")

    @property
    def seq_len(self) -> int:
        return self.n_visual + self.n_text

    @property
    def visual_indices(self) -> np.ndarray:
        return np.arange(self.n_visual)

    @property
    def answer_position(self) -> int:
        return self.seq_len - 1

    @classmethod
    def default(cls, n_visual: int = 16, n_text: int = 8) -> "TokenLayout":
        gt = tuple(range(n_visual // 4, n_visual // 4 + max(1, n_visual // 4)))
        start = n_visual + 1
        prior = tuple(range(start, min(start + 3, n_visual + n_text - 1)))
        return cls(n_visual, n_text, gt, prior)


@dataclass(frozen=True)
class ScenarioParams:
    """Ranges and gains behind the seeded weights; the defaults define the scenario family."""

    visual_strength: tuple[float, float] = (0.6, 1.4)
    salience: tuple[float, float] = (0.0, 3.0)
    prior_strength: tuple[float, float] = (0.6, 2.0)
    marker: float = 1.0
    embed_noise: float = 0.1
    query_gain: float = 2.0
    visual_gain: float = 1.0
    prior_gain_early: float = 0.3
    prior_gain_late: float = 4.0
    late_from: int = 16
    weight_noise: float = 0.05
    value_scale: float = 0.01
    value_noise: float = 0.002
    unembed_noise: float = 0.0


@dataclass(frozen=True)
class AttentionStack:
    layout: TokenLayout
    n_layers: int
    n_heads: int
    d_model: int
    seed: int
    prior_bias: str
    embeddings: np.ndarray  # (S, d)
    w_q: np.ndarray  # (L, H, d, d_head)
    w_k: np.ndarray  # (L, H, d, d_head)
    w_v: np.ndarray  # (L, H, d, d)
    unembed: np.ndarray  # (d, 2): column 0 correct, column 1 incorrect

    @property
    def d_head(self) -> int:
        return self.w_q.shape[-1]


@dataclass(frozen=True)
class CaasConfig:
    alpha: float = 0.6
    beta: float = -0.4
    layer_range: tuple[int, int] = (9, 15)
    renormalize: bool = False
    scale_text: bool = False
    tau: float = -np.inf
    s_max: float = np.inf

    def __post_init__(self):
        lo, hi = self.layer_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid layer range {self.layer_range}")
        if 1 + self.alpha <= 0 or 1 + self.beta <= 0:
            raise ValueError("scaling factors 1+alpha and 1+beta must be positive")

    @classmethod
    def gated_by(cls, model, **kw) -> "CaasConfig":
        """Take the gate interval [tau, s_max] from a fitted threshold model."""
        return cls(tau=model.tau, s_max=model.s_max, **kw)

    def is_open(self, s_img: float) -> bool:
        return self.tau <= s_img <= self.s_max


@dataclass
class ForwardResult:
    hidden: np.ndarray  # (L+1, S, d), index 0 = embeddings
    attention: np.ndarray  # (L, H, S, S) weights actually used
    attention_pre: np.ndarray  # (L, H, S, S) causal softmax before any scaling
    probs: np.ndarray  # (L, 2) probe at the answer position after each layer
    gated: bool = False

    @property
    def p_correct(self) -> np.ndarray:
        return self.probs[:, 0]

    @property
    def prediction(self) -> str:
        return "correct" if self.probs[-1, 0] > self.probs[-1, 1] else "incorrect"

    @property
    def correct(self) -> bool:
        return self.prediction == "correct"


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi))


def build_stack(
    layout: TokenLayout,
    n_layers: int = 28,
    n_heads: int = 4,
    d_model: int = 16,
    seed: int = 0,
    prior_bias: str = "misleading",
    params: ScenarioParams = ScenarioParams(),
) -> AttentionStack:
    if d_model < 4:
        raise ValueError("d_model must be at least 4")
    if n_layers < 1 or n_heads < 1:
        raise ValueError("need at least one layer and one head")
    if prior_bias not in PRIOR_BIASES:
        raise ValueError(f"prior_bias must be one of {PRIOR_BIASES}")
    d_head = max(1, d_model // n_heads)
    rng = np.random.default_rng(seed)
    p = params

    s = layout.seq_len
    x = p.embed_noise * rng.standard_normal((s, d_model))
    vis = _uniform(rng, p.visual_strength)
    sal = _uniform(rng, p.salience)
    pri = _uniform(rng, p.prior_strength)
    for g in layout.ground_truth:
        x[g, CORRECT] += vis
        x[g, SALIENCE] += sal
    for t in layout.prior:
        x[t, MARKER] += p.marker
        if prior_bias == "misleading":
            x[t, INCORRECT] += pri
        elif prior_bias == "correct":
            x[t, CORRECT] += pri
    x[layout.answer_position, MARKER] += p.marker

    w_q = p.weight_noise * rng.standard_normal((n_layers, n_heads, d_model, d_head))
    w_k = p.weight_noise * rng.standard_normal((n_layers, n_heads, d_model, d_head))
    direction = rng.standard_normal((n_layers, n_heads, d_head))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    for li in range(n_layers):
        prior_gain = p.prior_gain_late if li + 1 >= p.late_from else p.prior_gain_early
        w_q[li, :, MARKER] += p.query_gain * direction[li]
        w_k[li, :, SALIENCE] += p.visual_gain * direction[li]
        w_k[li, :, MARKER] += prior_gain * direction[li]
    w_v = p.value_scale * np.eye(d_model) + p.value_noise * rng.standard_normal((n_layers, n_heads, d_model, d_model))
    unembed = np.zeros((d_model, 2))
    unembed[CORRECT, 0] = unembed[INCORRECT, 1] = 1.0
    unembed += p.unembed_noise * rng.standard_normal((d_model, 2))

    return AttentionStack(layout, n_layers, n_heads, d_model, seed, prior_bias, x, w_q, w_k, w_v, unembed)


def causal_softmax(logits: np.ndarray) -> np.ndarray:
    s = logits.shape[-1]
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)
    z = np.where(mask, -np.inf, logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def scale_attention(
    attn: np.ndarray,
    columns: np.ndarray,
    factor: float,
    renormalize: bool = False,
) -> np.ndarray:
    """Multiply the given key columns by ``factor``; optionally renormalise rows."""
    out = attn.copy()
    out[..., columns] *= factor
    if renormalize:
        out /= out.sum(axis=-1, keepdims=True)
    return out


def _probe(h: np.ndarray, unembed: np.ndarray) -> np.ndarray:
    z = h @ unembed
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def forward(stack: AttentionStack, config: CaasConfig | None = None, s_img: float | None = None) -> ForwardResult:
    """Run all layers, applying the scaling rule only when the gate is open."""
    if config is not None and s_img is None:
        raise ValueError("an anomaly score is required when a CAAS config is given")
    gated = config is not None and config.is_open(s_img)
    if gated and config.layer_range[1] > stack.n_layers:
        raise ValueError(f"layer range {config.layer_range} exceeds the stack depth {stack.n_layers}")

    lay = stack.layout
    L, H, S = stack.n_layers, stack.n_heads, lay.seq_len
    hidden = np.empty((L + 1, S, stack.d_model))
    hidden[0] = stack.embeddings
    attn_used = np.empty((L, H, S, S))
    attn_pre = np.empty((L, H, S, S))
    probs = np.empty((L, 2))
    visual = lay.visual_indices
    prior = np.asarray(lay.prior, dtype=np.int64)
    scale = np.sqrt(stack.d_head)

    for li in range(L):
        x = hidden[li]
        q = np.einsum("sd,hde->hse", x, stack.w_q[li])
        k = np.einsum("sd,hde->hse", x, stack.w_k[li])
        a = causal_softmax(np.einsum("hie,hje->hij", q, k) / scale)
        attn_pre[li] = a
        if gated and config.layer_range[0] <= li + 1 <= config.layer_range[1]:
            if config.alpha != 0.0:
                a = scale_attention(a, visual, 1.0 + config.alpha)
            if config.scale_text and len(prior):
                a = scale_attention(a, prior, 1.0 + config.beta)
            if config.renormalize:
                a = a / a.sum(axis=-1, keepdims=True)
        attn_used[li] = a
        v = np.einsum("sd,hde->hse", x, stack.w_v[li])
        hidden[li + 1] = x + np.einsum("hij,hje->ie", a, v)
        probs[li] = _probe(hidden[li + 1, lay.answer_position], stack.unembed)

    return ForwardResult(hidden, attn_used, attn_pre, probs, gated)


class UndefinedRatioError(ValueError):
    pass


def attention_ratio(result: ForwardResult, layout: TokenLayout) -> np.ndarray:
    """Per-layer share of head-averaged answer-position image attention on ground-truth tokens."""
    if not layout.ground_truth:
        raise UndefinedRatioError("attention ratio is undefined without ground-truth tokens")
    row = result.attention[:, :, layout.answer_position, : layout.n_visual].mean(axis=1)
    gt = np.asarray(layout.ground_truth)
    return row[:, gt].sum(axis=1) / row.sum(axis=1)


@dataclass
class SweepRow:
    alpha: float
    flip_rate: float
    n_correct: int
    trials: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    baseline: float
    seeds: list[int] = field(default_factory=list)


def sweep_alpha(
    alphas: Sequence[float],
    trials: int = 100,
    layout: TokenLayout | None = None,
    n_layers: int = 28,
    n_heads: int = 4,
    d_model: int = 16,
    base_config: CaasConfig = CaasConfig(),
    prior_bias: str = "misleading",
    params: ScenarioParams = ScenarioParams(),
    seed0: int = 0,
) -> SweepResult:
    """Share of seeded scenarios answered correctly at each alpha, gate held open."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    layout = layout or TokenLayout.default()
    seeds = list(range(seed0, seed0 + trials))
    stacks = [build_stack(layout, n_layers, n_heads, d_model, s, prior_bias, params) for s in seeds]
    baseline = float(np.mean([forward(st).correct for st in stacks]))
    rows = []
    for alpha in alphas:
        cfg = replace(base_config, alpha=float(alpha), tau=-np.inf, s_max=np.inf)
        n = sum(forward(st, cfg, 0.0).correct for st in stacks)
        rows.append(SweepRow(float(alpha), n / trials, n, trials))
    return SweepResult(rows, baseline, seeds)
