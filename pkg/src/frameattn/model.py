"""Attention classifier over batches of windowed sensor frames.

Pipeline per batch of B frames, each frame a (T, D_in) window:

    conv backbone (per-timestep features)    -> frame embedding (mean pool)
    -> frame-level positional encoding          (batch rank 0..B-1)
    -> within-frame attention pooling           over the T timesteps
    -> across-frame scaled dot-product attention over the B frames
    -> learned sigmoid blend of the two summaries
    -> concat with the plain embedding, re-projected, multi-head attention
    -> sigmoid gate mixing attention output with the encoded embedding
    -> mixture-of-experts feed-forward
    -> linear classifier head

Stages can be switched off via ``ModelConfig.disabled``; a disabled stage
passes the appropriate operand through unchanged, which is how the ablation
baselines are configured:

    pe    -> the encoded embedding is the plain embedding
    intra -> the blend collapses to the across-frame summary
    inter -> the blend collapses to the within-frame summary
            (both off: the blend output is the encoded embedding)
    gate  -> the gate output is the multi-head output
    moe   -> the expert mixture is an identity
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError
from .losses import LossConfig, combined_loss
from .seeding import TAG_GRADCHECK, TAG_INIT, mix64
from .tensor import Tensor

DISABLEABLE = frozenset({"intra", "inter", "pe", "moe", "gate"})


@dataclass(frozen=True)
class ModelConfig:
    window_len: int
    channels: int
    classes: int
    d_model: int = 128
    heads: int = 8
    experts: int = 8
    dropout: float = 0.5
    conv_blocks: int = 3
    kernel: int = 5
    disabled: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.experts < 1:
            raise ConfigError(f"experts must be >= 1, got {self.experts}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even and >= 2, got {self.d_model}")
        if self.heads < 1 or self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by heads ({self.heads})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.conv_blocks < 1:
            raise ConfigError(f"conv_blocks must be >= 1, got {self.conv_blocks}")
        if self.window_len < self.kernel:
            raise ConfigError(
                f"window_len ({self.window_len}) must be >= kernel ({self.kernel})"
            )
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        unknown = set(self.disabled) - DISABLEABLE
        if unknown:
            raise ConfigError(f"unknown disable flags: {sorted(unknown)}")
        object.__setattr__(self, "disabled", frozenset(self.disabled))

    def enabled(self, stage: str) -> bool:
        return stage not in self.disabled


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, for inspection and tests.

    Attention weight fields hold the softmax outputs (rows sum to 1);
    disabled stages leave their fields as None.
    """

    x_bar: Tensor
    x_pe: Tensor
    a_intra: Tensor | None
    intra_weights: Tensor | None
    a_inter: Tensor | None
    inter_weights: Tensor | None
    a_com: Tensor
    x_att: Tensor
    a_mul: Tensor
    head_weights: list[Tensor]
    gate: Tensor | None
    o_gated: Tensor
    o_moe: Tensor
    moe_weights: Tensor | None
    logits: Tensor


def positional_encoding(d_model: int, positions: np.ndarray) -> np.ndarray:
    """Sinusoidal code per frame rank: row p has sin(p/10000^(2i/d)) in even
    columns and cos of the same argument in odd columns."""
    positions = np.asarray(positions, dtype=np.float64)
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions[:, None] / np.power(10000.0, i[None, :] / d_model)
    pe = np.zeros((len(positions), d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def conv_block(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded conv along time + ReLU: x (B,T,Cin), w (k,Cin,Cout), b (1,1,Cout).

    Implemented im2col-style: the k shifted views are stacked on the channel
    axis and hit with one (k*Cin, Cout) matmul.
    """
    batch, steps, c_in = x.shape
    k, _, c_out = w.shape
    pad = (k - 1) // 2
    if pad:
        zeros = Tensor(np.zeros((batch, pad, c_in)))
        x = T.concat([zeros, x, zeros], axis=1)
    taps = [x[:, j : j + steps, :] for j in range(k)]
    cols = T.concat(taps, axis=2).reshape(batch * steps, k * c_in)
    out = cols @ w.reshape(k * c_in, c_out)
    return T.relu(out.reshape(batch, steps, c_out) + b)


def backbone_features(frames: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    """Per-timestep features (B, T, d_model) from the conv stack."""
    feats = frames
    for i in range(cfg.conv_blocks):
        feats = conv_block(feats, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"])
    return feats


def intra_attention(feats: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """Attention-pool the timesteps of each frame into one vector.

    Scores per timestep are w2 . tanh(w1 . x_t + b1) + b2; the softmax runs
    over the timesteps of a frame.
    """
    batch, steps, d = feats.shape
    flat = feats.reshape(batch * steps, d)
    hidden = T.tanh(flat @ params["intra.w1"] + params["intra.b1"])
    scores = (hidden @ params["intra.w2"] + params["intra.b2"]).reshape(batch, steps)
    weights = T.softmax(scores, axis=1)
    pooled = T.tsum(weights.reshape(batch, steps, 1) * feats, axis=1)
    return pooled, weights


def inter_attention(x: Tensor, params: dict, d_model: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention across the frames of the batch."""
    q = x @ params["inter.wq"]
    k = x @ params["inter.wk"]
    v = x @ params["inter.wv"]
    scores = (q @ k.transpose()) * (1.0 / math.sqrt(d_model))
    weights = T.softmax(scores, axis=1)
    return weights @ v, weights


def combine_attention(a_inter: Tensor, a_intra: Tensor, alpha: Tensor) -> Tensor:
    """Convex blend a*inter + (1-a)*intra with a = sigmoid(alpha)."""
    a = T.sigmoid(alpha)
    return a * a_inter + (1.0 - a) * a_intra


def fuse_features(x_bar: Tensor, a_com: Tensor, params: dict) -> Tensor:
    """Concat the plain embedding with the blended summary and re-project."""
    return T.concat([x_bar, a_com], axis=1) @ params["cat.w"]


def multi_head_attention(x: Tensor, params: dict, cfg: ModelConfig) -> tuple[Tensor, list[Tensor]]:
    """h parallel scaled dot-product attentions over the batch, concatenated
    and output-projected."""
    d_head = cfg.d_model // cfg.heads
    scale = 1.0 / math.sqrt(d_head)
    outputs = []
    weights = []
    for i in range(cfg.heads):
        q = x @ params[f"mh.h{i}.wq"]
        k = x @ params[f"mh.h{i}.wk"]
        v = x @ params[f"mh.h{i}.wv"]
        att = T.softmax((q @ k.transpose()) * scale, axis=1)
        outputs.append(att @ v)
        weights.append(att)
    return T.concat(outputs, axis=1) @ params["mh.wo"], weights


def gate_values(x_att: Tensor, params: dict) -> Tensor:
    return T.sigmoid(x_att @ params["gate.wg"] + params["gate.bg"])


def apply_gate(gate: Tensor, a_mul: Tensor, x_enhanced: Tensor) -> Tensor:
    return gate * a_mul + (1.0 - gate) * x_enhanced


def moe_layer(x: Tensor, params: dict, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Softmax-weighted mixture of two-layer feed-forward experts."""
    weights = T.softmax(x @ params["moe.gate.w"], axis=1)
    mixed = None
    for i in range(cfg.experts):
        hidden = T.relu(x @ params[f"moe.expert{i}.w1"] + params[f"moe.expert{i}.b1"])
        expert = hidden @ params[f"moe.expert{i}.w2"] + params[f"moe.expert{i}.b2"]
        contrib = weights[:, i : i + 1] * expert
        mixed = contrib if mixed is None else mixed + contrib
    return mixed, weights


class AttentionModel:
    """Parameter container plus the forward composition of all stages."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.decay_keys: set[str] = set()
        self._init_params(np.random.default_rng(mix64(seed, TAG_INIT)))

    def _add(self, name: str, data: np.ndarray, decay: bool) -> None:
        self.params[name] = Tensor(data, requires_grad=True)
        if decay:
            self.decay_keys.add(name)

    def _matrix(self, rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        # He-uniform: without the sqrt(6) gain the stacked ReLU backbone
        # collapses to ~0.02 sigma activations and the O(1) positional code
        # drowns out frame content in every attention input.
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        d = cfg.d_model
        h_a = d // 2
        c_in = cfg.channels
        for i in range(cfg.conv_blocks):
            self._add(
                f"backbone.conv{i}.w",
                self._matrix(rng, (cfg.kernel, c_in, d), cfg.kernel * c_in),
                decay=True,
            )
            self._add(f"backbone.conv{i}.b", np.zeros((1, 1, d)), decay=False)
            c_in = d
        self._add("intra.w1", self._matrix(rng, (d, h_a), d), decay=True)
        self._add("intra.b1", np.zeros((1, h_a)), decay=False)
        self._add("intra.w2", self._matrix(rng, (h_a, 1), h_a), decay=True)
        self._add("intra.b2", np.zeros((1, 1)), decay=False)
        for name in ("wq", "wk", "wv"):
            self._add(f"inter.{name}", self._matrix(rng, (d, d), d), decay=True)
        self._add("blend.alpha", np.zeros((1, 1)), decay=False)
        self._add("cat.w", self._matrix(rng, (2 * d, d), 2 * d), decay=True)
        d_head = d // cfg.heads
        for i in range(cfg.heads):
            for name in ("wq", "wk", "wv"):
                self._add(f"mh.h{i}.{name}", self._matrix(rng, (d, d_head), d), decay=True)
        self._add("mh.wo", self._matrix(rng, (d, d), d), decay=True)
        self._add("gate.wg", self._matrix(rng, (d, d), d), decay=True)
        self._add("gate.bg", np.zeros((1, d)), decay=False)
        self._add("moe.gate.w", self._matrix(rng, (d, cfg.experts), d), decay=True)
        for i in range(cfg.experts):
            self._add(f"moe.expert{i}.w1", self._matrix(rng, (d, d), d), decay=True)
            self._add(f"moe.expert{i}.b1", np.zeros((1, d)), decay=False)
            self._add(f"moe.expert{i}.w2", self._matrix(rng, (d, d), d), decay=True)
            self._add(f"moe.expert{i}.b2", np.zeros((1, d)), decay=False)
        self._add("cls.w", self._matrix(rng, (d, cfg.classes), d), decay=True)
        self._add("cls.b", np.zeros((1, cfg.classes)), decay=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(arrays))
        extra = sorted(set(arrays) - set(self.params))
        if missing or extra:
            raise CheckpointError(
                f"parameter names do not match model: missing {missing}, unexpected {extra}"
            )
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape} vs model {p.data.shape}"
                )
        for name, p in self.params.items():
            p.data[...] = arrays[name]

    def forward(
        self,
        frames: np.ndarray,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ForwardTrace:
        cfg = self.cfg
        p = self.params
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ConfigError(f"frames must be (B, T, D), got shape {frames.shape}")
        batch, steps, channels = frames.shape
        if channels != cfg.channels:
            raise ConfigError(f"expected {cfg.channels} channels, got {channels}")
        if steps < cfg.kernel:
            raise ConfigError(f"window of {steps} samples is shorter than kernel {cfg.kernel}")

        drop = cfg.dropout if training else 0.0

        feats = backbone_features(Tensor(frames), p, cfg)
        x_bar = feats.mean(axis=1)
        x_bar = T.dropout(x_bar, drop, training, rng)

        if cfg.enabled("pe"):
            x_pe = x_bar + Tensor(positional_encoding(cfg.d_model, np.arange(batch)))
        else:
            x_pe = x_bar

        a_intra = intra_weights = None
        if cfg.enabled("intra"):
            a_intra, intra_weights = intra_attention(feats, p)
        a_inter = inter_weights = None
        if cfg.enabled("inter"):
            a_inter, inter_weights = inter_attention(x_pe, p, cfg.d_model)

        if a_inter is not None and a_intra is not None:
            a_com = combine_attention(a_inter, a_intra, p["blend.alpha"])
        elif a_inter is not None:
            a_com = a_inter
        elif a_intra is not None:
            a_com = a_intra
        else:
            a_com = x_pe

        x_att = fuse_features(x_bar, a_com, p)
        a_mul, head_weights = multi_head_attention(x_att, p, cfg)
        a_mul = T.dropout(a_mul, drop, training, rng)

        if cfg.enabled("gate"):
            gate = gate_values(x_att, p)
            o_gated = apply_gate(gate, a_mul, x_pe)
        else:
            gate = None
            o_gated = a_mul

        if cfg.enabled("moe"):
            o_moe, moe_weights = moe_layer(o_gated, p, cfg)
        else:
            o_moe, moe_weights = o_gated, None
        o_moe = T.dropout(o_moe, drop, training, rng)

        logits = o_moe @ p["cls.w"] + p["cls.b"]
        return ForwardTrace(
            x_bar=x_bar,
            x_pe=x_pe,
            a_intra=a_intra,
            intra_weights=intra_weights,
            a_inter=a_inter,
            inter_weights=inter_weights,
            a_com=a_com,
            x_att=x_att,
            a_mul=a_mul,
            head_weights=head_weights,
            gate=gate,
            o_gated=o_gated,
            o_moe=o_moe,
            moe_weights=moe_weights,
            logits=logits,
        )


# Gradient verification: block names are keyed on parameter prefixes so a
# failing backward rule is reported against the stage that uses it.
GRADCHECK_BLOCKS = (
    ("backbone", "backbone."),
    ("intra-attention", "intra."),
    ("inter-attention", "inter."),
    ("attention-blend", "blend."),
    ("feature-fusion", "cat."),
    ("multi-head", "mh."),
    ("gate", "gate."),
    ("moe", "moe."),
    ("classifier", "cls."),
)


def tiny_gradcheck_config(
    classes: int = 4, window_len: int = 16, channels: int = 3
) -> ModelConfig:
    """Small model used by the gradient-check command and its tests."""
    return ModelConfig(
        window_len=window_len,
        channels=channels,
        classes=classes,
        d_model=8,
        heads=2,
        experts=2,
        dropout=0.0,
        conv_blocks=3,
        kernel=5,
    )


def parameter_gradcheck_report(
    cfg: ModelConfig,
    loss_cfg: LossConfig,
    seed: int = 0,
    batch: int = 4,
    eps: float = 1e-5,
) -> list[tuple[str, float]]:
    """Max relative error between analytic and central-difference gradients,
    one row per stage plus the composed model and the loss head.

    The analytic side is a single backward pass through forward+loss; the
    numeric side perturbs every parameter entry by +-eps.
    """
    rng = np.random.default_rng(mix64(seed, TAG_GRADCHECK))
    frames = rng.normal(size=(batch, cfg.window_len, cfg.channels))
    labels = rng.integers(0, cfg.classes, size=batch)
    model = AttentionModel(cfg, seed=seed)

    def loss_value() -> Tensor:
        trace = model.forward(frames, training=False)
        return combined_loss(trace.logits, labels, loss_cfg)

    model.zero_grad()
    T.backward(loss_value())
    analytic = {name: p.grad.copy() for name, p in model.params.items()}

    worst: dict[str, float] = {name: 0.0 for name, _ in GRADCHECK_BLOCKS}
    composed = 0.0
    with T.no_grad():
        for name, p in model.params.items():
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                plus = loss_value().item()
                flat[i] = orig - eps
                minus = loss_value().item()
                flat[i] = orig
                numeric = (plus - minus) / (2.0 * eps)
                err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
                composed = max(composed, err)
                for block, prefix in GRADCHECK_BLOCKS:
                    if name.startswith(prefix):
                        worst[block] = max(worst[block], err)
                        break

    rows = [(block, worst[block]) for block, _ in GRADCHECK_BLOCKS]

    # The loss head checked in isolation, against its own input logits.
    logits0 = Tensor(rng.normal(size=(batch, cfg.classes)))
    loss_err = T.gradcheck(lambda t: combined_loss(t, labels, loss_cfg), logits0, eps=eps)
    rows.append(("loss", loss_err))
    rows.append(("composed-model", composed))
    return rows
