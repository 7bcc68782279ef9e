"""Trainable network: frame embedding with downsampling, hierarchical encoder
with gloss- and text-level CTC heads, autoregressive decoder, multi-task loss.

All tensors are 2-D (sequence x features); batches are handled sample by
sample inside one graph, each sample under its own graph scope so dropout
masks do not depend on batch order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import adcore
from .adcore import Graph, Tensor
from .ctc import ctc_loss_node, min_frames

__all__ = [
    "CapacityError",
    "ModelConfig",
    "ModelParams",
    "Sample",
    "ValidationError",
    "decode_step",
    "decoder_rows",
    "encode_states",
    "eos_id",
    "gloss_lattice",
    "InferenceSession",
    "make_decode_fn",
    "sign_embed",
    "sign_embed_length",
    "text_lattice",
    "total_loss",
    "validate_sample",
]

_ATTN_MASK = -1e9


class CapacityError(ValueError):
    """Sequence exceeds the positional-encoding table."""


class ValidationError(ValueError):
    """A sample violates the CTC feasibility contract."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and loss hyperparameters.

    Defaults follow the reference configuration (hidden 256, 4 heads,
    5 gloss-encoder layers, 1 text-encoder layer, 6 decoder layers,
    feed-forward 4096, dropout 0.3, label smoothing 0.1, unit loss weights,
    Xavier init with gain 0.5).
    """

    gloss_vocab: int
    text_vocab: int
    feature_dim: int
    hidden: int = 256
    heads: int = 4
    n_gloss_layers: int = 5
    n_text_layers: int = 1
    n_decoder_layers: int = 6
    ff_dim: int = 4096
    activation: str = "relu"
    dropout: float = 0.3
    label_smoothing: float = 0.1
    gloss_ctc_weight: float = 1.0
    text_ctc_weight: float = 1.0
    cross_entropy_weight: float = 1.0
    downsample: int = 2
    max_positions: int = 512
    init_gain: float = 0.5

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.n_gloss_layers < 1 or self.n_decoder_layers < 1 or self.n_text_layers < 0:
            raise ValueError("layer counts must satisfy gloss>=1, decoder>=1, text>=0")
        if min(self.gloss_ctc_weight, self.text_ctc_weight, self.cross_entropy_weight) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.activation not in ("relu", "softsign"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.downsample < 1:
            raise ValueError("downsample factor must be >= 1")

    @property
    def use_gloss_ctc(self) -> bool:
        return self.gloss_ctc_weight > 0

    @property
    def use_text_ctc(self) -> bool:
        return self.text_ctc_weight > 0


def eos_id(cfg: ModelConfig) -> int:
    """End-of-sequence id in the decoder output vocabulary."""
    return cfg.text_vocab


@dataclass
class Sample:
    """One training/eval triple: frame features, gloss labels, text labels."""

    sample_id: int
    features: np.ndarray
    gloss: list[int]
    text: list[int]
    variant: int = 0
    provenance: str = "original"


def sign_embed_length(n_frames: int, downsample: int) -> int:
    return -(-n_frames // downsample)


def validate_sample(sample: Sample, cfg: ModelConfig) -> None:
    """Check CTC feasibility of both label sequences after downsampling."""
    t_out = sign_embed_length(sample.features.shape[0], cfg.downsample)
    for role, labels, vocab in (
        ("gloss", sample.gloss, cfg.gloss_vocab),
        ("text", sample.text, cfg.text_vocab),
    ):
        if any(not 0 <= t < vocab for t in labels):
            raise ValidationError(
                f"sample {sample.sample_id}: {role} token outside vocab [0, {vocab})"
            )
        if min_frames(labels) > t_out:
            raise ValidationError(
                f"sample {sample.sample_id}: {role} needs {min_frames(labels)} frames, "
                f"only {t_out} after downsampling"
            )


def _sinusoid_table(max_positions: int, d: int) -> np.ndarray:
    pos = np.arange(max_positions)[:, None].astype(np.float64)
    i = np.arange(d // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((max_positions, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class ModelParams:
    """Named-tensor table; shapes are a pure function of the config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    NON_TRAINABLE = ("pos.table",)

    def trainable(self, name: str) -> bool:
        return name not in self.NON_TRAINABLE

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng([int(seed) % (1 << 63), 0x5EED])
        d = config.hidden
        tensors: dict[str, np.ndarray] = {}

        def xavier(name, rows, cols):
            bound = config.init_gain * math.sqrt(6.0 / (rows + cols))
            tensors[name] = rng.uniform(-bound, bound, size=(rows, cols))

        def zeros(name, rows, cols):
            tensors[name] = np.zeros((rows, cols))

        def ones(name, rows, cols):
            tensors[name] = np.ones((rows, cols))

        def attention_block(prefix):
            for w in ("wq", "wk", "wv", "wo"):
                xavier(f"{prefix}.{w}", d, d)
            for b in ("bq", "bk", "bv", "bo"):
                zeros(f"{prefix}.{b}", 1, d)

        def norm_block(prefix):
            ones(f"{prefix}.g", 1, d)
            zeros(f"{prefix}.b", 1, d)

        def ff_block(prefix):
            xavier(f"{prefix}.w1", d, config.ff_dim)
            zeros(f"{prefix}.b1", 1, config.ff_dim)
            xavier(f"{prefix}.w2", config.ff_dim, d)
            zeros(f"{prefix}.b2", 1, d)

        def encoder_layer(prefix):
            norm_block(f"{prefix}.ln1")
            attention_block(f"{prefix}.attn")
            norm_block(f"{prefix}.ln2")
            ff_block(f"{prefix}.ff")

        xavier("sign_proj.w", config.downsample * config.feature_dim, d)
        zeros("sign_proj.b", 1, d)
        tensors["pos.table"] = _sinusoid_table(config.max_positions, d)

        for i in range(config.n_gloss_layers):
            encoder_layer(f"genc.{i}")
        norm_block("genc.ln")
        for i in range(config.n_text_layers):
            encoder_layer(f"tenc.{i}")
        if config.n_text_layers > 0:
            norm_block("tenc.ln")

        if config.use_gloss_ctc:
            xavier("gloss_head.w", d, config.gloss_vocab + 1)
            zeros("gloss_head.b", 1, config.gloss_vocab + 1)
        if config.use_text_ctc:
            xavier("text_head.w", d, config.text_vocab + 1)
            zeros("text_head.b", 1, config.text_vocab + 1)

        xavier("dec.embed", config.text_vocab + 1, d)
        for i in range(config.n_decoder_layers):
            norm_block(f"dec.{i}.ln1")
            attention_block(f"dec.{i}.self")
            norm_block(f"dec.{i}.ln2")
            attention_block(f"dec.{i}.cross")
            norm_block(f"dec.{i}.ln3")
            ff_block(f"dec.{i}.ff")
        norm_block("dec.ln")
        xavier("out.w", d, config.text_vocab + 1)
        zeros("out.b", 1, config.text_vocab + 1)

        return cls(config, tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(v.size for k, v in self.tensors.items() if self.trainable(k))


class _Forward:
    """Builds the network inside one graph; creates all leaves up front so
    node ids inside per-sample scopes are independent of batch order."""

    def __init__(self, params: ModelParams, graph: Graph):
        self.cfg = params.config
        self.graph = graph
        self.t = {name: graph.leaf(arr, name=name) for name, arr in params.tensors.items()}
        self._causal: dict[int, np.ndarray] = {}

    def _act(self, x: Tensor) -> Tensor:
        return adcore.relu(x) if self.cfg.activation == "relu" else adcore.softsign(x)

    def _drop(self, x: Tensor) -> Tensor:
        return adcore.dropout(x, self.cfg.dropout)

    def _linear(self, x: Tensor, prefix: str, w: str, b: str) -> Tensor:
        return adcore.linear_rows(x, self.t[f"{prefix}.{w}"], self.t[f"{prefix}.{b}"])

    def _positions(self, length: int) -> Tensor:
        if length > self.cfg.max_positions:
            raise CapacityError(
                f"sequence of length {length} exceeds position table "
                f"({self.cfg.max_positions})"
            )
        return adcore.take_rows(self.t["pos.table"], np.arange(length))

    def _causal_mask(self, n: int) -> np.ndarray:
        if n not in self._causal:
            self._causal[n] = np.triu(np.full((n, n), _ATTN_MASK), k=1)
        return self._causal[n]

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, causal: bool) -> Tensor:
        cfg = self.cfg
        q = self._linear(xq, prefix, "wq", "bq")
        k = self._linear(xkv, prefix, "wk", "bk")
        v = self._linear(xkv, prefix, "wv", "bv")
        mask = self._causal_mask(q.shape[0]) if causal else None
        merged = adcore.multi_head_attention(q, k, v, cfg.heads, mask=mask)
        return self._linear(merged, prefix, "wo", "bo")

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return adcore.layer_norm_rows(x, self.t[f"{prefix}.g"], self.t[f"{prefix}.b"])

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        h = self._act(self._linear(x, prefix, "w1", "b1"))
        return self._linear(h, prefix, "w2", "b2")

    def _encoder_stack(self, x: Tensor, name: str, n_layers: int) -> Tensor:
        for i in range(n_layers):
            p = f"{name}.{i}"
            h = self._norm(x, f"{p}.ln1")
            x = x + self._drop(self._attention(f"{p}.attn", h, h, causal=False))
            h = self._norm(x, f"{p}.ln2")
            x = x + self._drop(self._ff(h, f"{p}.ff"))
        return self._norm(x, f"{name}.ln")

    def sign_embed(self, features: np.ndarray) -> Tensor:
        """Stack consecutive frames (tail zero-padded) and project linearly."""
        feats = np.asarray(features, dtype=np.float64)
        k = self.cfg.downsample
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise adcore.ContractError("features must be a nonempty frames x dim matrix")
        if feats.shape[0] < k:
            raise adcore.ContractError(
                f"need at least {k} frames to downsample, got {feats.shape[0]}"
            )
        n, fd = feats.shape
        t_out = sign_embed_length(n, k)
        padded = np.zeros((t_out * k, fd))
        padded[:n] = feats
        stacked = self.graph.constant(padded.reshape(t_out, k * fd))
        return self._linear(stacked, "sign_proj", "w", "b")

    def encode(self, features: np.ndarray) -> tuple[Tensor, Tensor]:
        """Gloss-level then text-level encodings; shared when n_text_layers=0."""
        x = self.sign_embed(features)
        x = self._drop(x + self._positions(x.shape[0]))
        h_gls = self._encoder_stack(x, "genc", self.cfg.n_gloss_layers)
        if self.cfg.n_text_layers == 0:
            return h_gls, h_gls
        h_txt = self._encoder_stack(h_gls, "tenc", self.cfg.n_text_layers)
        return h_gls, h_txt

    def gloss_logits(self, h_gls: Tensor) -> Tensor:
        return self._linear(h_gls, "gloss_head", "w", "b")

    def text_logits(self, h_txt: Tensor) -> Tensor:
        return self._linear(h_txt, "text_head", "w", "b")

    def decoder(self, h_txt: Tensor, prefix_tokens: list[int]) -> Tensor:
        """Log-prob rows for each position given begin-of-sequence + prefix."""
        cfg = self.cfg
        ids = [cfg.text_vocab] + [int(t) for t in prefix_tokens]
        for t in prefix_tokens:
            if not 0 <= int(t) < cfg.text_vocab:
                raise ValidationError(f"decoder prefix token {t} outside text vocab")
        if len(ids) > cfg.max_positions:
            raise CapacityError(
                f"prefix of length {len(prefix_tokens)} exceeds position table "
                f"({cfg.max_positions})"
            )
        x = adcore.scale(adcore.take_rows(self.t["dec.embed"], ids), math.sqrt(cfg.hidden))
        x = x + self._positions(len(ids))
        x = self._drop(x)
        for i in range(cfg.n_decoder_layers):
            p = f"dec.{i}"
            h = self._norm(x, f"{p}.ln1")
            x = x + self._drop(self._attention(f"{p}.self", h, h, causal=True))
            h = self._norm(x, f"{p}.ln2")
            x = x + self._drop(self._attention(f"{p}.cross", h, h_txt, causal=False))
            h = self._norm(x, f"{p}.ln3")
            x = x + self._drop(self._ff(h, f"{p}.ff"))
        x = self._norm(x, "dec.ln")
        return adcore.log_softmax_rows(self._linear(x, "out", "w", "b"))


def total_loss(samples: list[Sample], params: ModelParams, graph: Graph) -> Tensor:
    """Weighted multi-task objective, averaged over the batch.

    Per sample: gloss-CTC and text-CTC negative log-likelihoods on the two
    encoder stages plus label-smoothed teacher-forced cross entropy on the
    text with end-of-sequence appended.
    """
    if not samples:
        raise adcore.ContractError("empty batch")
    cfg = params.config
    for s in samples:
        validate_sample(s, cfg)
    fw = _Forward(params, graph)
    terms: list[Tensor] = []
    for s in samples:
        with graph.scope(int(s.sample_id) + 1):
            h_gls, h_txt = fw.encode(s.features)
            parts: list[Tensor] = []
            if cfg.use_gloss_ctc:
                loss_g = ctc_loss_node(fw.gloss_logits(h_gls), s.gloss)
                parts.append(adcore.scale(loss_g, cfg.gloss_ctc_weight))
            if cfg.use_text_ctc:
                loss_t = ctc_loss_node(fw.text_logits(h_txt), s.text)
                parts.append(adcore.scale(loss_t, cfg.text_ctc_weight))
            if cfg.cross_entropy_weight > 0:
                logp = fw.decoder(h_txt, s.text)
                targets = list(s.text) + [eos_id(cfg)]
                k = cfg.text_vocab + 1
                eps = cfg.label_smoothing
                smooth = np.full((len(targets), k), eps / k)
                smooth[np.arange(len(targets)), targets] += 1.0 - eps
                weighted = adcore.mul(logp, graph.constant(smooth))
                mle = adcore.scale(adcore.sum_all(weighted), -1.0)
                parts.append(adcore.scale(mle, cfg.cross_entropy_weight))
            if not parts:
                raise adcore.ContractError("all loss weights are zero")
            term = parts[0]
            for p in parts[1:]:
                term = term + p
            terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return adcore.scale(total, 1.0 / len(samples))


class InferenceSession:
    """Inference over one parameter snapshot, reusing a single graph.

    Meant to live for the duration of decoding one sample (graphs keep every
    node alive, so do not reuse a session across a whole corpus).
    """

    def __init__(self, params: ModelParams):
        self.config = params.config
        self.fw = _Forward(params, Graph(seed=0, training=False))

    def encode(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h_gls, h_txt = self.fw.encode(features)
        return h_gls.data, h_txt.data

    def gloss_lattice(self, h_gls: np.ndarray) -> np.ndarray:
        logits = self.fw.gloss_logits(self.fw.graph.constant(h_gls))
        return adcore.log_softmax_rows(logits).data

    def text_lattice(self, h_txt: np.ndarray) -> np.ndarray:
        logits = self.fw.text_logits(self.fw.graph.constant(h_txt))
        return adcore.log_softmax_rows(logits).data

    def decoder_rows(self, h_txt: np.ndarray, prefix_tokens: list[int]) -> np.ndarray:
        return self.fw.decoder(self.fw.graph.constant(h_txt), list(prefix_tokens)).data

    def decode_step(self, h_txt: np.ndarray, prefix_tokens: list[int]) -> np.ndarray:
        return self.decoder_rows(h_txt, prefix_tokens)[-1]

    def decode_fn(self, h_txt: np.ndarray):
        def fn(prefix_tokens):
            return self.decode_step(h_txt, list(prefix_tokens))

        return fn


def encode_states(params: ModelParams, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode encoder outputs (gloss-level, text-level)."""
    return InferenceSession(params).encode(features)


def sign_embed(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Inference-mode downsampled frame embedding (before positions)."""
    fw = _Forward(params, Graph(seed=0, training=False))
    return fw.sign_embed(features).data


def gloss_lattice(params: ModelParams, h_gls: np.ndarray) -> np.ndarray:
    """Log-prob lattice of the gloss CTC head over a gloss-level encoding."""
    return InferenceSession(params).gloss_lattice(h_gls)


def text_lattice(params: ModelParams, h_txt: np.ndarray) -> np.ndarray:
    """Log-prob lattice of the text CTC head over a text-level encoding."""
    return InferenceSession(params).text_lattice(h_txt)


def decoder_rows(params: ModelParams, h_txt: np.ndarray, prefix_tokens: list[int]) -> np.ndarray:
    """Teacher-forced decoder log-prob rows for positions 1..len(prefix)+1."""
    return InferenceSession(params).decoder_rows(h_txt, prefix_tokens)


def decode_step(params: ModelParams, h_txt: np.ndarray, prefix_tokens: list[int]) -> np.ndarray:
    """Next-token log-distribution over text vocab + end-of-sequence."""
    return InferenceSession(params).decode_step(h_txt, prefix_tokens)


def make_decode_fn(params: ModelParams, h_txt: np.ndarray):
    """Closure suitable for the beam-search modules."""
    return InferenceSession(params).decode_fn(h_txt)
