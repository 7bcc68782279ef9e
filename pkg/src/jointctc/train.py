"""Optimization loop, two-stage transfer orchestration, checkpoint persistence.

Training is deterministic in (seed, config, corpus): epoch shuffles come from
one seeded generator, per-step graph seeds are derived from (seed, step), and
checkpoints carry a content hash over all tensor bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .adcore import Graph
from .beam import DecodeConfig, attention_beam_search, hypothesis_text, joint_beam_search
from .ctc import ctc_greedy_decode
from .model import (
    InferenceSession,
    ModelConfig,
    ModelParams,
    Sample,
    eos_id,
    total_loss,
)

__all__ = [
    "Checkpoint",
    "IntegrityError",
    "ShapeError",
    "TrainAbortError",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "decode_corpus",
    "evaluate",
    "load_checkpoint",
    "params_from_checkpoint",
    "recognize_gloss",
    "save_checkpoint",
    "train_stage",
]

_MAGIC = b"CKPT0001"
_VERSION = 1
_ADAM_EPS = 1e-8


class IntegrityError(RuntimeError):
    """Checkpoint file is truncated, corrupt, or from another format version."""


class ShapeError(ValueError):
    """Checkpoint tensor incompatible with the requested model configuration."""


class TrainAbortError(RuntimeError):
    """Training hit a non-finite gradient."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings (defaults: Adam(0.9, 0.998), lr 1e-3)."""

    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.998
    batch_size: int = 64
    max_steps: int = 1000
    eval_interval: int = 0  # 0: evaluate only at the end
    patience: int = 0  # evals without dev improvement before stopping; 0: off
    seed: int = 0
    stage: str = "single"  # single | warmstart | finetune
    clip_norm: float = 5.0
    freeze: tuple[str, ...] = ()
    eval_dev_limit: int = 0  # 0: use the full dev split during training evals

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning rate must be > 0 and batch size >= 1")
        if self.stage not in ("single", "warmstart", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")


def _is_frozen(name: str, freeze: tuple[str, ...]) -> bool:
    return any(name.startswith(p) for p in freeze)


def adam_step(tensors: dict, grads: dict, moments: dict, cfg: TrainConfig,
              t: int, frozen: tuple[str, ...] = ()) -> None:
    """One bias-corrected Adam update, in place. ``t`` is the 1-based step."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr = cfg.learning_rate
    for name, value in tensors.items():
        if name not in grads or _is_frozen(name, frozen):
            continue
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainAbortError(f"non-finite gradient at step {t} in tensor {name!r}")
        if name not in moments:
            moments[name] = (np.zeros_like(value), np.zeros_like(value))
        m, v = moments[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        value -= lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


def _clip_gradients(grads: dict, names, clip_norm: float) -> None:
    if clip_norm <= 0:
        return
    total = 0.0
    for name in names:
        total += float((grads[name] ** 2).sum())
    norm = np.sqrt(total)
    if norm > clip_norm:
        factor = clip_norm / norm
        for name in names:
            grads[name] *= factor


# --- checkpoints -----------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    step: int
    rng_state: dict

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for _, arr in self._entries():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def _entries(self):
        for name, arr in self.tensors.items():
            yield ("p:" + name, arr)
        for name, (m, v) in self.moments.items():
            yield ("m:" + name, m)
            yield ("v:" + name, v)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = list(ckpt._entries())
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in entries
    )
    header = {
        "version": _VERSION,
        "model_config": asdict(ckpt.model_config),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "tensors": [[key, arr.shape[0], arr.shape[1]] for key, arr in entries],
        "hash": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 8 or raw[: len(_MAGIC)] != _MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(_MAGIC) : len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    if len(raw) < start + hlen:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    if header.get("version") != _VERSION:
        raise IntegrityError(
            f"{path}: format version {header.get('version')} != {_VERSION}"
        )
    payload = raw[start + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["hash"]:
        raise IntegrityError(f"{path}: content hash mismatch")
    tensors: dict[str, np.ndarray] = {}
    moments_m: dict[str, np.ndarray] = {}
    moments_v: dict[str, np.ndarray] = {}
    offset = 0
    for key, rows, cols in header["tensors"]:
        size = rows * cols * 8
        arr = np.frombuffer(payload[offset : offset + size], dtype="<f8").reshape(
            rows, cols
        ).astype(np.float64)
        offset += size
        kind, name = key.split(":", 1)
        if kind == "p":
            tensors[name] = arr
        elif kind == "m":
            moments_m[name] = arr
        else:
            moments_v[name] = arr
    moments = {n: (moments_m[n], moments_v[n]) for n in moments_m}
    return Checkpoint(
        model_config=ModelConfig(**header["model_config"]),
        tensors=tensors,
        moments=moments,
        step=int(header["step"]),
        rng_state=header["rng_state"],
    )


def params_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig | None = None) -> ModelParams:
    """Materialize parameters; with an explicit config, shapes must agree."""
    if cfg is None:
        cfg = ckpt.model_config
    reference = ModelParams.init(cfg, seed=0)
    for name, arr in reference.tensors.items():
        if name not in ckpt.tensors:
            raise ShapeError(f"checkpoint is missing tensor {name!r}")
        if ckpt.tensors[name].shape != arr.shape:
            raise ShapeError(
                f"tensor {name!r}: checkpoint shape {ckpt.tensors[name].shape} "
                f"!= expected {arr.shape}"
            )
    extra = set(ckpt.tensors) - set(reference.tensors)
    if extra:
        raise ShapeError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")
    return ModelParams(cfg, {k: v.copy() for k, v in ckpt.tensors.items()})


# --- evaluation ------------------------------------------------------------


def recognize_gloss(params: ModelParams, sample: Sample) -> list[int]:
    """Greedy best-path gloss recognition through the gloss CTC head."""
    session = InferenceSession(params)
    h_gls, _ = session.encode(sample.features)
    return ctc_greedy_decode(session.gloss_lattice(h_gls))


def decode_sample(params: ModelParams, sample: Sample, dcfg: DecodeConfig) -> list[int]:
    """Decode one sample with the configured search; returns content tokens."""
    session = InferenceSession(params)
    _, h_txt = session.encode(sample.features)
    fn = session.decode_fn(h_txt)
    eos = eos_id(params.config)
    if dcfg.mode == "joint":
        best = joint_beam_search(fn, session.text_lattice(h_txt), dcfg, eos)[0]
    else:
        best = attention_beam_search(fn, dcfg, eos)[0]
    return hypothesis_text(best, eos)


def decode_corpus(params: ModelParams, samples: list[Sample], dcfg: DecodeConfig) -> list[list[int]]:
    return [decode_sample(params, s, dcfg) for s in samples]


def evaluate(params: ModelParams, samples: list[Sample], dcfg: DecodeConfig) -> dict:
    """Text metrics (and gloss WER when the gloss head exists) on a split."""
    hyps = decode_corpus(params, samples, dcfg)
    refs = [s.text for s in samples]
    out = {}
    bs = metrics.bleu(refs, hyps, max_n=4)
    for k, v in enumerate(bs, start=1):
        out[f"b{k}"] = v
    out["rouge_l"] = 100.0 * metrics.corpus_rouge_l(refs, hyps)
    if params.config.use_gloss_ctc:
        gloss_hyps = [recognize_gloss(params, s) for s in samples]
        out["wer"] = 100.0 * metrics.corpus_wer([s.gloss for s in samples], gloss_hyps)
    return out


_GREEDY_EVAL = DecodeConfig(beam_size=1, max_len=30, length_penalty=0.0,
                            ctc_weight=0.0, mode="attention")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_dev_b4: float
    history: list[dict] = field(default_factory=list)


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def train_stage(train_samples: list[Sample], dev_samples: list[Sample],
                model_cfg: ModelConfig, tcfg: TrainConfig,
                init: Checkpoint | None = None) -> TrainResult:
    """Optimize the multi-task loss; keep the checkpoint with best dev B@4.

    Dev evaluations during training use greedy attention-only decoding to
    stay cheap; beam decoding is a separate, final concern.
    """
    if init is not None:
        params = params_from_checkpoint(init, model_cfg)
    else:
        params = ModelParams.init(model_cfg, seed=tcfg.seed)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    shuffle_rng = np.random.default_rng([tcfg.seed, 0xD1CE])
    trainable = tuple(
        n for n in params.tensors if params.trainable(n) and not _is_frozen(n, tcfg.freeze)
    )

    n = len(train_samples)
    order = shuffle_rng.permutation(n)
    cursor = 0
    history: list[dict] = []
    best_b4 = -1.0
    best: Checkpoint | None = None
    stale = 0

    dev_eval = dev_samples
    if tcfg.eval_dev_limit and len(dev_samples) > tcfg.eval_dev_limit:
        dev_eval = dev_samples[: tcfg.eval_dev_limit]

    def snapshot(step):
        return Checkpoint(
            model_config=model_cfg,
            tensors={k: v.copy() for k, v in params.tensors.items()},
            moments={k: (m.copy(), v.copy()) for k, (m, v) in moments.items()},
            step=step,
            rng_state=_jsonable_rng_state(shuffle_rng),
        )

    def run_eval(step):
        nonlocal best_b4, best, stale
        greedy = DecodeConfig(
            beam_size=1,
            max_len=_GREEDY_EVAL.max_len,
            length_penalty=0.0,
            ctc_weight=0.0,
            mode="attention",
        )
        scores = evaluate(params, dev_eval, greedy)
        row = {"step": step, "split": "dev", **scores}
        history.append(row)
        if scores["b4"] > best_b4:
            best_b4 = scores["b4"]
            best = snapshot(step)
            stale = 0
        else:
            stale += 1
        return stale

    step = 0
    stop = False
    while step < tcfg.max_steps and not stop:
        if cursor + tcfg.batch_size > n:
            order = shuffle_rng.permutation(n)
            cursor = 0
        batch = [train_samples[i] for i in order[cursor : cursor + tcfg.batch_size]]
        cursor += tcfg.batch_size
        step += 1

        graph = Graph(seed=_step_seed(tcfg.seed, step), training=True)
        loss = total_loss(batch, params, graph)
        grads = graph.backward(loss)
        _clip_gradients(grads, trainable, tcfg.clip_norm)
        adam_step(params.tensors, grads, moments, tcfg, step, frozen=tcfg.freeze)
        history.append({"step": step, "split": "train", "loss": float(loss.data[0, 0])})

        if tcfg.eval_interval and step % tcfg.eval_interval == 0 and step < tcfg.max_steps:
            staleness = run_eval(step)
            if tcfg.patience and staleness >= tcfg.patience:
                stop = True

    run_eval(step)
    assert best is not None
    return TrainResult(checkpoint=best, best_dev_b4=best_b4, history=history)


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state))
