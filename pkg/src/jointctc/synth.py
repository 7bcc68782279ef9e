"""Deterministic generator for a miniature video-to-text-style transduction task.

Frames align monotonically with gloss labels (each gloss emits a run of noisy
feature frames); the text is a non-monotonic function of the glosses: a
verb-class gloss is moved to the second position before lexicon expansion and
a function word is appended. Paraphrase rules and per-variant feature
renderings stand in for text augmentation and for multiple pretrained frame
embedders.

Text vocabulary layout (sizes derived from the task spec):
  [0, G)                        primary token of gloss g (bijective)
  [G, G+2)                      secondary tokens: canonical, variant
  [G+2, G+4)                    inflection suffixes
  [text_vocab - n_fw, text_vocab)  function words
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Sample, sign_embed_length
from .ctc import min_frames

__all__ = [
    "Corpus",
    "GenerationError",
    "TaskSpec",
    "backtranslate_inverse",
    "build_warmstart_corpus",
    "corpus_stats",
    "derive_text",
    "feature_variant",
    "gen_corpus",
    "paraphrase",
    "preset",
    "read_corpus",
    "reorder_witness_rate",
    "write_corpus",
    "write_vocab_files",
]

_SPLIT_OFFSETS = {"train": 0, "dev": 1_000_000, "test": 2_000_000}
_AUG_ID_STRIDE = 10_000_000


class GenerationError(RuntimeError):
    """Feasibility retries exhausted while sampling."""


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of the synthetic task; everything downstream is a pure
    function of this spec and a sample id."""

    gloss_vocab: int = 20
    text_vocab: int = 28
    gloss_len: tuple[int, int] = (3, 8)
    frames_per_gloss: tuple[int, int] = (4, 8)
    feature_dim: int = 16
    noise_sigma: float = 0.1
    occurrence_sigma: float = 0.0  # per-occurrence appearance jitter
    transition_frames: tuple[int, int] = (0, 0)  # blend frames between glosses
    reorder_rule: str = "verb_to_second"  # or "none"
    reorder_prob: float = 1.0
    n_variants: int = 3
    n_function_words: int = 4
    downsample: int = 2
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        if self.gloss_vocab < 2 or self.text_vocab < 2:
            raise ValueError("vocab sizes must be >= 2")
        if self.text_vocab < self.gloss_vocab + 4 + self.n_function_words:
            raise ValueError(
                "text vocab must cover one primary token per gloss plus "
                "secondary/suffix/function tokens"
            )
        if self.reorder_rule not in ("verb_to_second", "none"):
            raise ValueError(f"unknown reorder rule {self.reorder_rule!r}")
        if self.gloss_len[0] < 2:
            raise ValueError("gloss length range must start at >= 2")

    # token-role boundaries
    @property
    def secondary_ids(self) -> tuple[int, int]:
        return (self.gloss_vocab, self.gloss_vocab + 1)

    @property
    def suffix_ids(self) -> tuple[int, int]:
        return (self.gloss_vocab + 2, self.gloss_vocab + 3)

    @property
    def function_ids(self) -> tuple[int, ...]:
        return tuple(range(self.text_vocab - self.n_function_words, self.text_vocab))

    @property
    def verb_glosses(self) -> range:
        return range(2 * self.gloss_vocab // 3, self.gloss_vocab)


def preset(name: str) -> TaskSpec:
    """Two task flavors: 'a' reorders heavily with a small vocab, 'b' reorders
    rarely with a larger, character-like vocab."""
    if name == "a":
        return TaskSpec()
    if name == "b":
        return TaskSpec(gloss_vocab=30, text_vocab=42, reorder_prob=0.4,
                        gloss_len=(3, 7), n_variants=2)
    raise ValueError(f"unknown preset {name!r}")


@dataclass
class Corpus:
    split: str
    samples: list[Sample]
    provenance: str = "original"


# --- deterministic task tables -------------------------------------------

def _lexicon(spec: TaskSpec) -> list[tuple[int, ...]]:
    """Gloss id -> 1-2 text tokens; the first token is unique per gloss."""
    rng = np.random.default_rng([spec.seed % (1 << 63), 101])
    sec_a, sec_b = spec.secondary_ids
    suf_a, suf_b = spec.suffix_ids
    out = []
    for g in range(spec.gloss_vocab):
        if rng.random() < 0.5:
            out.append((g,))
        else:
            second = int(rng.choice([sec_a, sec_b, suf_a, suf_b]))
            out.append((g, second))
    return out


def _embeddings(spec: TaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed % (1 << 63), 202])
    return rng.normal(0.0, 1.0, size=(spec.gloss_vocab, spec.feature_dim))


def _variant_map(spec: TaskSpec, variant: int) -> np.ndarray:
    if variant == 0:
        return np.eye(spec.feature_dim)
    rng = np.random.default_rng([spec.seed % (1 << 63), 303, variant])
    return rng.normal(0.0, 1.0 / math.sqrt(spec.feature_dim),
                      size=(spec.feature_dim, spec.feature_dim)) + np.eye(spec.feature_dim)


def derive_text(spec: TaskSpec, gloss: list[int], apply_reorder: bool = True) -> list[int]:
    """Expand glosses through the lexicon; optionally move the first verb-class
    gloss to position 2 first, then append a content-selected function word."""
    lex = _lexicon(spec)
    order = list(gloss)
    if apply_reorder and spec.reorder_rule == "verb_to_second" and len(order) >= 2:
        verbs = [i for i, g in enumerate(order) if g in spec.verb_glosses]
        if verbs:
            v = order.pop(verbs[0])
            order.insert(1, v)
    text = [t for g in order for t in lex[g]]
    fws = spec.function_ids
    text.append(fws[sum(gloss) % len(fws)])
    return text


def _draw_structure(
    spec: TaskSpec, sample_id: int
) -> tuple[list[int], list[int], list[int], list[int]]:
    """Gloss sequence, text, per-gloss frame counts, and per-boundary
    transition-frame counts for one sample id.

    Retries with fresh draws until both label sequences fit the downsampled
    frame budget; pure in (spec, sample_id).
    """
    lo, hi = spec.gloss_len
    flo, fhi = spec.frames_per_gloss
    tlo, thi = spec.transition_frames
    verbs = list(spec.verb_glosses)
    non_verbs = [g for g in range(spec.gloss_vocab) if g not in spec.verb_glosses]
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([spec.seed % (1 << 63), sample_id, attempt])
        n = int(rng.integers(lo, hi + 1))
        gloss = []
        for _ in range(n):
            if rng.random() < 0.9:
                gloss.append(int(rng.choice(non_verbs)))
            else:
                gloss.append(int(rng.choice(verbs)))
        # plant one verb past the first two positions so the reorder rule
        # usually has to jump over something
        if n >= 3:
            gloss[int(rng.integers(2, n))] = int(rng.choice(verbs))
        apply_rule = rng.random() < spec.reorder_prob
        text = derive_text(spec, gloss, apply_reorder=apply_rule)
        counts = [int(rng.integers(flo, fhi + 1)) for _ in range(n)]
        trans = [int(rng.integers(tlo, thi + 1)) for _ in range(max(n - 1, 0))]
        t_out = sign_embed_length(sum(counts) + sum(trans), spec.downsample)
        if min_frames(gloss) <= t_out and min_frames(text) <= t_out:
            return gloss, text, counts, trans
    raise GenerationError(
        f"sample {sample_id}: no feasible draw in {spec.max_retries} attempts"
    )


def _render_features(spec: TaskSpec, sample_id: int, gloss: list[int],
                     counts: list[int], trans: list[int], variant: int) -> np.ndarray:
    emb = _embeddings(spec)
    # occurrence-level appearance jitter belongs to the underlying video, so
    # it is shared across embedding variants
    video_rng = np.random.default_rng([spec.seed % (1 << 63), sample_id, 6000])
    rendered = [
        emb[g] + video_rng.normal(0.0, spec.occurrence_sigma, size=emb.shape[1])
        for g in gloss
    ]
    segments = []
    for i, (vec, c) in enumerate(zip(rendered, counts)):
        segments.append(np.tile(vec, (c, 1)))
        if i < len(gloss) - 1 and trans[i] > 0:
            # movement-like blend frames carrying no gloss identity of their own
            ramp = np.linspace(0.25, 0.75, trans[i])[:, None]
            segments.append((1.0 - ramp) * vec + ramp * rendered[i + 1])
    clean = np.concatenate(segments) @ _variant_map(spec, variant)
    noise_rng = np.random.default_rng([spec.seed % (1 << 63), sample_id, 7000 + variant])
    return clean + noise_rng.normal(0.0, spec.noise_sigma, size=clean.shape)


def _make_sample(spec: TaskSpec, sample_id: int) -> Sample:
    gloss, text, counts, trans = _draw_structure(spec, sample_id)
    feats = _render_features(spec, sample_id, gloss, counts, trans, 0)
    return Sample(sample_id=sample_id, features=feats, gloss=gloss, text=text)


def gen_corpus(spec: TaskSpec, sizes: tuple[int, int, int]) -> dict[str, Corpus]:
    """Train/dev/test corpora, fully determined by (spec, sizes)."""
    if any(s < 1 for s in sizes):
        raise ValueError("all split sizes must be >= 1")
    out = {}
    for split, size in zip(("train", "dev", "test"), sizes):
        base = _SPLIT_OFFSETS[split]
        out[split] = Corpus(split, [_make_sample(spec, base + i) for i in range(size)])
    return out


def feature_variant(spec: TaskSpec, sample: Sample, variant: int) -> Sample:
    """Re-render an original sample's features through embedder ``variant``;
    labels are untouched. Variant 0 reproduces the generated features."""
    if not 0 <= variant < spec.n_variants:
        raise ValueError(f"variant {variant} outside [0, {spec.n_variants})")
    gloss, _, counts, trans = _draw_structure(spec, sample.sample_id)
    feats = _render_features(spec, sample.sample_id, gloss, counts, trans, variant)
    return Sample(sample_id=sample.sample_id, features=feats, gloss=list(sample.gloss),
                  text=list(sample.text), variant=variant, provenance=sample.provenance)


# --- paraphrase rules -----------------------------------------------------

def _canon_map(spec: TaskSpec) -> dict[int, int]:
    sec_a, sec_b = spec.secondary_ids
    suf_a, suf_b = spec.suffix_ids
    return {sec_b: sec_a, suf_b: suf_a}


def _synonym_map(spec: TaskSpec) -> dict[int, int]:
    # involution pairing consecutive primary tokens
    m = {}
    for a in range(0, spec.gloss_vocab - 1, 2):
        m[a] = a + 1
        m[a + 1] = a
    return m


def paraphrase(spec: TaskSpec, text: list[int], rule: str, seed: int = 0) -> list[int]:
    """Deterministic token-level paraphrase stand-ins.

    normalize: map variant tokens to their canonical ids.
    lemmatize: drop the first inflection-suffix token, if any.
    backtranslate: synonym involution on primaries plus adjacent-pair swap.
    """
    if rule == "original":
        return list(text)
    if rule == "normalize":
        cm = _canon_map(spec)
        return [cm.get(t, t) for t in text]
    if rule == "lemmatize":
        out = list(text)
        for i, t in enumerate(out):
            if t in spec.suffix_ids:
                del out[i]
                break
        return out
    if rule == "backtranslate":
        sm = _synonym_map(spec)
        swapped = [sm.get(t, t) for t in text]
        for i in range(0, len(swapped) - 1, 2):
            swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
        return swapped
    raise ValueError(f"unknown paraphrase rule {rule!r}")


def backtranslate_inverse(spec: TaskSpec, text: list[int]) -> list[int]:
    """Inverse of the backtranslate rule (it is an involution)."""
    return paraphrase(spec, text, "backtranslate")


DEFAULT_PAIRING = ((0, "original"), (1, "normalize"), (2, "backtranslate"))


def build_warmstart_corpus(corpus: Corpus, spec: TaskSpec,
                           pairing: tuple[tuple[int, str], ...] | None = None) -> Corpus:
    """Union of (feature variant, paraphrased text) renderings of the train
    split, one block per pairing-table entry. The (0, original) entry passes
    samples through unchanged."""
    if pairing is None:
        pairing = tuple(p for p in DEFAULT_PAIRING if p[0] < spec.n_variants)
    out: list[Sample] = []
    for cell, (variant, rule) in enumerate(pairing):
        for s in corpus.samples:
            if variant == 0 and rule == "original":
                out.append(s)
                continue
            aug = feature_variant(spec, s, variant)
            aug.text = paraphrase(spec, s.text, rule)
            aug.sample_id = s.sample_id + _AUG_ID_STRIDE * (cell + 1)
            aug.provenance = "augmented"
            out.append(aug)
    return Corpus(corpus.split, out, provenance="augmented")


# --- analysis -------------------------------------------------------------

def induced_gloss_positions(spec: TaskSpec, sample: Sample) -> list[int]:
    """Original gloss positions in the order the text mentions them, read off
    the text's primary tokens through the lexicon inverse."""
    remaining = {i: g for i, g in enumerate(sample.gloss)}
    positions = []
    for t in sample.text:
        if t >= spec.gloss_vocab:
            continue
        hit = min((i for i, g in remaining.items() if g == t), default=None)
        if hit is not None:
            positions.append(hit)
            del remaining[hit]
    return positions


def reorder_witness_rate(spec: TaskSpec, corpus: Corpus) -> float:
    """Fraction of samples whose text visits glosses out of source order."""
    hits = 0
    for s in corpus.samples:
        pos = induced_gloss_positions(spec, s)
        if pos != sorted(pos):
            hits += 1
    return hits / len(corpus.samples)


def corpus_stats(corpora: dict[str, Corpus]) -> list[dict]:
    """Per-split sentence/vocab/word/OOV counts in the usual corpus-table
    layout. OOV counts text tokens unseen in the train split."""
    train_vocab = {t for s in corpora["train"].samples for t in s.text}
    rows = []
    for split in ("train", "dev", "test"):
        c = corpora[split]
        tokens = [t for s in c.samples for t in s.text]
        row = {
            "split": split,
            "sentences": len(c.samples),
            "vocab": len(set(tokens)),
            "words": len(tokens),
            "oovs": "" if split == "train" else len(
                {t for t in tokens if t not in train_vocab}
            ),
        }
        rows.append(row)
    return rows


# --- corpus file I/O ------------------------------------------------------

def write_corpus(path, corpus: Corpus) -> None:
    """One sample per line: id, split, variant, shape, hex-encoded little-endian
    doubles (row-major), gloss ids, text ids, provenance."""
    with open(path, "w") as fh:
        for s in corpus.samples:
            feats = np.ascontiguousarray(s.features, dtype="<f8")
            fields = [
                str(s.sample_id),
                corpus.split,
                str(s.variant),
                f"{feats.shape[0]},{feats.shape[1]}",
                feats.tobytes().hex(),
                " ".join(map(str, s.gloss)),
                " ".join(map(str, s.text)),
                s.provenance,
            ]
            fh.write("\t".join(fields) + "\n")


def read_corpus(path) -> Corpus:
    samples = []
    split = None
    with open(path) as fh:
        for line in fh:
            sid, split, variant, shape, hexdata, gloss, text, prov = line.rstrip("\n").split("\t")
            rows, cols = (int(x) for x in shape.split(","))
            feats = np.frombuffer(bytes.fromhex(hexdata), dtype="<f8").reshape(rows, cols)
            samples.append(
                Sample(
                    sample_id=int(sid),
                    features=feats.astype(np.float64),
                    gloss=[int(t) for t in gloss.split()] if gloss else [],
                    text=[int(t) for t in text.split()] if text else [],
                    variant=int(variant),
                    provenance=prov,
                )
            )
    if split is None:
        raise ValueError(f"empty corpus file {path}")
    return Corpus(split, samples)


def token_names(spec: TaskSpec) -> tuple[list[str], list[str]]:
    """Human-readable names for gloss and text vocabularies."""
    gloss = [f"G{g:03d}" for g in range(spec.gloss_vocab)]
    text = []
    sec = spec.secondary_ids
    suf = spec.suffix_ids
    for t in range(spec.text_vocab):
        if t < spec.gloss_vocab:
            text.append(f"w{t:03d}")
        elif t == sec[0]:
            text.append("aux")
        elif t == sec[1]:
            text.append("aux_alt")
        elif t == suf[0]:
            text.append("sfx")
        elif t == suf[1]:
            text.append("sfx_alt")
        elif t in spec.function_ids:
            text.append(f"fn{t - spec.function_ids[0]}")
        else:
            text.append(f"x{t:03d}")
    return gloss, text


def write_vocab_files(out_dir, spec: TaskSpec) -> None:
    gloss, text = token_names(spec)
    with open(f"{out_dir}/gloss.vocab", "w") as fh:
        fh.write("\n".join(gloss) + "\n")
    with open(f"{out_dir}/text.vocab", "w") as fh:
        fh.write("\n".join(text) + "\n")
