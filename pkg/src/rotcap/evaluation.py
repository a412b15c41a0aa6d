"""Caption metrics: perplexity, corpus BLEU, and whole-model evaluation.

BLEU is corpus-level: clipped modified n-gram precisions for n = 1..4,
geometric mean, closest-reference-length brevity penalty, and add-epsilon
(1e-9) smoothing for zero precisions.  Cumulative BLEU-1..4 are all
reported so the single-number choice stays transparent.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, restore_captioner, restore_pretext
from .config import derive_seed, new_rng
from .data import CaptionDataset, PreprocessConfig, TokenizedDataset, preprocess
from .errors import CheckpointError, DataError
from .models import probe_eval, probe_fit
from .rotation import pretext_eval
from .vocab import Vocabulary, tokenize_words

BLEU_EPSILON = 1e-9


@dataclass
class CaptionSample:
    image_id: str
    reference: str
    generated: str


@dataclass
class MetricsReport:
    model_name: str
    caption_loss: float
    perplexity: float
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    pretext_accuracy: float | None = None
    probe_accuracy: float | None = None
    samples: list[CaptionSample] = field(default_factory=list)

    @property
    def bleu(self) -> float:
        return self.bleu4


def ngram_counts(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def _corpus_ngram_stats(candidates, references, n: int) -> tuple[int, int]:
    clipped = 0
    total = 0
    for cand, refs in zip(candidates, references):
        counts = ngram_counts(cand, n)
        total += max(0, len(cand) - n + 1)
        if not counts:
            continue
        max_ref: Counter = Counter()
        for ref in refs:
            for gram, cnt in ngram_counts(ref, n).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        clipped += sum(min(cnt, max_ref[gram]) for gram, cnt in counts.items())
    return clipped, total


def _validate_bleu_inputs(candidates, references) -> None:
    if not candidates:
        raise DataError("bleu: empty candidate list")
    if len(candidates) != len(references):
        raise DataError(f"bleu: {len(candidates)} candidates vs {len(references)} reference lists")
    for refs in references:
        if not refs:
            raise DataError("bleu: every candidate needs at least one reference")


def modified_precision(candidates, references, n: int) -> float:
    """Corpus-level clipped n-gram precision (0 when no n-grams exist)."""
    _validate_bleu_inputs(candidates, references)
    clipped, total = _corpus_ngram_stats(candidates, references, n)
    return clipped / total if total else 0.0


def brevity_penalty(candidates, references) -> float:
    c = sum(len(cand) for cand in candidates)
    r = 0
    for cand, refs in zip(candidates, references):
        r += min((len(ref) for ref in refs),
                 key=lambda L: (abs(L - len(cand)), L))
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu_scores(candidates, references, max_n: int = 4) -> list[float]:
    """Cumulative corpus BLEU-1..max_n.

    Orders with no candidate n-grams at all are skipped rather than
    counted as zero, so a corpus of very short exact matches still scores
    1.0; present-but-zero precisions are floored at 1e-9.
    """
    _validate_bleu_inputs(candidates, references)
    bp = brevity_penalty(candidates, references)
    log_precisions: list[float | None] = []
    for n in range(1, max_n + 1):
        clipped, total = _corpus_ngram_stats(candidates, references, n)
        if total == 0:
            log_precisions.append(None)
        else:
            log_precisions.append(math.log(max(clipped / total, BLEU_EPSILON)))
    scores = []
    for k in range(1, max_n + 1):
        logs = [lp for lp in log_precisions[:k] if lp is not None]
        scores.append(bp * math.exp(sum(logs) / len(logs)) if logs else 0.0)
    return scores


def bleu(candidates, references, max_n: int = 4) -> float:
    return bleu_scores(candidates, references, max_n)[max_n - 1]


def prepare_images(dataset: CaptionDataset, cfg: PreprocessConfig,
                   image_ids: list[str] | None = None) -> np.ndarray:
    """Eval-mode preprocess of (by default) every unique image, N x C x S x S."""
    eval_cfg = cfg.eval_mode()
    ids = dataset.unique_image_ids() if image_ids is None else image_ids
    if not ids:
        raise DataError("no images to preprocess")
    by_id = {rec.image_id: i for i, rec in enumerate(dataset.records)}
    out = []
    for image_id in ids:
        if image_id not in by_id:
            raise DataError(f"image id {image_id!r} not present in dataset")
        out.append(preprocess(dataset.load_raw(by_id[image_id]), eval_cfg))
    return np.stack(out)


def encode_images(encoder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    feats = [encoder.forward(images[i : i + batch_size])
             for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(feats, axis=0)


def caption_loss(encoder, decoder, dataset: TokenizedDataset, batch_size: int = 64) -> float:
    """Mean token-level cross entropy over the whole dataset, eval mode."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    eval_cfg = dataset.preprocess_cfg.eval_mode()
    pools: dict[int, list[int]] = {}
    for i, toks in enumerate(dataset.tokens):
        pools.setdefault(len(toks), []).append(i)
    total_nll = 0.0
    positions = 0
    for length in sorted(pools):
        idxs = pools[length]
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start : start + batch_size]
            images = np.stack([preprocess(dataset.base.load_raw(i), eval_cfg) for i in chunk])
            captions = np.array([dataset.tokens[i] for i in chunk], dtype=np.int64)
            logits = decoder.decode_train(encoder.forward(images), captions)
            loss, _ = nn.softmax_cross_entropy(
                logits.reshape(-1, logits.shape[-1]), captions.reshape(-1))
            total_nll += float(loss) * captions.size
            positions += captions.size
    return total_nll / positions


def perplexity(encoder, decoder, dataset: TokenizedDataset, batch_size: int = 64) -> float:
    return float(np.exp(caption_loss(encoder, decoder, dataset, batch_size)))


def generate_captions(encoder, decoder, dataset: CaptionDataset, vocab: Vocabulary,
                      cfg: PreprocessConfig, max_len: int = 20):
    """Greedy captions for every unique image, with grouped references.

    Returns (image_ids, candidate word lists, reference word-list groups).
    References are normalized the same way the tokenizer normalizes text.
    """
    ids = dataset.unique_image_ids()
    refs_by_id: dict[str, list[list[str]]] = {i: [] for i in ids}
    first_ref: dict[str, str] = {}
    for rec in dataset.records:
        refs_by_id[rec.image_id].append(tokenize_words(rec.caption_text))
        first_ref.setdefault(rec.image_id, rec.caption_text)
    images = prepare_images(dataset, cfg, ids)
    features = encode_images(encoder, images)
    candidates = [vocab.words_of(decoder.generate(features[i], max_len))
                  for i in range(len(ids))]
    references = [refs_by_id[i] for i in ids]
    return ids, candidates, references, first_ref


def evaluate_model(checkpoint_path, dataset: CaptionDataset, vocab: Vocabulary,
                   preprocess_cfg: PreprocessConfig, *, labels: dict[str, str] | None = None,
                   pretext_checkpoint_path=None, max_len: int = 20,
                   model_name: str | None = None, probe_l2: float = 1e-4,
                   sample_count: int = 10) -> MetricsReport:
    """Fill every computable MetricsReport field for one captioner checkpoint."""
    ckpt = load_checkpoint(checkpoint_path)
    encoder, decoder = restore_captioner(ckpt)
    stored_hash = ckpt.meta.get("vocab_hash")
    if stored_hash and stored_hash != vocab.content_hash():
        raise CheckpointError("vocabulary does not match the one this checkpoint was trained with")
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    name = model_name or str(checkpoint_path)

    tokenized = TokenizedDataset.from_dataset(dataset, vocab, preprocess_cfg)
    loss = caption_loss(encoder, decoder, tokenized)
    ppl = float(np.exp(loss))
    ids, candidates, references, first_ref = generate_captions(
        encoder, decoder, dataset, vocab, preprocess_cfg, max_len)
    b1, b2, b3, b4 = bleu_scores(candidates, references)

    samples = [CaptionSample(image_id=i, reference=first_ref[i],
                             generated=" ".join(candidates[k]))
               for k, i in enumerate(ids[:sample_count])]

    probe_acc = None
    if labels:
        labeled_ids = [i for i in dataset.unique_image_ids() if i in labels]
        if len(labeled_ids) < 4:
            raise DataError("need at least 4 labeled images for probing")
        classes = sorted(set(labels[i] for i in labeled_ids))
        y = np.array([classes.index(labels[i]) for i in labeled_ids], dtype=np.int64)
        feats = encode_images(encoder, prepare_images(dataset, preprocess_cfg, labeled_ids))
        probe_acc = heldout_probe_accuracy(feats, y, l2=probe_l2)

    pretext_acc = None
    if pretext_checkpoint_path is not None:
        p_encoder, p_head = restore_pretext(load_checkpoint(pretext_checkpoint_path))
        images = prepare_images(dataset, preprocess_cfg)
        pretext_acc = pretext_eval(p_encoder, p_head, images)

    return MetricsReport(model_name=name, caption_loss=loss, perplexity=ppl,
                         bleu1=b1, bleu2=b2, bleu3=b3, bleu4=b4,
                         pretext_accuracy=pretext_acc, probe_accuracy=probe_acc,
                         samples=samples)


def heldout_probe_accuracy(features: np.ndarray, labels: np.ndarray, l2: float = 1e-4,
                           train_fraction: float = 0.7, split_seed: int = 0) -> float:
    """Fit the linear probe on a seeded split and score the held-out part."""
    n = features.shape[0]
    rng = new_rng(derive_seed(split_seed, "probe-split"))
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    if n_train < 2 or n_train >= n:
        raise DataError(f"probe split leaves no usable train/heldout parts (N={n})")
    train, held = perm[:n_train], perm[n_train:]
    weights = probe_fit(features[train], labels[train], l2=l2)
    return probe_eval(weights, features[held], labels[held])
