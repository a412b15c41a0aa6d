import math
from pathlib import Path

import pytest

from conftest import desk_preprocess, tiny_decoder, tiny_encoder
from rotcap.checkpoint import captioner_checkpoint, save_checkpoint
from rotcap.config import new_rng
from rotcap.data import TokenizedDataset, load_dataset
from rotcap.errors import DataError
from rotcap.evaluation import (MetricsReport, bleu, bleu_scores, brevity_penalty,
                               caption_loss, evaluate_model, modified_precision,
                               perplexity)
from rotcap.report import (REPORT_COLUMNS, read_report_csv, read_samples,
                           render_report, write_report_csv, write_samples)
from rotcap.synthetic import make_synthetic
from rotcap.vocab import Vocabulary


# --- independent brute-force BLEU oracle -------------------------------------

def _oracle_bleu(candidates, references, max_n=4):
    """Slow reference implementation: explicit clipping, one n at a time."""
    def grams(ws, n):
        return [tuple(ws[i:i + n]) for i in range(len(ws) - n + 1)]

    logs = []
    for n in range(1, max_n + 1):
        clipped = 0
        total = 0
        for cand, refs in zip(candidates, references):
            cgrams = grams(cand, n)
            total += len(cgrams)
            for gram in set(cgrams):
                have = cgrams.count(gram)
                allow = max(ref_grams.count(gram)
                            for ref_grams in (grams(r, n) for r in refs))
                clipped += min(have, allow)
        if total == 0:
            logs.append(None)
        else:
            logs.append(math.log(max(clipped / total, 1e-9)))
    c = sum(len(cand) for cand in candidates)
    r = 0
    for cand, refs in zip(candidates, references):
        best = sorted(refs, key=lambda ref: (abs(len(ref) - len(cand)), len(ref)))[0]
        r += len(best)
    if c == 0:
        bp = 0.0
    else:
        bp = 1.0 if c > r else math.exp(1 - r / c)
    kept = [x for x in logs if x is not None]
    return bp * math.exp(sum(kept) / len(kept)) if kept else 0.0


def test_bleu_identity():
    for cand in (["the", "cat", "sat", "down", "today"], ["hi"]):
        assert bleu([cand], [[list(cand)]]) == 1.0


def test_bleu_disjoint_is_near_zero():
    score = bleu([["aa", "bb", "cc", "dd"]], [[["x", "y", "z", "w"]]])
    assert score <= 1e-6


def test_bleu_clipping_the_the_case():
    p1 = modified_precision([["the", "the", "the", "the"]],
                            [[["the", "cat", "sat", "down"]]], 1)
    assert p1 == 0.25


def test_bleu_matches_oracle_on_random_corpora():
    rng = new_rng(17)
    words = [f"w{i}" for i in range(12)]
    for _ in range(20):
        n_sent = int(rng.integers(1, 6))
        cands, refs = [], []
        for _ in range(n_sent):
            cands.append([words[int(i)] for i in rng.integers(0, 12, rng.integers(1, 11))])
            group = []
            for _ in range(int(rng.integers(1, 4))):
                group.append([words[int(i)] for i in rng.integers(0, 12, rng.integers(1, 11))])
            refs.append(group)
        assert abs(bleu(cands, refs) - _oracle_bleu(cands, refs)) < 1e-9


def test_bleu_multi_reference_clipping():
    cand = [["a", "a", "b"]]
    refs = [[["a", "c"], ["a", "a"]]]  # max ref count of "a" is 2
    assert modified_precision(cand, refs, 1) == pytest.approx(2 / 3)


def test_bleu_permutation_invariance():
    cands = [["a", "b"], ["c", "d", "e"], ["f"]]
    refs = [[["a", "b"]], [["c", "x", "e"]], [["f", "g"]]]
    base = bleu(cands, refs)
    order = [2, 0, 1]
    assert bleu([cands[i] for i in order], [refs[i] for i in order]) == pytest.approx(base)


def test_bleu_brevity_penalty():
    # shorter candidate than reference is penalized
    assert brevity_penalty([["a", "b"]], [[["a", "b", "c", "d"]]]) == pytest.approx(math.exp(1 - 2))
    assert brevity_penalty([["a", "b", "c"]], [[["a", "b"]]]) == 1.0
    assert brevity_penalty([[]], [[["a"]]]) == 0.0


def test_bleu_validation():
    with pytest.raises(DataError):
        bleu([], [])
    with pytest.raises(DataError):
        bleu([["a"]], [])
    with pytest.raises(DataError):
        bleu([["a"]], [[]])


def test_bleu_scores_monotone_count():
    scores = bleu_scores([["a", "b", "c", "d", "e"]], [[["a", "b", "x", "d", "e"]]])
    assert len(scores) == 4
    assert all(0.0 <= s <= 1.0 for s in scores)


# --- perplexity ---------------------------------------------------------------

def _corpus(root, n=8):
    make_synthetic(root, n, seed=13, size=32)
    ds = load_dataset(root, root / "manifest.tsv")
    vocab = Vocabulary.build([r.caption_text for r in ds.records], 1)
    return ds, vocab


def test_uniform_predictor_perplexity_is_vocab_size(tmp_path):
    ds, vocab = _corpus(tmp_path)
    tok = TokenizedDataset.from_dataset(ds, vocab, desk_preprocess())
    rng = new_rng(0)
    enc = tiny_encoder(rng)
    dec = tiny_decoder(vocab_size=len(vocab), embed=enc.embed_size, rng=rng)
    for p in dec.params().values():
        p[...] = 0.0  # all-zero decoder -> exactly uniform logits
    ppl = perplexity(enc, dec, tok)
    assert abs(ppl - len(vocab)) < 1e-6


def test_perplexity_is_exp_loss(tmp_path):
    ds, vocab = _corpus(tmp_path)
    tok = TokenizedDataset.from_dataset(ds, vocab, desk_preprocess())
    rng = new_rng(1)
    enc = tiny_encoder(rng)
    dec = tiny_decoder(vocab_size=len(vocab), embed=enc.embed_size, rng=rng)
    loss = caption_loss(enc, dec, tok)
    assert abs(perplexity(enc, dec, tok) - math.exp(loss)) < 1e-9
    assert caption_loss(enc, dec, tok) == loss  # eval-mode determinism


def test_perplexity_empty_dataset_errors(tmp_path):
    ds, vocab = _corpus(tmp_path)
    tok = TokenizedDataset(ds, [], desk_preprocess())
    tok.tokens = []
    with pytest.raises(DataError):
        caption_loss(tiny_encoder(), tiny_decoder(vocab_size=len(vocab)), tok)


# --- evaluate_model -----------------------------------------------------------

def test_evaluate_model_fills_report(tmp_path):
    ds, vocab = _corpus(tmp_path, n=8)
    rng = new_rng(2)
    enc = tiny_encoder(rng)
    dec = tiny_decoder(vocab_size=len(vocab), embed=enc.embed_size, rng=rng)
    ckpt_path = tmp_path / "cap.bin"
    save_checkpoint(ckpt_path, captioner_checkpoint(enc, dec, vocab.content_hash()))
    report = evaluate_model(ckpt_path, ds, vocab, desk_preprocess(False),
                            model_name="tiny", max_len=8, sample_count=3)
    assert report.model_name == "tiny"
    assert report.caption_loss > 0
    assert abs(report.perplexity - math.exp(report.caption_loss)) < 1e-9
    assert 0.0 <= report.bleu4 <= 1.0
    assert report.bleu == report.bleu4
    assert len(report.samples) == 3
    assert report.pretext_accuracy is None


def test_evaluate_model_rejects_wrong_vocab(tmp_path):
    ds, vocab = _corpus(tmp_path, n=6)
    rng = new_rng(3)
    enc = tiny_encoder(rng)
    dec = tiny_decoder(vocab_size=len(vocab), embed=enc.embed_size, rng=rng)
    ckpt_path = tmp_path / "cap.bin"
    save_checkpoint(ckpt_path, captioner_checkpoint(enc, dec, "deadbeef"))
    from rotcap.errors import CheckpointError
    with pytest.raises(CheckpointError, match="vocabulary"):
        evaluate_model(ckpt_path, ds, vocab, desk_preprocess(False))


# --- report rendering ---------------------------------------------------------

def _reports():
    return [
        MetricsReport("beta", 0.61, math.exp(0.61), 0.8, 0.7, 0.6, 0.5,
                      probe_accuracy=0.5),
        MetricsReport("alpha", 0.42, math.exp(0.42), 0.9, 0.8, 0.7, 0.62,
                      pretext_accuracy=0.97, probe_accuracy=0.9),
    ]


def test_render_report_files_and_order(tmp_path):
    paths = render_report(_reports(), tmp_path)
    for p in paths.values():
        assert Path(p).is_file()
    lines = Path(paths["csv"]).read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert lines[1].startswith("alpha,") and lines[2].startswith("beta,")


def test_render_report_deterministic_bytes(tmp_path):
    a = render_report(_reports(), tmp_path / "a")
    b = render_report(_reports(), tmp_path / "b")
    for key in a:
        assert Path(a[key]).read_bytes() == Path(b[key]).read_bytes(), key


def test_render_report_empty_errors(tmp_path):
    with pytest.raises(DataError):
        render_report([], tmp_path)


def test_report_csv_round_trip(tmp_path):
    path = tmp_path / "report.csv"
    write_report_csv(_reports(), path)
    loaded = read_report_csv(path)
    assert [r.model_name for r in loaded] == ["beta", "alpha"]
    assert loaded[1].pretext_accuracy == pytest.approx(0.97)
    assert loaded[0].pretext_accuracy is None


def test_samples_round_trip(tmp_path):
    from rotcap.evaluation import CaptionSample
    reports = _reports()
    reports[0].samples = [CaptionSample("img_0", "a red arrow .", "a red arrow .")]
    path = tmp_path / "samples.txt"
    write_samples(reports, path)
    parsed = read_samples(path)
    assert parsed["beta"][0].image_id == "img_0"
    assert parsed["beta"][0].generated == "a red arrow ."
