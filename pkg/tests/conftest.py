import numpy as np
import pytest

from rotcap.config import new_rng
from rotcap.data import PreprocessConfig
from rotcap.models import CaptionDecoder, ConvEncoder, DecoderSpec, EncoderSpec, StageSpec
from rotcap.synthetic import make_synthetic


def fd_grad(f, arr, eps=1e-6):
    """Central finite differences of scalar f() w.r.t. every element of arr."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def tiny_encoder(rng=None, embed=6, widths=(4, 5), skip=True):
    spec = EncoderSpec(stages=[StageSpec(w, kernel=3, stride=2) for w in widths],
                       embed_size=embed, skip_connections=skip)
    return ConvEncoder(spec, rng if rng is not None else new_rng(0))


def tiny_decoder(vocab_size=9, embed=6, hidden=7, rng=None):
    return CaptionDecoder(DecoderSpec(embed_size=embed, hidden_size=hidden,
                                      vocab_size=vocab_size),
                          rng if rng is not None else new_rng(1))


def desk_preprocess(train=True):
    return PreprocessConfig(resize_to=32, crop_size=32, hflip_prob=0.0,
                            train_mode=train).validate()


@pytest.fixture(scope="session")
def shapes_dataset(tmp_path_factory):
    """Small shared synthetic dataset on disk (12 images, seeded)."""
    root = tmp_path_factory.mktemp("shapes")
    make_synthetic(root, 12, seed=7, size=32)
    return root
