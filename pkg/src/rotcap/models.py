"""Model definitions: convolutional encoder, LSTM caption decoder,
rotation/classification heads, and the linear probe.

The encoder is a small residual CNN (configurable stages, global average
pool, linear projection to the embedding size) whose trunk is separable
from any task head.  The decoder follows the show-and-tell protocol: the
projected image feature occupies LSTM step 0 and the caption tokens
follow, so training logits have exactly one step per caption token.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DataError
from .vocab import END_INDEX, START_INDEX


@dataclass
class StageSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    pool: str = "none"  # none | max | avg (2x2 after the block)

    def to_dict(self):
        return {"out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "pool": self.pool}


@dataclass
class EncoderSpec:
    stages: list[StageSpec] = field(default_factory=lambda: [
        StageSpec(16), StageSpec(32), StageSpec(64), StageSpec(128)])
    embed_size: int = 512
    skip_connections: bool = True
    in_channels: int = 3

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages],
                "embed_size": self.embed_size,
                "skip_connections": self.skip_connections,
                "in_channels": self.in_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(stages=[StageSpec(**s) for s in d["stages"]],
                   embed_size=d["embed_size"],
                   skip_connections=d["skip_connections"],
                   in_channels=d.get("in_channels", 3))

    @classmethod
    def from_widths(cls, widths: list[int], embed_size: int,
                    skip_connections: bool = True) -> "EncoderSpec":
        return cls(stages=[StageSpec(w) for w in widths], embed_size=embed_size,
                   skip_connections=skip_connections)


@dataclass
class DecoderSpec:
    embed_size: int
    hidden_size: int
    vocab_size: int
    num_layers: int = 1

    def to_dict(self):
        return {"embed_size": self.embed_size, "hidden_size": self.hidden_size,
                "vocab_size": self.vocab_size, "num_layers": self.num_layers}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderSpec":
        return cls(**d)


class _Composite:
    """Parameter bookkeeping over named sublayers."""

    def sublayers(self) -> dict:
        raise NotImplementedError

    def params(self):
        return nn.collect(self.sublayers(), "params")

    def grads(self):
        return nn.collect(self.sublayers(), "grads")

    def zero_grads(self):
        for g in self.grads().values():
            g[...] = 0.0


class ResidualBlock(_Composite):
    """conv-relu-conv with an optional identity/projection skip."""

    def __init__(self, c_in, c_out, kernel, stride, skip, rng):
        self.skip = skip
        self.conv1 = nn.Conv2d(c_in, c_out, kernel, stride, rng=rng)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(c_out, c_out, kernel, 1, rng=rng)
        self.proj = None
        if skip and (stride != 1 or c_in != c_out):
            self.proj = nn.Conv2d(c_in, c_out, 1, stride, pad=0, rng=rng)
        self.relu2 = nn.ReLU()

    def forward(self, x):
        y = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        if self.skip:
            y = y + (self.proj.forward(x) if self.proj is not None else x)
        return self.relu2.forward(y)

    def backward(self, dout):
        dy = self.relu2.backward(dout)
        dx = self.conv1.backward(self.relu1.backward(self.conv2.backward(dy)))
        if self.skip:
            dx = dx + (self.proj.backward(dy) if self.proj is not None else dy)
        return dx

    def sublayers(self):
        layers = {"conv1": self.conv1, "conv2": self.conv2}
        if self.proj is not None:
            layers["proj"] = self.proj
        return layers


class ConvEncoder(_Composite):
    """Residual CNN trunk + global average pool + projection to embed size."""

    def __init__(self, spec: EncoderSpec, rng: np.random.Generator):
        self.spec = spec
        self._chain = []
        c_in = spec.in_channels
        for i, st in enumerate(spec.stages):
            block = ResidualBlock(c_in, st.out_channels, st.kernel, st.stride,
                                  spec.skip_connections, rng)
            self._chain.append((f"stage{i}", block))
            if st.pool == "max":
                self._chain.append((f"stage{i}_pool", nn.MaxPool2d(2)))
            elif st.pool == "avg":
                self._chain.append((f"stage{i}_pool", nn.AvgPool2d(2)))
            elif st.pool != "none":
                raise DataError(f"unknown pool kind {st.pool!r}")
            c_in = st.out_channels
        self._chain.append(("gap", nn.GlobalAvgPool()))
        self._chain.append(("proj", nn.Linear(c_in, spec.embed_size, rng)))

    @property
    def embed_size(self):
        return self.spec.embed_size

    def forward(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=nn.DTYPE)
        if images.ndim != 4 or images.shape[1] != self.spec.in_channels:
            raise DataError(f"encoder: expected B x {self.spec.in_channels} x S x S "
                            f"images, got shape {images.shape}")
        if images.shape[2] != images.shape[3]:
            raise DataError(f"encoder: images must be square, got {images.shape}")
        out = images
        for _, layer in self._chain:
            out = layer.forward(out)
        return out

    def backward(self, dfeatures: np.ndarray) -> np.ndarray:
        dout = dfeatures
        for _, layer in reversed(self._chain):
            dout = layer.backward(dout)
        return dout

    def sublayers(self):
        return dict(self._chain)


def encode(images: np.ndarray, encoder: ConvEncoder) -> np.ndarray:
    """Image batch -> B x E feature matrix (deterministic in eval mode)."""
    return encoder.forward(images)


class LinearHead(_Composite):
    """Class-score head on top of frozen or trainable features."""

    def __init__(self, embed_size: int, n_classes: int, rng: np.random.Generator):
        self.fc = nn.Linear(embed_size, n_classes, rng)

    @property
    def n_classes(self):
        return self.fc.n_out

    def forward(self, features):
        return self.fc.forward(features)

    def backward(self, dout):
        return self.fc.backward(dout)

    def sublayers(self):
        return {"fc": self.fc}


def rotation_head(embed_size: int, rng: np.random.Generator) -> LinearHead:
    return LinearHead(embed_size, 4, rng)


class CaptionDecoder(_Composite):
    def __init__(self, spec: DecoderSpec, rng: np.random.Generator):
        if spec.num_layers != 1:
            raise DataError("decoder: only num_layers=1 is supported")
        self.spec = spec
        self.embed = nn.Embedding(spec.vocab_size, spec.embed_size, rng)
        self.lstm = nn.LSTM(spec.embed_size, spec.hidden_size, rng)
        self.out = nn.Linear(spec.hidden_size, spec.vocab_size, rng)

    def decode_train(self, features: np.ndarray, captions: np.ndarray) -> np.ndarray:
        """Teacher-forced logits, shape B x L x V.

        Step 0 consumes the image feature and predicts token 0 (the start
        marker); step t >= 1 consumes token t-1 and predicts token t.
        """
        features = np.asarray(features, dtype=nn.DTYPE)
        captions = np.asarray(captions)
        if captions.ndim != 2 or captions.shape[1] < 2:
            raise DataError(f"decoder: captions must be B x L with L >= 2, got {captions.shape}")
        if features.ndim != 2 or features.shape[0] != captions.shape[0]:
            raise DataError("decoder: features and captions batch sizes differ")
        if features.shape[1] != self.spec.embed_size:
            raise DataError(f"decoder: expected feature dim {self.spec.embed_size}, "
                            f"got {features.shape[1]}")
        if not (captions[:, 0] == START_INDEX).all():
            raise DataError("decoder: every caption must begin with the start token 0")
        emb = self.embed.forward(captions[:, :-1])
        inputs = np.concatenate([features[:, None, :], emb], axis=1)
        return self.out.forward(self.lstm.forward(inputs))

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Backprop through the training pass; returns d(loss)/d(features)."""
        dinputs = self.lstm.backward(self.out.backward(dlogits))
        self.embed.backward(dinputs[:, 1:, :])
        return dinputs[:, 0, :]

    def generate(self, feature: np.ndarray, max_len: int = 20) -> list[int]:
        """Greedy decode: [0, tokens..., maybe 1], at most max_len long.

        Each argmax feeds back as the next input, matching decode_train's
        step alignment; ties resolve to the lowest index.
        """
        if max_len < 2:
            raise DataError(f"generate: max_len must be >= 2, got {max_len}")
        feature = np.asarray(feature, dtype=nn.DTYPE).reshape(1, -1)
        if feature.shape[1] != self.spec.embed_size:
            raise DataError(f"generate: expected feature dim {self.spec.embed_size}")
        hs = self.spec.hidden_size
        h = np.zeros((1, hs), dtype=nn.DTYPE)
        c = np.zeros((1, hs), dtype=nn.DTYPE)
        # Step 0 consumes the feature; its (degenerate) start prediction is
        # not emitted, only the state update matters.
        h, c = self.lstm.step(feature, h, c)
        seq = [START_INDEX]
        token = START_INDEX
        while len(seq) < max_len:
            h, c = self.lstm.step(self.embed.w[token][None, :], h, c)
            logits = h @ self.out.w + self.out.b
            token = int(np.argmax(logits[0]))
            seq.append(token)
            if token == END_INDEX:
                break
        return seq

    def sublayers(self):
        return {"embed": self.embed, "lstm": self.lstm, "out": self.out}


@dataclass
class ProbeWeights:
    w: np.ndarray  # E x K
    b: np.ndarray  # K


def probe_fit(features: np.ndarray, labels: np.ndarray, l2: float = 0.0,
              max_iter: int = 10000, tol: float = 1e-6) -> ProbeWeights:
    """Multinomial logistic regression on frozen features.

    Full-batch gradient descent with an adaptive step, run until the
    gradient norm drops below ``tol`` or ``max_iter`` steps.  The intercept
    is not regularized, so in the l2 -> inf limit predictions collapse to
    the majority class.
    """
    x = np.asarray(features, dtype=nn.DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise DataError("probe: features must be N x E with one label per row")
    classes = int(y.max()) + 1 if y.size else 0
    if np.unique(y).size < 2:
        raise DataError("probe: need at least two distinct classes")
    n = x.shape[0]
    if n < classes:
        raise DataError(f"probe: need at least {classes} samples for {classes} classes")

    w = np.zeros((x.shape[1], classes), dtype=nn.DTYPE)
    b = np.zeros(classes, dtype=nn.DTYPE)
    onehot = np.zeros((n, classes), dtype=nn.DTYPE)
    onehot[np.arange(n), y] = 1.0

    def loss_grad(w, b):
        logp = nn.log_softmax(x @ w + b)
        loss = -(logp[np.arange(n), y]).mean() + 0.5 * l2 * float((w * w).sum())
        g = (np.exp(logp) - onehot) / n
        return loss, x.T @ g + l2 * w, g.sum(axis=0)

    lr = 1.0
    loss, dw, db = loss_grad(w, b)
    for _ in range(max_iter):
        gnorm = np.sqrt((dw * dw).sum() + (db * db).sum())
        if gnorm < tol:
            break
        w_new = w - lr * dw
        b_new = b - lr * db
        loss_new, dw_new, db_new = loss_grad(w_new, b_new)
        if np.isfinite(loss_new) and loss_new <= loss:
            w, b, loss, dw, db = w_new, b_new, loss_new, dw_new, db_new
            lr *= 1.1
        else:
            lr *= 0.5
    return ProbeWeights(w=w, b=b)


def probe_eval(weights: ProbeWeights, features: np.ndarray, labels: np.ndarray) -> float:
    x = np.asarray(features, dtype=nn.DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise DataError("probe: empty evaluation set")
    pred = np.argmax(x @ weights.w + weights.b, axis=1)
    return float((pred == y).mean())
