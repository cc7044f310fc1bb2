"""Small differentiable face-embedding stand-ins and cosine similarity.

Weights come from Philox4x64-10 keyed by ``(seed, 0)`` with the counter
starting at zero. Each raw 64-bit output ``r`` becomes a double
``u = (r >> 11) * 2**-53`` in [0, 1) and then a weight
``(2u - 1) * sqrt(3) / sqrt(fan_in)`` (unit-variance uniform scaled by
``1/sqrt(fan_in)``). Tensors are drawn in layer order, each in C order.

The CNN maps inputs to [-1, 1] first and subtracts a fixed feature offset
after the dense head: the mean output over a seeded calibration set of
smooth textures. Without it every input shares one dominant direction
(pooled ReLU features are all non-negative) and cosine similarity between
unrelated images sits near 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import smooth_texture

INPUT_SHAPE = (112, 112, 3)
CNN_CHANNELS = (8, 16, 32, 64)
CALIBRATION_SIZE = 32
KINDS = ("toy_cnn", "linear")

_MAGIC = b"ADVE"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "toy_cnn"
    seed: int = 1
    dim: int = 64
    input_shape: tuple[int, int, int] = INPUT_SHAPE


def philox(seed: int, salt: int = 0) -> np.random.Philox:
    return np.random.Philox(key=np.array([seed, salt], dtype=np.uint64), counter=0)


def uniform_stream(seed: int, n: int) -> np.ndarray:
    """``n`` doubles in [0, 1) from the documented Philox stream for ``seed``."""
    bitgen = philox(seed)
    raw = bitgen.random_raw(n)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def _scaled(u: np.ndarray, fan_in: int) -> np.ndarray:
    return (2.0 * u - 1.0) * np.sqrt(3.0) / np.sqrt(fan_in)


class Embedder:
    """Deterministic image -> embedding map with an input VJP.

    Subclasses implement :meth:`forward` on a batch ``(N, H, W, C)`` returning
    the embeddings ``(N, D)`` and a pullback taking ``(N, D)`` cotangents.
    """

    config: EmbedderConfig

    @property
    def label(self) -> str:
        return f"{self.config.kind}:{self.config.seed}"

    def forward(self, batch: np.ndarray):
        raise NotImplementedError

    def _check(self, batch):
        if batch.shape[1:] != self.config.input_shape:
            raise ValueError(f"expected images of shape {self.config.input_shape}, got {batch.shape[1:]}")

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(img, dtype=np.float64)[None])[0][0]

    def vjp(self, img: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        _, pullback = self.forward(np.asarray(img, dtype=np.float64)[None])
        return pullback(np.asarray(cotangent)[None])[0]

    def weights(self) -> list[np.ndarray]:
        raise NotImplementedError


class LinearEmbedder(Embedder):
    def __init__(self, config: EmbedderConfig):
        self.config = config
        fan_in = int(np.prod(config.input_shape))
        self.W = _scaled(uniform_stream(config.seed, config.dim * fan_in), fan_in).reshape(config.dim, fan_in)

    def forward(self, batch):
        self._check(batch)
        n = batch.shape[0]
        out = batch.reshape(n, -1) @ self.W.T

        def pullback(cot):
            return (cot @ self.W).reshape(batch.shape)

        return out, pullback

    def weights(self):
        return [self.W]


def _conv_s2(x: np.ndarray, k: np.ndarray):
    """3x3 stride-2 convolution with zero padding 1; ``k`` is (Cin, 3, 3, Cout)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho, wo = (x.shape[1] + 1) // 2, (x.shape[2] + 1) // 2
    patches = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2][:, :ho, :wo]
    return np.tensordot(patches, k, axes=([3, 4, 5], [0, 1, 2]))


def _conv_s2_vjp(x_shape, k: np.ndarray, dout: np.ndarray) -> np.ndarray:
    n, h, w, cin = x_shape
    ho, wo = dout.shape[1], dout.shape[2]
    dpatch = np.tensordot(dout, k, axes=([3], [3]))  # (N, Ho, Wo, Cin, 3, 3)
    dxp = np.zeros((n, h + 2, w + 2, cin))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + 2 * ho:2, j:j + 2 * wo:2, :] += dpatch[..., i, j]
    return dxp[:, 1:h + 1, 1:w + 1, :]


class ToyCNN(Embedder):
    """Four stride-2 3x3 conv + ReLU blocks, global average pool, dense head."""

    def __init__(self, config: EmbedderConfig):
        self.config = config
        cin = config.input_shape[2]
        sizes = []
        for cout in CNN_CHANNELS:
            sizes.append(((cin, 3, 3, cout), cin * 9))
            cin = cout
        sizes.append(((config.dim, cin), cin))
        total = sum(int(np.prod(s)) for s, _ in sizes)
        stream = uniform_stream(config.seed, total)
        self.kernels = []
        pos = 0
        for shape, fan_in in sizes:
            n = int(np.prod(shape))
            self.kernels.append(_scaled(stream[pos:pos + n], fan_in).reshape(shape))
            pos += n
        self.dense = self.kernels.pop()
        self.offset = np.zeros(config.dim)
        rng = np.random.Generator(philox(config.seed, 4))
        size = config.input_shape[0]
        calib = np.stack([smooth_texture(rng, size) for _ in range(CALIBRATION_SIZE)])
        self.offset = self.forward(calib)[0].mean(axis=0)

    def forward(self, batch):
        self._check(batch)
        acts = []
        h = 2.0 * batch - 1.0
        for k in self.kernels:
            acts.append(h)
            pre = _conv_s2(h, k)
            h = np.maximum(pre, 0.0)
            acts.append(pre)
        pooled = h.mean(axis=(1, 2))
        out = pooled @ self.dense.T - self.offset
        last_shape = h.shape

        def pullback(cot):
            g = cot @ self.dense
            g = np.broadcast_to(g[:, None, None, :] / (last_shape[1] * last_shape[2]), last_shape)
            for li in range(len(self.kernels) - 1, -1, -1):
                x_in, pre = acts[2 * li], acts[2 * li + 1]
                g = np.where(pre > 0.0, g, 0.0)
                g = _conv_s2_vjp(x_in.shape, self.kernels[li], g)
            return 2.0 * g

        return out, pullback

    def preactivations(self, batch) -> list[np.ndarray]:
        """Inputs to each rectifier, for locating kinks."""
        out = []
        h = 2.0 * batch - 1.0
        for k in self.kernels:
            out.append(_conv_s2(h, k))
            h = np.maximum(out[-1], 0.0)
        return out

    def weights(self):
        return [*self.kernels, self.dense, self.offset]


def init_embedder(cfg: EmbedderConfig) -> Embedder:
    if cfg.kind == "toy_cnn":
        return ToyCNN(cfg)
    if cfg.kind == "linear":
        return LinearEmbedder(cfg)
    raise ValueError(f"unknown embedder kind {cfg.kind!r}; expected one of {KINDS}")


def embed(e: Embedder, img: np.ndarray) -> np.ndarray:
    return e(img)


def embed_vjp(e: Embedder, img: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    return e.vjp(img, cotangent)


def _norm(u: np.ndarray) -> float:
    n = float(np.sqrt(np.dot(u, u)))
    if n == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return n


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v) / (_norm(u) * _norm(v)))


def cosine_sim_grad(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gradient of ``cosine_sim(u, v)`` with respect to ``u``."""
    nu, nv = _norm(u), _norm(v)
    return v / (nu * nv) - np.dot(u, v) * u / (nu ** 3 * nv)


def dump_weights(e: Embedder, path) -> None:
    """Header ``<4sIII`` (magic, kind index, seed, dim) then little-endian doubles."""
    cfg = e.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, KINDS.index(cfg.kind), cfg.seed, cfg.dim))
        for w in e.weights():
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_weights(path) -> tuple[EmbedderConfig, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise ValueError("weight file shorter than its header")
    magic, kind, seed, dim = _HEADER.unpack_from(buf)
    if magic != _MAGIC or kind >= len(KINDS):
        raise ValueError("not an embedder weight dump")
    flat = np.frombuffer(buf[_HEADER.size:], dtype="<f8").astype(np.float64)
    return EmbedderConfig(KINDS[kind], seed, dim), flat
