"""MLP classifier plus the class-conditioned latent stability module.

Parameters live in an ordered ``dict`` of float64 arrays. The forward
functions take a :class:`~safer_lab.diffcore.Graph` and a mapping from
parameter name to graph node, so the same code serves training (leaves
with ``requires_grad``) and evaluation (constant leaves).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Graph, ShapeError
from .rng import stream

LOGVAR_BOUND = 10.0


@dataclass
class ModelSpec:
    layer_sizes: tuple[int, ...]  # input width, then hidden widths; last is feature width d_f
    n_classes: int
    latent_dim: int
    encoder_hidden: tuple[int, ...] = (32,)
    decoder_hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(w) for w in self.layer_sizes)
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)
        self.decoder_hidden = tuple(int(w) for w in self.decoder_hidden)
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs an input width and at least one layer")
        widths = self.layer_sizes + self.encoder_hidden + self.decoder_hidden
        if min(widths) < 1 or self.n_classes < 1 or self.latent_dim < 1:
            raise ValueError("all widths must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be tanh or relu, got {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[-1]

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in serialization order."""
        out = []

        def affine(prefix, fan_in, fan_out):
            out.append((f"{prefix}.W", (fan_in, fan_out)))
            out.append((f"{prefix}.b", (fan_out,)))

        sizes = self.layer_sizes
        for i in range(len(sizes) - 1):
            affine(f"extractor.{i}", sizes[i], sizes[i + 1])
        affine("head", self.feature_dim, self.n_classes)
        width = self.feature_dim + self.n_classes
        for i, h in enumerate(self.encoder_hidden):
            affine(f"encoder.{i}", width, h)
            width = h
        affine("encoder.mu", width, self.latent_dim)
        affine("encoder.logvar", width, self.latent_dim)
        width = self.latent_dim
        for i, h in enumerate(self.decoder_hidden):
            affine(f"decoder.{i}", width, h)
            width = h
        affine("decoder.out", width, self.feature_dim)
        return out


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    seed: int = 0

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in self.spec.layout()])

    def load_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for name, shape in self.spec.layout():
            n = int(np.prod(shape))
            self.params[name] = vec[i : i + n].reshape(shape).copy()
            i += n
        if i != vec.size:
            raise ValueError(f"expected {i} values, got {vec.size}")

    def to_json(self) -> str:
        spec = {
            "layer_sizes": list(self.spec.layer_sizes),
            "n_classes": self.spec.n_classes,
            "latent_dim": self.spec.latent_dim,
            "encoder_hidden": list(self.spec.encoder_hidden),
            "decoder_hidden": list(self.spec.decoder_hidden),
            "activation": self.spec.activation,
        }
        names = [n for n, _ in self.spec.layout()]
        return json.dumps({"spec": spec, "seed": self.seed, "names": names, "values": self.flat().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Model":
        obj = json.loads(text)
        spec = ModelSpec(**obj["spec"])
        m = cls(spec, {}, obj["seed"])
        m.load_flat(obj["values"])
        return m


def init_model(
    layer_sizes,
    n_classes: int,
    latent_dim: int,
    seed: int = 0,
    *,
    encoder_hidden=(32,),
    decoder_hidden=(32,),
    activation: str = "tanh",
    rng: np.random.Generator | None = None,
) -> Model:
    """Glorot-uniform weights, zero biases; deterministic given ``seed``."""
    spec = ModelSpec(tuple(layer_sizes), n_classes, latent_dim, tuple(encoder_hidden), tuple(decoder_hidden), activation)
    rng = rng if rng is not None else stream(seed, "init")
    params: dict[str, np.ndarray] = {}
    for name, shape in spec.layout():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec, params, seed)


def bind(g: Graph, model: Model, trainable: bool = True) -> dict[str, int]:
    """Register every parameter as a leaf of ``g``."""
    return {n: g.leaf(model.params[n], requires_grad=trainable) for n, _ in model.spec.layout()}


def _affine(g: Graph, p: dict[str, int], prefix: str, x: int) -> int:
    return g.add(g.matmul(x, p[f"{prefix}.W"]), p[f"{prefix}.b"])


def _act(g: Graph, spec: ModelSpec, x: int) -> int:
    return g.tanh(x) if spec.activation == "tanh" else g.relu(x)


def extract(g: Graph, spec: ModelSpec, p: dict[str, int], x: int) -> int:
    h = x
    for i in range(len(spec.layer_sizes) - 1):
        h = _act(g, spec, _affine(g, p, f"extractor.{i}", h))
    return h


def head(g: Graph, p: dict[str, int], features: int) -> int:
    return _affine(g, p, "head", features)


@dataclass
class StabilityOut:
    mu: int
    logvar: int
    sigma: int
    z: int
    x_hat: int
    x_prime: int
    graph: Graph = field(repr=False)

    def values(self) -> dict[str, np.ndarray]:
        return {k: self.graph.value(getattr(self, k)) for k in ("mu", "logvar", "sigma", "z", "x_hat", "x_prime")}


def stability(g: Graph, spec: ModelSpec, p: dict[str, int], features: int, labels, eps) -> StabilityOut:
    """Encode (feature, class) to a Gaussian, sample with fixed noise, decode, average."""
    labels = np.asarray(labels)
    n = g.value(features).shape[0]
    if labels.shape != (n,):
        raise ShapeError("stability", [g.value(features).shape, labels.shape], "one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.n_classes):
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n, spec.latent_dim):
        raise ShapeError("stability", [eps.shape, (n, spec.latent_dim)], "noise shape")
    onehot = np.zeros((n, spec.n_classes))
    onehot[np.arange(n), labels] = 1.0
    h = g.concat([features, g.constant(onehot)], axis=1)
    for i in range(len(spec.encoder_hidden)):
        h = g.tanh(_affine(g, p, f"encoder.{i}", h))
    mu = _affine(g, p, "encoder.mu", h)
    raw = _affine(g, p, "encoder.logvar", h)
    # smooth clamp to (-LOGVAR_BOUND, LOGVAR_BOUND)
    logvar = g.scale(g.tanh(g.scale(raw, 1.0 / LOGVAR_BOUND)), LOGVAR_BOUND)
    sigma = g.exp(g.scale(logvar, 0.5))
    z = g.add(mu, g.mul(sigma, g.constant(eps)))
    d = z
    for i in range(len(spec.decoder_hidden)):
        d = g.tanh(_affine(g, p, f"decoder.{i}", d))
    x_hat = _affine(g, p, "decoder.out", d)
    x_prime = g.scale(g.add(features, x_hat), 0.5)
    return StabilityOut(mu, logvar, sigma, z, x_hat, x_prime, g)


def forward_classify(model: Model, x) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic evaluation path: (features, logits). Never touches the stability module."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.spec.layer_sizes[0]:
        raise ShapeError("forward_classify", [x.shape], f"expected width {model.spec.layer_sizes[0]}")
    g = Graph()
    p = bind(g, model, trainable=False)
    f = extract(g, model.spec, p, g.constant(x))
    logits = head(g, p, f)
    return g.value(f).copy(), g.value(logits).copy()


def stability_forward(model: Model, features, labels, eps) -> dict[str, np.ndarray]:
    """Numeric (mu, sigma, z, x_hat, x_prime) for given features, labels and noise."""
    g = Graph()
    p = bind(g, model, trainable=False)
    out = stability(g, model.spec, p, g.constant(np.atleast_2d(features)), labels, eps)
    return {k: v.copy() for k, v in out.values().items()}


def forward_stabilized(model: Model, x) -> np.ndarray:
    """Alternative inference path: logits of x' with noise zero.

    Test-time labels are unknown, so the encoder is conditioned on the plain
    path's predicted class.
    """
    feats, logits = forward_classify(model, x)
    pred = np.argmax(logits, axis=1)
    g = Graph()
    p = bind(g, model, trainable=False)
    out = stability(g, model.spec, p, g.constant(feats), pred, np.zeros((feats.shape[0], model.spec.latent_dim)))
    return g.value(head(g, p, out.x_prime)).copy()
