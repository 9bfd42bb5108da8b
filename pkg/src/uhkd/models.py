"""Tiny heterogeneous backbones, each split into exactly four tapped stages.

* CNN  - stride-2 3x3 conv blocks with ReLU, GRID taps, global-average head.
* ATTN - patch embedding + pre-norm single-head self-attention blocks, SEQ taps.
* MLP  - patch embedding + token-mixing / channel-mixing blocks, SEQ taps.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .features import Layout, Source, StageFeature
from .tensor import ShapeError, Tensor

FAMILIES = ("CNN", "ATTN", "MLP")

# fixed input standardisation for images in [0, 1]
INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass(frozen=True)
class ModelSpec:
    family: str
    stage_widths: tuple[int, int, int, int]
    num_classes: int = 10
    image_size: int = 32
    patch_size: int = 4
    convs_per_stage: int = 1
    mlp_ratio: int = 2
    token_hidden: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if len(self.stage_widths) != 4:
            raise ValueError("a model has exactly four stages")
        if self.family != "CNN" and len(set(self.stage_widths)) != 1:
            raise ValueError(f"{self.family} keeps one embedding width across stages")
        if self.family != "CNN" and self.image_size % self.patch_size:
            raise ValueError("image size must be a multiple of the patch size")
        if self.family == "CNN" and self.image_size % 16:
            raise ValueError("CNN needs an image size divisible by 16 (four stride-2 stages)")

    @property
    def layout(self) -> Layout:
        return Layout.GRID if self.family == "CNN" else Layout.SEQ

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def tap_shapes(self, batch: int) -> list[tuple[int, ...]]:
        if self.family == "CNN":
            out, side = [], self.image_size
            for w in self.stage_widths:
                side //= 2
                out.append((batch, w, side, side))
            return out
        return [(batch, self.tokens, w) for w in self.stage_widths]


PRESETS: dict[str, ModelSpec] = {
    "cnn_t": ModelSpec("CNN", (16, 32, 64, 128)),
    "cnn_s": ModelSpec("CNN", (8, 16, 32, 64)),
    "cnn_xs": ModelSpec("CNN", (8, 12, 16, 24)),
    "attn_t": ModelSpec("ATTN", (48,) * 4),
    "attn_s": ModelSpec("ATTN", (24,) * 4),
    "mlp_t": ModelSpec("MLP", (48,) * 4, token_hidden=16),
    "mlp_s": ModelSpec("MLP", (24,) * 4, token_hidden=16),
}

# six cross-family pairs plus two homogeneous CNN pairs
PAIRINGS: tuple[tuple[str, str], ...] = (
    ("attn_t", "cnn_s"),
    ("mlp_t", "cnn_s"),
    ("cnn_t", "attn_s"),
    ("cnn_t", "mlp_s"),
    ("attn_t", "mlp_s"),
    ("mlp_t", "attn_s"),
    ("cnn_t", "cnn_s"),
    ("cnn_t", "cnn_xs"),
)


def resolve_spec(name_or_spec, image_size: int | None = None, num_classes: int | None = None) -> ModelSpec:
    spec = PRESETS[name_or_spec] if isinstance(name_or_spec, str) else name_or_spec
    changes = {}
    if image_size is not None:
        changes["image_size"] = int(image_size)
        if spec.family != "CNN" and int(image_size) % spec.patch_size:
            raise ValueError(f"image size {image_size} is not a multiple of patch {spec.patch_size}")
    if num_classes is not None:
        changes["num_classes"] = int(num_classes)
    return replace(spec, **changes) if changes else spec


class ParameterRegistry:
    """Ordered map from dotted parameter path to Tensor, with a trainable flag each."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, path: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(value, requires_grad=trainable)
        self._params[path] = t
        self._trainable[path] = trainable
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def keys(self):
        return self._params.keys()

    def is_trainable(self, path: str) -> bool:
        return self._trainable[path]

    def trainable_items(self):
        return [(k, v) for k, v in self._params.items() if self._trainable[k]]

    def set_trainable(self, flag: bool) -> None:
        for k, t in self._params.items():
            self._trainable[k] = flag
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def freeze(self) -> ParameterRegistry:
        self.set_trainable(False)
        return self

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state(self, state) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self._params[k].shape:
                raise ShapeError(f"{k}: expected {self._params[k].shape}, got {arr.shape}")
            self._params[k].data = arr.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
        return h.hexdigest()


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _he_uniform(rng, fan_in: int, shape) -> np.ndarray:
    # keeps ReLU activations from shrinking stage by stage
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Model:
    def __init__(self, spec: ModelSpec, seed: int = 0, source: Source = Source.STUDENT):
        self.spec = spec
        self.source = Source(source)
        self.params = ParameterRegistry()
        self._build(T.make_rng(seed, 0xB0D1))

    def _build(self, rng) -> None:
        raise NotImplementedError

    def _taps_and_pool(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        raise NotImplementedError

    def forward_with_taps(self, batch) -> tuple[Tensor, list[StageFeature]]:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (3, s.image_size, s.image_size):
            raise ShapeError(f"expected (B, 3, {s.image_size}, {s.image_size}) images, got {x.shape}")
        pooled, taps = self._taps_and_pool((x - INPUT_MEAN) * (1.0 / INPUT_STD))
        logits = T.matmul(pooled, self.params["head.w"]) + self.params["head.b"]
        feats = [StageFeature(t, s.layout, i + 1, self.source) for i, t in enumerate(taps)]
        return logits, feats

    def __call__(self, batch) -> Tensor:
        return self.forward_with_taps(batch)[0]

    def _add_head(self, rng, width: int) -> None:
        k = self.spec.num_classes
        self.params.add("head.w", _uniform(rng, width, (width, k)))
        self.params.add("head.b", np.zeros(k))


class MiniCNN(Model):
    def _build(self, rng):
        c_in = 3
        for i, w in enumerate(self.spec.stage_widths, start=1):
            for j in range(self.spec.convs_per_stage):
                cin = c_in if j == 0 else w
                self.params.add(f"stage{i}.conv{j}.w", _he_uniform(rng, cin * 9, (w, cin, 3, 3)))
                self.params.add(f"stage{i}.conv{j}.b", np.zeros(w))
            c_in = w
        self._add_head(rng, c_in)

    def _taps_and_pool(self, x):
        p = self.params
        taps = []
        for i in range(1, 5):
            for j in range(self.spec.convs_per_stage):
                stride = 2 if j == 0 else 1
                x = T.relu(T.conv2d(x, p[f"stage{i}.conv{j}.w"], p[f"stage{i}.conv{j}.b"], stride, 1))
            taps.append(x)
        return T.reduce("mean", x, (2, 3)), taps


def _patchify(x: Tensor, p: int) -> Tensor:
    b, c, h, w = x.shape
    y = T.reshape(x, (b, c, h // p, p, w // p, p))
    y = T.permute(y, (0, 2, 4, 1, 3, 5))
    return T.reshape(y, (b, (h // p) * (w // p), c * p * p))


class _TokenModel(Model):
    def _build_embed(self, rng):
        s = self.spec
        d = s.stage_widths[0]
        pdim = 3 * s.patch_size**2
        self.params.add("embed.w", _uniform(rng, pdim, (pdim, d)))
        self.params.add("embed.b", np.zeros(d))
        self.params.add("embed.pos", rng.normal(0.0, 0.02, (s.tokens, d)))

    def _ln(self, x, name):
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _add_ln(self, name, d):
        self.params.add(f"{name}.g", np.ones(d))
        self.params.add(f"{name}.b", np.zeros(d))

    def _linear(self, x, name):
        return T.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _add_linear(self, rng, name, n_in, n_out):
        self.params.add(f"{name}.w", _uniform(rng, n_in, (n_in, n_out)))
        self.params.add(f"{name}.b", np.zeros(n_out))

    def _embed(self, x):
        p = self.params
        return T.matmul(_patchify(x, self.spec.patch_size), p["embed.w"]) + p["embed.b"] + p["embed.pos"]

    def _finish(self, x, taps):
        x = self._ln(x, "final_ln")
        return T.reduce("mean", x, 1), taps


class MiniAttention(_TokenModel):
    def _build(self, rng):
        d = self.spec.stage_widths[0]
        h = d * self.spec.mlp_ratio
        self._build_embed(rng)
        for i in range(1, 5):
            self._add_ln(f"stage{i}.ln1", d)
            self._add_linear(rng, f"stage{i}.qkv", d, 3 * d)
            self._add_linear(rng, f"stage{i}.proj", d, d)
            self._add_ln(f"stage{i}.ln2", d)
            self._add_linear(rng, f"stage{i}.fc1", d, h)
            self._add_linear(rng, f"stage{i}.fc2", h, d)
        self._add_ln("final_ln", d)
        self._add_head(rng, d)

    def _taps_and_pool(self, x):
        d = self.spec.stage_widths[0]
        x = self._embed(x)
        taps = []
        scale = 1.0 / math.sqrt(d)
        for i in range(1, 5):
            qkv = self._linear(self._ln(x, f"stage{i}.ln1"), f"stage{i}.qkv")
            q = qkv[:, :, :d]
            k = qkv[:, :, d : 2 * d]
            v = qkv[:, :, 2 * d :]
            att = T.softmax(T.matmul(q, T.transpose(k, 1, 2)) * scale, axis=-1)
            x = x + self._linear(T.matmul(att, v), f"stage{i}.proj")
            hid = T.gelu(self._linear(self._ln(x, f"stage{i}.ln2"), f"stage{i}.fc1"))
            x = x + self._linear(hid, f"stage{i}.fc2")
            taps.append(x)
        return self._finish(x, taps)


class MiniMixer(_TokenModel):
    def _build(self, rng):
        s = self.spec
        d = s.stage_widths[0]
        n = s.tokens
        self._build_embed(rng)
        for i in range(1, 5):
            self._add_ln(f"stage{i}.ln1", d)
            self._add_linear(rng, f"stage{i}.tok1", n, s.token_hidden)
            self._add_linear(rng, f"stage{i}.tok2", s.token_hidden, n)
            self._add_ln(f"stage{i}.ln2", d)
            self._add_linear(rng, f"stage{i}.ch1", d, d * s.mlp_ratio)
            self._add_linear(rng, f"stage{i}.ch2", d * s.mlp_ratio, d)
        self._add_ln("final_ln", d)
        self._add_head(rng, d)

    def _taps_and_pool(self, x):
        x = self._embed(x)
        taps = []
        for i in range(1, 5):
            t = T.transpose(self._ln(x, f"stage{i}.ln1"), 1, 2)
            t = self._linear(T.gelu(self._linear(t, f"stage{i}.tok1")), f"stage{i}.tok2")
            x = x + T.transpose(t, 1, 2)
            c = T.gelu(self._linear(self._ln(x, f"stage{i}.ln2"), f"stage{i}.ch1"))
            x = x + self._linear(c, f"stage{i}.ch2")
            taps.append(x)
        return self._finish(x, taps)


_CLASSES = {"CNN": MiniCNN, "ATTN": MiniAttention, "MLP": MiniMixer}


def build_model(spec, seed: int = 0, source: Source = Source.STUDENT, **overrides) -> Model:
    spec = resolve_spec(spec, **overrides) if overrides or isinstance(spec, str) else spec
    return _CLASSES[spec.family](spec, seed=seed, source=source)


def expected_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count for a ModelSpec."""
    k = spec.num_classes
    if spec.family == "CNN":
        total, c_in = 0, 3
        for w in spec.stage_widths:
            total += (c_in * 9 * w + w) + (spec.convs_per_stage - 1) * (w * 9 * w + w)
            c_in = w
        return total + c_in * k + k
    d = spec.stage_widths[0]
    n = spec.tokens
    pdim = 3 * spec.patch_size**2
    embed = pdim * d + d + n * d
    if spec.family == "ATTN":
        h = d * spec.mlp_ratio
        block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    else:
        th, h = spec.token_hidden, d * spec.mlp_ratio
        block = 2 * d + (n * th + th) + (th * n + n) + 2 * d + (d * h + h) + (h * d + d)
    return embed + 4 * block + 2 * d + d * k + k
