"""Speech encoder, text encoder, shared encoder and character layer.

Parameters live in one flat ``name -> Tensor`` dict so that a model can be
rebuilt around substituted tensors (gradient checks, checkpoint loading).

Hidden-state layer numbering: index 0 is the embedded input after masking
and the convolutional positional layer, indices 1..P are the private
encoder blocks, P+1..P+S the shared blocks.

Checkpoint file: the line ``JSCKPT``, one line of JSON (sorted keys) with
``version``, ``config``, ``meta`` and an ordered ``tensors`` list of
``{"name", "shape"}``, then the float64 little-endian values of every tensor
in that order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from . import compute as C
from .compute import Tensor
from .losses import HubertHead, LinearHead
from .masking import apply_mask

SPEECH, TEXT = "speech", "text"


@dataclass(frozen=True)
class ModelConfig:
    model_dim: int = 32  # 768 at full scale
    inner_dim: int = 64  # 3072
    heads: int = 4  # 8
    layers_speech: int = 2  # 6
    layers_text: int = 2  # 6
    layers_shared: int = 2  # 6
    layers_char: int = 1  # 1
    conv_pos_kernel: int = 8  # 128
    conv_pos_groups: int = 4  # 16
    conv_pos_text: bool = True
    use_conv_pos: bool = True
    use_rel_bias: bool = True
    rel_bias_buckets: int = 32
    rel_max_distance: int = 128
    speech_feature_dim: int = 39
    phoneme_vocab: int = 16
    char_vocab: int = 29  # includes the CTC blank at index 0
    codeword_count: int = 16
    codeword_dim: int = 16
    temperature: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.model_dim % self.conv_pos_groups:
            raise ValueError(f"conv_pos_groups {self.conv_pos_groups} does not divide model_dim {self.model_dim}")
        for f in ("layers_speech", "layers_text", "layers_shared", "layers_char"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        if self.rel_bias_buckets < 2:
            raise ValueError("rel_bias_buckets must be >= 2")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------ rel. buckets


def relative_bucket_bias(query_pos: int, key_pos: int, buckets: int, max_distance: int) -> int:
    """Bucket index of the offset ``key_pos - query_pos``.

    The lower half of the buckets holds non-positive offsets, the upper half
    positive ones. Inside a half, small magnitudes get exact buckets and
    larger ones log-spaced buckets up to ``max_distance``.
    """
    return int(relative_bucket_matrix_from_offsets(np.array([key_pos - query_pos]), buckets, max_distance)[0])


def relative_bucket_matrix_from_offsets(offsets: np.ndarray, buckets: int, max_distance: int) -> np.ndarray:
    if buckets < 2:
        raise ValueError("buckets must be >= 2")
    half = buckets // 2
    base = np.where(offsets > 0, half, 0)
    n = np.abs(offsets)
    max_exact = half // 2
    if max_exact < 1 or max_distance <= max_exact:
        return base + np.minimum(n, half - 1)
    with np.errstate(divide="ignore"):
        logv = np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact)
    large = max_exact + (logv * (half - max_exact)).astype(np.int64)
    mag = np.where(n < max_exact, n, np.minimum(large, half - 1))
    return base + mag


@lru_cache(maxsize=256)
def relative_bucket_matrix(length: int, buckets: int, max_distance: int) -> np.ndarray:
    pos = np.arange(length)
    out = relative_bucket_matrix_from_offsets(pos[None, :] - pos[:, None], buckets, max_distance)
    out.setflags(write=False)
    return out


# ------------------------------------------------------------------ layers


def linear(x: Tensor, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    return C.add(C.matmul(x, P[prefix + ".w"]), P[prefix + ".b"])


def layer_norm(x: Tensor, P: Mapping[str, Tensor], prefix: str) -> Tensor:
    return C.layernorm(x, P[prefix + ".g"], P[prefix + ".b"])


def self_attention(x: Tensor, P: Mapping[str, Tensor], prefix: str, heads: int, bias: Tensor | None):
    """Multi-head self-attention; returns (output [T, d], weights [H, T, T])."""
    T, d = x.shape
    dh = d // heads
    qkv = linear(x, P, prefix + ".qkv")  # [T, 3d]
    qkv = C.transpose(C.reshape(qkv, (T, 3, heads, dh)), (1, 2, 0, 3))  # [3, H, T, dh]
    q, k, v = C.getitem(qkv, 0), C.getitem(qkv, 1), C.getitem(qkv, 2)
    scores = C.div(C.matmul(q, C.transpose(k, (0, 2, 1))), math.sqrt(dh))
    if bias is not None:
        scores = C.add(scores, bias)
    weights = C.softmax(scores, axis=-1)
    ctx = C.reshape(C.transpose(C.matmul(weights, v), (1, 0, 2)), (T, d))
    return linear(ctx, P, prefix + ".out"), weights


def transformer_block(x: Tensor, P: Mapping[str, Tensor], prefix: str, heads: int, bias: Tensor | None) -> Tensor:
    """Pre-norm block: x + attn(LN(x)), then + FFN(LN(.)) with GELU."""
    attn, _ = self_attention(layer_norm(x, P, prefix + ".ln1"), P, prefix + ".attn", heads, bias)
    h = C.add(x, attn)
    ff = linear(C.gelu(linear(layer_norm(h, P, prefix + ".ln2"), P, prefix + ".ff1")), P, prefix + ".ff2")
    return C.add(h, ff)


def grouped_conv1d(x: Tensor, weight: Tensor, bias: Tensor, groups: int) -> Tensor:
    """Same-padded grouped 1-D convolution over time.

    x: [T, C]; weight: [groups, K * C/groups, C/groups]; output [T, C].
    Left padding is K // 2, right padding K - 1 - K // 2.
    """
    T, Cdim = x.shape
    cg = Cdim // groups
    K = weight.shape[1] // cg
    left, right = K // 2, K - 1 - K // 2
    padded = C.concat([Tensor(np.zeros((left, Cdim))), x, Tensor(np.zeros((right, Cdim)))], axis=0)
    idx = np.arange(T)[:, None] + np.arange(K)[None, :]
    windows = C.getitem(padded, idx)  # [T, K, C]
    windows = C.reshape(windows, (T, K, groups, cg))
    windows = C.reshape(C.transpose(windows, (2, 0, 1, 3)), (groups, T, K * cg))
    out = C.matmul(windows, weight)  # [G, T, cg]
    out = C.reshape(C.transpose(out, (1, 0, 2)), (T, Cdim))
    return C.add(out, bias)


def conv_positional_embed(x: Tensor, P: Mapping[str, Tensor], prefix: str, groups: int) -> Tensor:
    return C.add(x, C.gelu(grouped_conv1d(x, P[prefix + ".w"], P[prefix + ".b"], groups)))


# ------------------------------------------------------------------- model


@dataclass
class HiddenStates:
    tensors: list[Tensor]
    modality: str
    private_layers: int
    mask_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def per_layer(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors]

    @property
    def frames(self) -> int:
        return self.tensors[0].shape[0]

    @property
    def private_out(self) -> Tensor:
        return self.tensors[self.private_layers]

    @property
    def last(self) -> Tensor:
        return self.tensors[-1]


def _param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) in a fixed order; init in {normal:<std>, zeros, ones}."""
    d, inner, H = cfg.model_dim, cfg.inner_dim, cfg.heads
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def lin(prefix, n_in, n_out, scale=1.0):
        specs.append((prefix + ".w", (n_in, n_out), f"normal:{scale / math.sqrt(n_in)}"))
        specs.append((prefix + ".b", (n_out,), "zeros"))

    def ln(prefix, n):
        specs.append((prefix + ".g", (n,), "ones"))
        specs.append((prefix + ".b", (n,), "zeros"))

    def stack(prefix, n_layers):
        total = max(1, cfg.layers_speech + cfg.layers_shared)
        if cfg.use_rel_bias:
            specs.append((prefix + ".rel_bias", (cfg.rel_bias_buckets, H), "normal:0.02"))
        for i in range(n_layers):
            b = f"{prefix}.block{i}"
            ln(b + ".ln1", d)
            lin(b + ".attn.qkv", d, 3 * d)
            lin(b + ".attn.out", d, d, 1.0 / math.sqrt(2 * total))
            ln(b + ".ln2", d)
            lin(b + ".ff1", d, inner)
            lin(b + ".ff2", inner, d, 1.0 / math.sqrt(2 * total))

    def pos_conv(prefix):
        cg = d // cfg.conv_pos_groups
        fan_in = cfg.conv_pos_kernel * cg
        specs.append((prefix + ".w", (cfg.conv_pos_groups, fan_in, cg), f"normal:{0.5 / math.sqrt(fan_in)}"))
        specs.append((prefix + ".b", (d,), "zeros"))

    ln("speech.feat_ln", cfg.speech_feature_dim)
    lin("speech.in_proj", cfg.speech_feature_dim, d)
    specs.append(("speech.mask_emb", (d,), "normal:1.0"))
    if cfg.use_conv_pos:
        pos_conv("speech.pos_conv")
    stack("speech", cfg.layers_speech)

    specs.append(("text.embed", (cfg.phoneme_vocab, d), "normal:1.0"))
    specs.append(("text.mask_emb", (d,), "normal:1.0"))
    if cfg.use_conv_pos and cfg.conv_pos_text:
        pos_conv("text.pos_conv")
    stack("text", cfg.layers_text)

    stack("shared", cfg.layers_shared)
    ln("shared.ln_out", d)

    specs.append(("hubert.proj", (d, cfg.codeword_dim), f"normal:{1.0 / math.sqrt(d)}"))
    specs.append(("hubert.codewords", (cfg.codeword_count, cfg.codeword_dim), "normal:1.0"))
    lin("mlm", d, cfg.phoneme_vocab)

    stack("char", cfg.layers_char)
    ln("char.head.ln", d)
    lin("char.head", d, cfg.char_vocab)
    return specs


def _init_value(shape, how: str, rng: np.random.Generator) -> np.ndarray:
    if how == "zeros":
        return np.zeros(shape)
    if how == "ones":
        return np.ones(shape)
    std = float(how.split(":")[1])
    return rng.normal(0.0, std, size=shape)


class Model:
    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params: dict[str, Tensor] = dict(params)
        missing = [n for n, _, _ in _param_specs(config) if n not in self.params]
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "Model":
        params = {
            name: Tensor(_init_value(shape, how, rng), requires_grad=True, name=name)
            for name, shape, how in _param_specs(config)
        }
        return cls(config, params)

    def with_params(self, replacements: Mapping[str, Tensor]) -> "Model":
        merged = dict(self.params)
        merged.update(replacements)
        return Model(self.config, merged)

    def param_names(self) -> list[str]:
        return [n for n, _, _ in _param_specs(self.config)]

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(self.params[n].size for n in self.param_names())

    # ---- heads
    @property
    def hubert_head(self) -> HubertHead:
        return HubertHead(self.params["hubert.proj"], self.params["hubert.codewords"], self.config.temperature)

    @property
    def mlm_head(self) -> LinearHead:
        return LinearHead(self.params["mlm.w"], self.params["mlm.b"])

    @property
    def char_head(self) -> LinearHead:
        return LinearHead(self.params["char.head.w"], self.params["char.head.b"])

    # ---- building blocks
    def _bias(self, prefix: str, T: int) -> Tensor | None:
        if not self.config.use_rel_bias:
            return None
        buckets = relative_bucket_matrix(T, self.config.rel_bias_buckets, self.config.rel_max_distance)
        table = self.params[prefix + ".rel_bias"]  # [buckets, H]
        return C.transpose(C.getitem(table, buckets), (2, 0, 1))

    def run_stack(self, x: Tensor, prefix: str, n_layers: int) -> list[Tensor]:
        bias = self._bias(prefix, x.shape[0]) if n_layers else None
        outs = []
        for i in range(n_layers):
            x = transformer_block(x, self.params, f"{prefix}.block{i}", self.config.heads, bias)
            outs.append(x)
        return outs

    def embed(self, inputs, modality: str, mask=None) -> Tensor:
        cfg = self.config
        if modality == SPEECH:
            feats = C.as_tensor(inputs)
            if feats.ndim != 2 or feats.shape[1] != cfg.speech_feature_dim:
                raise ValueError(f"speech features must be [T, {cfg.speech_feature_dim}], got {feats.shape}")
            x = linear(layer_norm(feats, self.params, "speech.feat_ln"), self.params, "speech.in_proj")
        elif modality == TEXT:
            ids = np.asarray(inputs, dtype=np.int64)
            if ids.ndim != 1:
                raise ValueError("text input must be a 1-D id sequence")
            if ids.size and (ids.min() < 0 or ids.max() >= cfg.phoneme_vocab):
                raise ValueError(f"phoneme id outside vocabulary of {cfg.phoneme_vocab}")
            x = C.getitem(self.params["text.embed"], ids)
        else:
            raise ValueError(f"unknown modality {modality!r}")
        if x.shape[0] == 0:
            raise ValueError("empty input")
        if mask is not None and np.asarray(mask).any():
            x = apply_mask(x, mask, self.params[f"{modality}.mask_emb"])
        use_pos = cfg.use_conv_pos and (modality == SPEECH or cfg.conv_pos_text)
        if use_pos:
            x = conv_positional_embed(x, self.params, f"{modality}.pos_conv", cfg.conv_pos_groups)
        return x

    def encode_private(self, inputs, modality: str, mask=None) -> list[Tensor]:
        x = self.embed(inputs, modality, mask)
        n = self.config.layers_speech if modality == SPEECH else self.config.layers_text
        return [x, *self.run_stack(x, modality, n)]

    def encode_shared(self, x: Tensor) -> list[Tensor]:
        return self.run_stack(x, "shared", self.config.layers_shared)

    def encode(self, inputs, modality: str, mask=None, through_shared: bool = True) -> HiddenStates:
        private = self.encode_private(inputs, modality, mask)
        layers = private + (self.encode_shared(private[-1]) if through_shared else [])
        positions = np.flatnonzero(np.asarray(mask, dtype=bool)) if mask is not None else np.zeros(0, dtype=np.int64)
        return HiddenStates(layers, modality, len(private) - 1, positions)

    def encode_speech(self, features, mask=None) -> HiddenStates:
        return self.encode(features, SPEECH, mask)

    def encode_text(self, ids, mask=None) -> HiddenStates:
        return self.encode(ids, TEXT, mask)

    def final(self, h: Tensor) -> Tensor:
        return layer_norm(h, self.params, "shared.ln_out")

    def char_logits(self, h_shared: Tensor, use_char_layer: bool = True) -> Tensor:
        """Character logits [T, char_vocab] from the raw shared output."""
        x = h_shared
        if use_char_layer and self.config.layers_char > 0:
            x = self.run_stack(x, "char", self.config.layers_char)[-1]
        return self.char_head(layer_norm(x, self.params, "char.head.ln"))


def char_layer(model: Model, h_shared: Tensor, enabled: bool = True) -> Tensor:
    return model.char_logits(h_shared, enabled)


# -------------------------------------------------------------- checkpoint

_MAGIC = b"JSCKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: Model, meta: Mapping | None = None, extra: Mapping[str, np.ndarray] | None = None) -> None:
    names = model.param_names()
    arrays = [(n, model.params[n].data) for n in names]
    arrays += sorted((f"extra:{k}", np.asarray(v, dtype=np.float64)) for k, v in (extra or {}).items())
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "meta": dict(meta or {}),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Model, dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    nl = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC) : nl])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = nl + 1
    params, extra = {}, {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
        if spec["name"].startswith("extra:"):
            extra[spec["name"][6:]] = a
        else:
            params[spec["name"]] = Tensor(a, requires_grad=True, name=spec["name"])
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return Model(ModelConfig.from_dict(header["config"]), params), header["meta"], extra

