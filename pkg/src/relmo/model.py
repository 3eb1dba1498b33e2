"""The multi-person prediction network.

Every person is represented as ``C = 3J`` tokens (one per joint coordinate)
of width ``D``. Persons are stacked along a leading batch axis so one pass
handles the whole scene:

    velocities -> encoder -> { inter-relation (cross-attention between persons),
                               intra-relation (GC-blocks on the C channels) }
               -> projection of the intra stream -> aggregation layers -> decoder

Parameters live in a flat name -> Tensor mapping (:class:`ModelParams`) so the
checkpoint format and the optimizer stay trivial.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .data import Scene, velocity_augment
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "CheckpointError",
    "init_params",
    "encode",
    "mean_pair_distance",
    "alpha_weight",
    "cross_attention_block",
    "inter_relation",
    "gc_block",
    "intra_relation",
    "skip_pairs",
    "project_intra",
    "positional_encoding",
    "aggregate_attention",
    "iam_layer",
    "iam_forward",
    "decode",
    "forward",
    "forward_batch",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    J: int = 15
    T: int = 15
    P: int = 15
    N: int = 2
    D: int = 64
    L1: int = 4
    L2: int = 13
    L3: int = 4
    H: int = 8
    dropout: float = 0.1
    # ablation switches
    no_velocity_input: bool = False
    no_intra: bool = False
    no_inter: bool = False
    no_iam: bool = False

    def __post_init__(self):
        for name in ("J", "T", "P", "N", "D", "L1", "L2", "L3", "H"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.J < 2 or self.T < 2:
            raise ValueError("need J >= 2 and T >= 2")
        if self.D % self.H:
            raise ValueError(f"D={self.D} is not divisible by H={self.H}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def C(self) -> int:
        return 3 * self.J

    @classmethod
    def toy(cls, **overrides) -> ModelConfig:
        """The small configuration used for gradient checks and overfitting."""
        base = dict(N=2, J=3, T=4, P=2, D=8, H=2, L1=1, L2=2, L3=1, dropout=0.0)
        base.update(overrides)
        return cls(**base)

    def check_scene(self, scene: Scene) -> None:
        want = (self.N, self.T, self.P, self.J)
        if scene.dims != want:
            raise ValueError(f"scene dims (N, T, P, J)={scene.dims} do not match model config {want}")


class ModelParams:
    """Named trainable tensors plus non-trainable buffers (batch-norm stats)."""

    def __init__(self, tensors: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.tensors = tensors
        self.buffers = buffers

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named_parameters(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


# ---------------------------------------------------------------------------
# initialisation


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = tc.make_rng(seed)
    c, d = config.C, config.D
    tensors: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def linear(prefix, fan_in, fan_out):
        tensors[f"{prefix}.weight"] = tc.glorot_uniform(rng, fan_in, fan_out)
        tensors[f"{prefix}.bias"] = np.zeros(fan_out)

    def attention(prefix):
        for part in ("q", "k", "v", "o"):
            linear(f"{prefix}.{part}", d, d)

    def norm(prefix, width):
        tensors[f"{prefix}.gain"] = np.ones(width)
        tensors[f"{prefix}.bias"] = np.zeros(width)

    linear("encoder.fc0", config.T, d)
    linear("encoder.fc1", d, d)
    linear("encoder.fc2", d, d)

    tensors["inter.decay"] = np.array(0.0)
    for l in range(config.L1):
        attention(f"inter.block{l}")

    for l in range(config.L2):
        p = f"intra.gc{l}"
        tensors[f"{p}.adj"] = tc.glorot_uniform(rng, c, c)
        tensors[f"{p}.weight"] = tc.glorot_uniform(rng, d, d)
        norm(f"{p}.bn", c)
        buffers[f"{p}.bn.running_mean"] = np.zeros(c)
        buffers[f"{p}.bn.running_var"] = np.ones(c)

    tensors["proj.w1.weight"] = tc.glorot_uniform(rng, d, d)
    tensors["proj.w2.weight"] = tc.glorot_uniform(rng, c, c)
    tensors["proj.w3.weight"] = tc.glorot_uniform(rng, c, c)

    for l in range(config.L3):
        p = f"iam.layer{l}"
        attention(f"{p}.fuse")
        norm(f"{p}.ln_fuse", d)
        linear(f"{p}.gu.fc0", d, d)
        linear(f"{p}.gu.fc1", d, d)
        attention(f"{p}.lu.attn")
        norm(f"{p}.lu.ln1", d)
        linear(f"{p}.lu.ffn.fc0", d, d)
        linear(f"{p}.lu.ffn.fc1", d, d)
        norm(f"{p}.lu.ln2", d)

    # zero decoder: training starts from the constant-pose prediction
    tensors["decoder.weight"] = np.zeros((2 * d, config.P))
    tensors["decoder.bias"] = np.zeros(config.P)

    return ModelParams(
        {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()},
        buffers,
    )


# ---------------------------------------------------------------------------
# building blocks


def _linear(x, params: ModelParams, prefix: str) -> Tensor:
    return tc.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def _mlp2(x, params, prefix, dropout, training, rng) -> Tensor:
    h = tc.gelu(_linear(x, params, f"{prefix}.fc0"))
    h = tc.dropout(h, dropout, rng, training)
    return _linear(h, params, f"{prefix}.fc1")


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        return tc.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return tc.reshape(x, x.shape[1:]) if squeeze else x


def _heads_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over tokens, split into ``heads`` heads.

    Inputs are already projected, shape ``(B, C, D)``; output has the same shape.
    """
    b, c, d = q.shape
    dh = d // heads

    def split(t):
        return tc.transpose(tc.reshape(t, (b, c, heads, dh)), (0, 2, 1, 3))

    scores = tc.scale(tc.matmul(split(q), tc.transpose(split(k), (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = tc.softmax(scores, axis=-1)
    out = tc.matmul(probs, split(v))
    return tc.reshape(tc.transpose(out, (0, 2, 1, 3)), (b, c, d))


def encode(x, params: ModelParams, config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """``(N, T, J, 3)`` (or one person's ``(T, J, 3)``) -> ``(N, C, D)`` / ``(C, D)``.

    Each coordinate channel's temporal profile is mapped from T to D by a
    three-layer MLP.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 3
    if single:
        x = tc.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (config.T, config.J, 3):
        raise ValueError(f"encoder expects (N, {config.T}, {config.J}, 3), got {x.shape}")
    n = x.shape[0]
    h = tc.transpose(tc.reshape(x, (n, config.T, config.C)), (0, 2, 1))
    h = tc.gelu(_linear(h, params, "encoder.fc0"))
    h = tc.gelu(_linear(h, params, "encoder.fc1"))
    h = tc.dropout(h, config.dropout, rng, training)
    h = _linear(h, params, "encoder.fc2")
    return _unbatched(h, single)


def mean_pair_distance(xa: np.ndarray, xb: np.ndarray) -> float:
    """Mean over frames and joints of the Euclidean distance between two persons."""
    return float(np.linalg.norm(np.asarray(xa) - np.asarray(xb), axis=-1).mean())


def alpha_weight(scene: Scene, n: int, m: int, decay: float) -> float:
    """Distance-based weight of person ``m``'s influence on person ``n``."""
    if n == m:
        raise ValueError("alpha is only defined between distinct persons")
    dist = mean_pair_distance(scene.observed[n], scene.observed[m])
    return _alpha_from_distance(dist, decay)


def _alpha_from_distance(dist, decay: float):
    s = 1.0 / (1.0 + math.exp(-decay)) if decay >= 0 else math.exp(decay) / (1.0 + math.exp(decay))
    return 1.0 / (s * np.asarray(dist) + 1.0)


def cross_attention_block(q_tokens, kv_tokens, params: ModelParams, prefix: str, heads: int) -> Tensor:
    """Multi-head attention of ``q_tokens`` over ``kv_tokens`` plus a residual."""
    q_tokens, squeeze = _batched(q_tokens)
    kv_tokens, _ = _batched(kv_tokens)
    if q_tokens.shape != kv_tokens.shape:
        raise tc.DimensionError(f"cross-attention inputs differ: {q_tokens.shape} vs {kv_tokens.shape}")
    att = _heads_attention(
        _linear(q_tokens, params, f"{prefix}.q"),
        _linear(kv_tokens, params, f"{prefix}.k"),
        _linear(kv_tokens, params, f"{prefix}.v"),
        heads,
    )
    out = _linear(att, params, f"{prefix}.o") + q_tokens
    return _unbatched(out, squeeze)


def inter_relation(scenes, features: Tensor, params: ModelParams, config: ModelConfig, alpha=None) -> Tensor:
    """``(S*N, C, D) -> (S*N, C, D)``: distance-weighted sum of chained cross-attention.

    ``scenes`` is one scene or a list of scenes whose persons are stacked
    (scene-major) along the first axis of ``features``. For every ordered pair
    ``(n, m)`` of distinct persons in the same scene the query stream starts at
    person ``n`` and is refined by ``L1`` blocks that all attend to person
    ``m``. ``alpha`` may override the learned weights with an ``(N, N)`` array
    (or ``(S, N, N)``).
    """
    scenes = [scenes] if isinstance(scenes, Scene) else list(scenes)
    n = scenes[0].N
    total = features.shape[0]
    if total != n * len(scenes):
        raise tc.DimensionError(f"{total} feature rows for {len(scenes)} scenes of {n} persons")
    if n == 1:
        return Tensor(np.zeros(features.shape))
    pairs = [(i, a, b) for i in range(len(scenes)) for a in range(n) for b in range(n) if a != b]
    src = np.array([i * n + a for i, a, _ in pairs])
    dst = np.array([i * n + b for i, _, b in pairs])
    kv = tc.take(features, dst, axis=0)
    s = tc.take(features, src, axis=0)
    for l in range(config.L1):
        s = cross_attention_block(s, kv, params, f"inter.block{l}", config.H)

    if alpha is None:
        dist = np.array([mean_pair_distance(scenes[i].observed[a], scenes[i].observed[b]) for i, a, b in pairs])
        gate = tc.sigmoid(params["inter.decay"])
        weights = tc.div(1.0, tc.mul(gate, dist) + 1.0)
    else:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (len(scenes), n, n))
        weights = Tensor(np.array([alpha[i, a, b] for i, a, b in pairs]))
    # (S*N, K) routing matrix: row r collects the pairs whose query person is r
    route = (src[None, :] == np.arange(total)[:, None]).astype(np.float64)
    mix = tc.mul(route, weights)
    flat = tc.reshape(s, (len(pairs), -1))
    return tc.reshape(tc.matmul(mix, flat), features.shape)


def gc_block(h, params: ModelParams, prefix: str, training: bool = False, dropout: float = 0.0, rng=None) -> Tensor:
    """Batch-norm, adjacency mix over channels, feature weights, tanh, dropout."""
    h, squeeze = _batched(h)
    bn = tc.batch_norm(
        h,
        params[f"{prefix}.bn.gain"],
        params[f"{prefix}.bn.bias"],
        params.buffers[f"{prefix}.bn.running_mean"],
        params.buffers[f"{prefix}.bn.running_var"],
        training,
        axis=1,
    )
    out = tc.tanh(tc.matmul(tc.matmul(params[f"{prefix}.adj"], bn), params[f"{prefix}.weight"]))
    out = tc.dropout(out, dropout, rng, training)
    return _unbatched(out, squeeze)


def skip_pairs(depth: int) -> dict[int, int]:
    """Symmetric residual topology: ``{landing block: source block}``, 1-based.

    The input of block ``l`` is added to the output of block ``depth + 1 - l``
    for ``l <= depth // 2``; with an odd depth the middle block has no skip.
    """
    return {depth + 1 - l: l for l in range(1, depth // 2 + 1)}


def intra_relation(f_en, params: ModelParams, config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    skips = skip_pairs(config.L2)
    inputs = {}
    h = f_en
    for l in range(1, config.L2 + 1):
        inputs[l] = h
        h = gc_block(h, params, f"intra.gc{l - 1}", training, config.dropout, rng)
        if l in skips:
            h = h + inputs[skips[l]]
    return h


def project_intra(f_intra, params: ModelParams) -> Tensor:
    """``sigmoid(F W1) + sigmoid((W2 F W1) * (W3 F W1))``; W2, W3 mix channels."""
    fw = tc.matmul(f_intra, params["proj.w1.weight"])
    gate = tc.mul(tc.matmul(params["proj.w2.weight"], fw), tc.matmul(params["proj.w3.weight"], fw))
    return tc.sigmoid(fw) + tc.sigmoid(gate)


def positional_encoding(tokens: int, width: int) -> np.ndarray:
    pos = np.arange(tokens, dtype=np.float64)[:, None]
    i = np.arange(0, width, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / width)
    pe = np.zeros((tokens, width))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : width // 2])
    return pe


def aggregate_attention(g_in, l_in, params: ModelParams, prefix: str, heads: int) -> Tensor:
    """Attention over the inter stream whose queries and keys are shifted by the intra stream."""
    g_in, squeeze = _batched(g_in)
    l_in, _ = _batched(l_in)
    q = _linear(g_in, params, f"{prefix}.q") + l_in
    k = _linear(g_in, params, f"{prefix}.k") + l_in
    v = _linear(g_in, params, f"{prefix}.v")
    out = _linear(_heads_attention(q, k, v, heads), params, f"{prefix}.o")
    return _unbatched(out, squeeze)


def iam_layer(g_in, l_in, params: ModelParams, prefix: str, config: ModelConfig, training: bool = False, rng=None):
    g_in, squeeze = _batched(g_in)
    l_in, _ = _batched(l_in)
    fused = aggregate_attention(g_in, l_in, params, f"{prefix}.fuse", config.H)
    normed = tc.layer_norm(fused, params[f"{prefix}.ln_fuse.gain"], params[f"{prefix}.ln_fuse.bias"])

    g_out = _mlp2(normed, params, f"{prefix}.gu", config.dropout, training, rng) + g_in

    # local update: one transformer layer, queries from the intra stream
    att = _heads_attention(
        _linear(l_in, params, f"{prefix}.lu.attn.q"),
        _linear(normed, params, f"{prefix}.lu.attn.k"),
        _linear(normed, params, f"{prefix}.lu.attn.v"),
        config.H,
    )
    t = tc.layer_norm(
        l_in + _linear(att, params, f"{prefix}.lu.attn.o"),
        params[f"{prefix}.lu.ln1.gain"],
        params[f"{prefix}.lu.ln1.bias"],
    )
    u = tc.layer_norm(
        t + _mlp2(t, params, f"{prefix}.lu.ffn", config.dropout, training, rng),
        params[f"{prefix}.lu.ln2.gain"],
        params[f"{prefix}.lu.ln2.bias"],
    )
    l_out = u + l_in
    return _unbatched(g_out, squeeze), _unbatched(l_out, squeeze)


def iam_forward(f_inter, f_intra_proj, params: ModelParams, config: ModelConfig, training: bool = False, rng=None):
    pe = positional_encoding(config.C, config.D)
    g = f_inter + pe
    l = f_intra_proj + pe
    for i in range(config.L3):
        g, l = iam_layer(g, l, params, f"iam.layer{i}", config, training, rng)
    return g, l


def decode(g_final, l_final, params: ModelParams, config: ModelConfig, last_observed) -> Tensor:
    """Concatenate both streams, map features to P frames, add the last pose."""
    g_final, squeeze = _batched(g_final)
    l_final, _ = _batched(l_final)
    n = g_final.shape[0]
    last = np.asarray(last_observed, dtype=np.float64).reshape(n, 1, config.J, 3)
    h = _linear(tc.concat([g_final, l_final], axis=-1), params, "decoder")  # (N, C, P)
    h = tc.reshape(tc.transpose(h, (0, 2, 1)), (n, config.P, config.J, 3))
    return _unbatched(h + last, squeeze)


def forward_batch(scenes, params: ModelParams, config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Predictions for several scenes at once, ``(S, N, P, J, 3)``.

    Persons of all scenes share one batch axis, so batch-norm statistics in
    training mode are pooled over the whole batch; attention between persons
    stays within each scene.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("need at least one scene")
    for scene in scenes:
        config.check_scene(scene)
    if config.no_velocity_input:
        x = np.concatenate([s.observed for s in scenes])
    else:
        x = np.concatenate([velocity_augment(s) for s in scenes])
    f_en = encode(x, params, config, training, rng)
    zeros = Tensor(np.zeros(f_en.shape))

    f_inter = zeros if config.no_inter else inter_relation(scenes, f_en, params, config)
    f_intra = zeros if config.no_intra else intra_relation(f_en, params, config, training, rng)
    f_proj = project_intra(f_intra, params)

    if config.no_iam:
        g, l = f_inter, f_proj
    else:
        g, l = iam_forward(f_inter, f_proj, params, config, training, rng)
    last = np.concatenate([s.last_observed for s in scenes])
    pred = decode(g, l, params, config, last)
    return tc.reshape(pred, (len(scenes), config.N, config.P, config.J, 3))


def forward(scene: Scene, params: ModelParams, config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Predicted future positions of one scene, ``(N, P, J, 3)``."""
    pred = forward_batch([scene], params, config, training, rng)
    return tc.reshape(pred, pred.shape[1:])


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"RMP1"
_DIMS = ("J", "T", "P", "N", "D", "L1", "L2", "L3", "H")
_FLAGS = ("no_velocity_input", "no_intra", "no_inter", "no_iam")
_CONFIG = struct.Struct("<9Id I")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """``RMP1`` | config | block count | blocks (name, shape, float64 payload).

    Buffers are stored as ordinary blocks after the trainable tensors.
    """
    flags = sum(1 << i for i, f in enumerate(_FLAGS) if getattr(config, f))
    out = [CHECKPOINT_MAGIC, _CONFIG.pack(*(getattr(config, k) for k in _DIMS), config.dropout, flags)]
    blocks = [(k, t.data) for k, t in params.tensors.items()] + [(f"buffer:{k}", v) for k, v in params.buffers.items()]
    out.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    try:
        off = 4
        *dims, dropout, flags = _CONFIG.unpack_from(blob, off)
        off += _CONFIG.size
        kw = dict(zip(_DIMS, dims))
        kw.update({f: bool(flags >> i & 1) for i, f in enumerate(_FLAGS)})
        config = ModelConfig(dropout=dropout, **kw)
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        tensors, buffers = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(blob):
                raise CheckpointError(f"checkpoint truncated inside block {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
            if name.startswith("buffer:"):
                buffers[name[len("buffer:") :]] = arr
            else:
                tensors[name] = Tensor(arr, requires_grad=True, name=name)
    except struct.error as exc:
        raise CheckpointError(f"checkpoint truncated: {exc}") from exc
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after the last block")
    expected = init_params(config, 0)
    missing = set(expected.tensors) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)[:3]}...")
    for k, t in expected.tensors.items():
        if tensors[k].shape != t.shape:
            raise CheckpointError(f"parameter {k} has shape {tensors[k].shape}, config implies {t.shape}")
    return ModelParams(tensors, buffers), config


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)


def with_persons(config: ModelConfig, n: int) -> ModelConfig:
    return replace(config, N=n)
