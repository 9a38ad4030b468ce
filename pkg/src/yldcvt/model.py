"""Three-stage convolutional vision transformer with a scalar regression head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ROLES = ("q", "k", "v")


@dataclass(frozen=True)
class StageConfig:
    patch_kernel: int
    patch_stride: int
    patch_padding: int
    embed_dim: int
    num_heads: int
    depth: int
    mlp_ratio: float = 4.0
    q_stride: int = 1
    kv_stride: int = 2
    has_cls_token: bool = False

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.kv_stride not in (1, 2):
            raise ValueError(f"kv_stride must be 1 or 2, got {self.kv_stride}")
        if self.q_stride != 1:
            raise ValueError("query projections always use stride 1")
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ValueError("depth must be >= 0 and mlp_ratio positive")

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...]
    input_channels: int = 11
    input_height: int = 32
    input_width: int = 34
    head_hidden: int | None = None
    output_dim: int = 1
    # "layer" or "batch": normalization after the depth-wise projection conv
    proj_norm: str = "layer"
    # predictions are head_output * target_std + target_mean
    target_mean: float = 0.0
    target_std: float = 1.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if len(self.stages) != 3:
            raise ValueError(f"a CvT has exactly 3 stages, got {len(self.stages)}")
        if self.output_dim != 1:
            raise ValueError("regression head has a single output")
        if any(s.has_cls_token for s in self.stages[:-1]) or not self.stages[-1].has_cls_token:
            raise ValueError("only the final stage carries the classification token")
        if self.proj_norm not in ("layer", "batch"):
            raise ValueError(f"proj_norm must be 'layer' or 'batch', got {self.proj_norm!r}")
        if self.target_std <= 0:
            raise ValueError("target_std must be positive")

    def stage_in_channels(self, i: int) -> int:
        return self.input_channels if i == 0 else self.stages[i - 1].embed_dim

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def with_kv_stride(self, kv_stride: int) -> ModelConfig:
        return self.replace(stages=tuple(dataclasses.replace(s, kv_stride=kv_stride) for s in self.stages))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stages"] = [dataclasses.asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        return cls(**d)


def _stages(dims, heads, depths, kv_stride=2) -> tuple[StageConfig, ...]:
    patches = ((7, 4, 2), (3, 2, 1), (3, 2, 1))
    return tuple(
        StageConfig(
            patch_kernel=k,
            patch_stride=s,
            patch_padding=p,
            embed_dim=d,
            num_heads=h,
            depth=n,
            kv_stride=kv_stride,
            has_cls_token=(i == 2),
        )
        for i, ((k, s, p), d, h, n) in enumerate(zip(patches, dims, heads, depths))
    )


PRESETS = {
    "cvt13": ((64, 192, 384), (1, 3, 6), (1, 2, 10)),
    "cvt21": ((64, 192, 384), (1, 3, 6), (1, 4, 16)),
    "cvtw24": ((192, 768, 1024), (3, 12, 16), (2, 2, 20)),
    "tiny": ((16, 32, 64), (1, 2, 4), (1, 1, 2)),
}


def preset(name: str, kv_stride: int = 2, input_width: int = 34, **overrides) -> ModelConfig:
    try:
        dims, heads, depths = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(stages=_stages(dims, heads, depths, kv_stride), input_width=input_width, **overrides)


# -- token maps -----------------------------------------------------------
@dataclass
class TokenMap:
    """Tokens [N, L, D] laid out on an h x w grid, optionally led by a cls token."""

    tokens: Tensor
    h: int
    w: int
    has_cls: bool = False

    def __post_init__(self):
        expected = self.h * self.w + int(self.has_cls)
        if self.tokens.ndim != 3 or self.tokens.shape[1] != expected:
            raise ShapeError(f"token map {self.h}x{self.w} (cls={self.has_cls}) needs L={expected}, got {self.tokens.shape}")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def split(self) -> tuple[Tensor | None, Tensor]:
        if not self.has_cls:
            return None, self.tokens
        return self.tokens[:, :1], self.tokens[:, 1:]

    def to_image(self) -> Tensor:
        """Non-cls tokens as [N, D, h, w]."""
        _, spatial = self.split()
        n, _, d = spatial.shape
        return spatial.reshape(n, self.h, self.w, d).transpose(0, 3, 1, 2)

    @classmethod
    def from_image(cls, img: Tensor, cls_token: Tensor | None = None) -> TokenMap:
        n, d, h, w = img.shape
        tokens = img.transpose(0, 2, 3, 1).reshape(n, h * w, d)
        if cls_token is not None:
            tokens = T.concat([cls_token, tokens], axis=1)
        return cls(tokens, h, w, cls_token is not None)


# -- parameters -----------------------------------------------------------
class ParamStore:
    """Ordered name -> Tensor map of learnable arrays plus non-learned buffers."""

    def __init__(self, params: dict[str, Tensor] | None = None, seed: int | None = None, buffers=None):
        self.params: dict[str, Tensor] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        self.seed = seed

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def get(self, name: str) -> Tensor | None:
        return self.params.get(name)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> ParamStore:
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return ParamStore(params, self.seed, {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> ParamStore:
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return ParamStore(params, self.seed, {k: v.astype(dtype) for k, v in self.buffers.items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], seed=None, buffers=None) -> ParamStore:
        return cls({k: Tensor(np.array(v), requires_grad=True) for k, v in arrays.items()}, seed, buffers)

    def equals(self, other: ParamStore) -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self.params)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable array, in initialization order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for i, st in enumerate(cfg.stages):
        d, k = st.embed_dim, st.patch_kernel
        p = f"stage{i}"
        shapes[f"{p}.embed.conv_weight"] = (d, cfg.stage_in_channels(i), k, k)
        shapes[f"{p}.embed.conv_bias"] = (d,)
        shapes[f"{p}.embed.norm.gamma"] = (d,)
        shapes[f"{p}.embed.norm.beta"] = (d,)
        if st.has_cls_token:
            shapes[f"{p}.embed.cls_token"] = (1, 1, d)
        for j in range(st.depth):
            b = f"{p}.block{j}"
            shapes[f"{b}.norm1.gamma"] = (d,)
            shapes[f"{b}.norm1.beta"] = (d,)
            for role in ROLES:
                shapes[f"{b}.attn.{role}.dw_weight"] = (d, 1, 3, 3)
                shapes[f"{b}.attn.{role}.norm.gamma"] = (d,)
                shapes[f"{b}.attn.{role}.norm.beta"] = (d,)
                shapes[f"{b}.attn.{role}.proj_weight"] = (d, d)
            shapes[f"{b}.attn.out.weight"] = (d, d)
            shapes[f"{b}.attn.out.bias"] = (d,)
            shapes[f"{b}.norm2.gamma"] = (d,)
            shapes[f"{b}.norm2.beta"] = (d,)
            shapes[f"{b}.mlp.fc1.weight"] = (d, st.mlp_hidden)
            shapes[f"{b}.mlp.fc1.bias"] = (st.mlp_hidden,)
            shapes[f"{b}.mlp.fc2.weight"] = (st.mlp_hidden, d)
            shapes[f"{b}.mlp.fc2.bias"] = (d,)
    d = cfg.stages[-1].embed_dim
    shapes["head.norm.gamma"] = (d,)
    shapes["head.norm.beta"] = (d,)
    if cfg.head_hidden:
        shapes["head.hidden.weight"] = (d, cfg.head_hidden)
        shapes["head.hidden.bias"] = (cfg.head_hidden,)
        d = cfg.head_hidden
    shapes["head.out.weight"] = (d, cfg.output_dim)
    shapes["head.out.bias"] = (cfg.output_dim,)
    return shapes


def num_parameters(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ParamStore:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta", "cls_token") or leaf.endswith("bias"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    buffers = {}
    if cfg.proj_norm == "batch":
        for name in params:
            if name.endswith(".norm.gamma") and ".attn." in name:
                base = name[: -len(".gamma")]
                buffers[f"{base}.running_mean"] = np.zeros(shape=params[name].shape, dtype=dtype)
                buffers[f"{base}.running_var"] = np.ones(shape=params[name].shape, dtype=dtype)
    return ParamStore(params, seed, buffers)


# -- layers ---------------------------------------------------------------
def conv_token_embedding(x: Tensor, stage: StageConfig, params: ParamStore, prefix: str, eps: float = 1e-5) -> TokenMap:
    """Strided conv to embed_dim channels, flatten to tokens, layer-normalize."""
    weight = params[f"{prefix}.conv_weight"]
    if x.ndim != 4 or x.shape[1] != weight.shape[-3]:
        raise ShapeError(f"{prefix}: expected {weight.shape[-3]} input channels, got input shape {x.shape}")
    img = T.conv2d(x, weight, params[f"{prefix}.conv_bias"], stride=stage.patch_stride, padding=stage.patch_padding)
    tmap = TokenMap.from_image(img)
    tokens = T.layer_norm(tmap.tokens, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"], eps)
    return TokenMap(tokens, tmap.h, tmap.w)


def _batch_norm(x: Tensor, params: ParamStore, prefix: str, training: bool, eps: float, momentum: float = 0.1) -> Tensor:
    gamma, beta = params[f"{prefix}.gamma"], params[f"{prefix}.beta"]
    rm_key, rv_key = f"{prefix}.running_mean", f"{prefix}.running_var"
    axes = tuple(range(x.ndim - 1))
    if training:
        if T._GRAD_ENABLED:
            batch_mean = x.data.mean(axis=axes)
            batch_var = x.data.var(axis=axes)
            params.buffers[rm_key] = (1 - momentum) * params.buffers[rm_key] + momentum * batch_mean
            params.buffers[rv_key] = (1 - momentum) * params.buffers[rv_key] + momentum * batch_var
        return T.normalize(x, gamma, beta, axes, eps)
    inv = 1.0 / np.sqrt(params.buffers[rv_key] + eps)
    return (x + Tensor(-params.buffers[rm_key])) * Tensor(inv) * gamma + beta


def conv_projection(
    t: TokenMap,
    role: str,
    stride: int,
    params: ParamStore,
    prefix: str,
    proj_norm: str = "layer",
    training: bool = False,
    eps: float = 1e-5,
) -> Tensor:
    """Depth-wise 3x3 conv + norm over the token grid, then a pointwise linear map.

    The cls token skips the spatial conv and only takes the pointwise map.
    Returns tokens [N, L', D].
    """
    if stride not in (1, 2):
        raise ValueError(f"projection stride must be 1 or 2, got {stride}")
    if role not in ROLES:
        raise ValueError(f"unknown projection role {role!r}")
    p = f"{prefix}.{role}"
    cls_tok, _ = t.split()
    img = T.conv2d(t.to_image(), params[f"{p}.dw_weight"], None, stride=stride, padding=1, groups=t.dim)
    n, d, h, w = img.shape
    grid = img.transpose(0, 2, 3, 1)
    if proj_norm == "batch":
        grid = _batch_norm(grid, params, f"{p}.norm", training, eps)
    else:
        grid = T.layer_norm(grid, params[f"{p}.norm.gamma"], params[f"{p}.norm.beta"], eps)
    tokens = grid.reshape(n, h * w, d)
    if cls_tok is not None:
        tokens = T.concat([cls_tok, tokens], axis=1)
    return T.linear(tokens, params[f"{p}.proj_weight"])


def attention_heads(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention per head.

    Returns the concatenated head outputs [N, Lq, D] (before any output
    projection) and the attention weights [N, heads, Lq, Lk].
    """
    n, lq, d = q.shape
    lk = k.shape[1]
    if d % num_heads:
        raise ValueError(f"model dim {d} not divisible by {num_heads} heads")
    if lk < 1 or v.shape[1] != lk or k.shape[2] != d or v.shape[2] != d:
        raise ShapeError(f"key/value shapes {k.shape}/{v.shape} incompatible with query {q.shape}")
    hd = d // num_heads

    def heads(x: Tensor, length: int) -> Tensor:
        return x.reshape(n, length, num_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q, lq), heads(k, lk), heads(v, lk)
    scores = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    weights = T.softmax(scores)
    out = T.matmul(weights, vh).transpose(0, 2, 1, 3).reshape(n, lq, d)
    return out, weights


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, num_heads: int, out_weight: Tensor, out_bias: Tensor | None = None
) -> Tensor:
    out, _ = attention_heads(q, k, v, num_heads)
    return T.linear(out, out_weight, out_bias)


def cvt_block(
    t: TokenMap,
    stage: StageConfig,
    params: ParamStore,
    prefix: str,
    proj_norm: str = "layer",
    training: bool = False,
    eps: float = 1e-5,
) -> TokenMap:
    x = t.tokens
    normed = TokenMap(T.layer_norm(x, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"], eps), t.h, t.w, t.has_cls)
    a = f"{prefix}.attn"
    q = conv_projection(normed, "q", stage.q_stride, params, a, proj_norm, training, eps)
    k = conv_projection(normed, "k", stage.kv_stride, params, a, proj_norm, training, eps)
    v = conv_projection(normed, "v", stage.kv_stride, params, a, proj_norm, training, eps)
    x = x + multi_head_attention(q, k, v, stage.num_heads, params[f"{a}.out.weight"], params[f"{a}.out.bias"])
    h = T.layer_norm(x, params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"], eps)
    h = T.gelu(T.linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    x = x + T.linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return TokenMap(x, t.h, t.w, t.has_cls)


# -- whole model ----------------------------------------------------------
@dataclass
class Segment:
    """One slice of the forward pass owning every parameter under ``prefix``."""

    prefix: str
    fn: Callable[[object, ParamStore, bool], object]

    def owns(self, name: str) -> bool:
        return name.startswith(self.prefix + ".")


def segments(cfg: ModelConfig) -> list[Segment]:
    eps = cfg.norm_eps
    segs: list[Segment] = []
    for i, st in enumerate(cfg.stages):
        p = f"stage{i}"

        def embed(state, params, training, st=st, p=p):
            x = state.to_image() if isinstance(state, TokenMap) else state
            tmap = conv_token_embedding(x, st, params, f"{p}.embed", eps)
            if st.has_cls_token:
                cls_tok = params[f"{p}.embed.cls_token"]
                n = tmap.tokens.shape[0]
                if cls_tok.shape[0] != n:
                    cls_tok = T.concat([cls_tok] * n, axis=0)
                tmap = TokenMap(T.concat([cls_tok, tmap.tokens], axis=1), tmap.h, tmap.w, True)
            return tmap

        segs.append(Segment(f"{p}.embed", embed))
        for j in range(st.depth):
            b = f"{p}.block{j}"

            def block(state, params, training, st=st, b=b):
                return cvt_block(state, st, params, b, cfg.proj_norm, training, eps)

            segs.append(Segment(b, block))

    def head(state, params, training):
        cls_tok = state.tokens[:, 0]
        h = T.layer_norm(cls_tok, params["head.norm.gamma"], params["head.norm.beta"], eps)
        if cfg.head_hidden:
            h = T.gelu(T.linear(h, params["head.hidden.weight"], params["head.hidden.bias"]))
        out = T.linear(h, params["head.out.weight"], params["head.out.bias"])
        if cfg.target_std != 1.0:
            out = out * cfg.target_std
        if cfg.target_mean != 0.0:
            out = out + cfg.target_mean
        return out

    segs.append(Segment("head", head))
    return segs


def check_input(x: Tensor, cfg: ModelConfig) -> None:
    expected = (cfg.input_channels, cfg.input_height, cfg.input_width)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"input shape {tuple(x.shape)} does not match model input [N, {expected[0]}, {expected[1]}, {expected[2]}]")


def forward(
    x: Tensor | np.ndarray,
    cfg: ModelConfig,
    params: ParamStore,
    training: bool = False,
    return_stages: bool = False,
):
    """Predict one scalar per sample, shape [N, 1].

    With ``return_stages`` also returns each stage's output TokenMap.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=next(iter(params.params.values())).dtype))
    check_input(x, cfg)
    state = x
    stage_maps = []
    for seg in segments(cfg):
        if isinstance(state, TokenMap) and (seg.prefix == "head" or seg.prefix.endswith(".embed")):
            stage_maps.append(state)
        state = seg.fn(state, params, training)
    if return_stages:
        return state, stage_maps
    return state


def predict(x: np.ndarray, cfg: ModelConfig, params: ParamStore, batch_size: int = 64) -> np.ndarray:
    """Inference without graph recording, in fixed-size chunks."""
    dtype = next(iter(params.params.values())).dtype
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            chunk = Tensor(np.asarray(x[start : start + batch_size], dtype=dtype))
            out.append(forward(chunk, cfg, params).data)
    if not out:
        return np.zeros((0, 1), dtype=dtype)
    return np.concatenate(out, axis=0)


# -- full-model gradient check ---------------------------------------------
def _repeat_state(state, k: int):
    if k == 1:
        return state
    if isinstance(state, TokenMap):
        return TokenMap(Tensor(np.concatenate([state.tokens.data] * k)), state.h, state.w, state.has_cls)
    return Tensor(np.concatenate([state.data] * k))


def _run_from(segs: list[Segment], start: int, state, params: ParamStore, training: bool):
    for seg in segs[start:]:
        state = seg.fn(state, params, training)
    return state


@dataclass
class GroupResult:
    name: str
    max_relative_error: float
    worst_entry: tuple[int, ...]
    size: int


@dataclass
class ModelGradCheck:
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max((g.max_relative_error for g in self.groups), default=0.0)

    @property
    def worst(self) -> GroupResult:
        return max(self.groups, key=lambda g: g.max_relative_error)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def model_grad_check(
    cfg: ModelConfig,
    params: ParamStore,
    x: np.ndarray,
    target: np.ndarray,
    eps: float = 1e-4,
    corrupt: float = 1.0,
    chunk: int = 128,
    names: Sequence[str] | None = None,
) -> ModelGradCheck:
    """Compare backprop gradients of the MSE loss with central differences
    for every entry of every parameter (or of ``names``).

    Forward passes restart at the segment owning the parameter, from cached
    activations. ``chunk`` entries are perturbed at once: each perturbed copy
    of the parameter becomes a per-sample parameter for one row of a batched
    forward. ``corrupt`` scales the analytic gradient (negative control).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    x = Tensor(np.asarray(x, dtype=np.float64))
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    check_input(x, cfg)
    n = x.shape[0]
    if y.size != n:
        raise ShapeError(f"{y.size} targets for {n} samples")

    params.zero_grad()
    pred = forward(x, cfg, params, training=True)
    ((pred - Tensor(y.reshape(-1, 1))) ** 2).mean().backward()

    segs = segments(cfg)
    inputs = [x]
    with T.no_grad():
        for seg in segs[:-1]:
            inputs.append(seg.fn(inputs[-1], params, True))
    # batch statistics couple rows, so each perturbation runs on its own
    step = 1 if cfg.proj_norm == "batch" else max(1, chunk)

    result = ModelGradCheck()
    for name in list(params) if names is None else list(names):
        j = next(i for i, s in enumerate(segs) if s.owns(name))
        p = params[name]
        size = p.data.size
        numeric = np.empty(size)
        for start in range(0, size, step):
            idx = np.arange(start, min(start + step, size))
            k = 2 * len(idx)
            pert = np.repeat(p.data.reshape(1, -1), k, axis=0)
            pert[0::2][np.arange(len(idx)), idx] += eps
            pert[1::2][np.arange(len(idx)), idx] -= eps
            pert = np.repeat(pert.reshape((k,) + p.shape), n, axis=0)
            if name.endswith("cls_token"):
                pert = pert.reshape((k * n,) + p.shape[1:])
            view = ParamStore({**params.params, name: Tensor(pert)}, params.seed, params.buffers)
            with T.no_grad():
                if cfg.proj_norm == "batch":
                    views = [ParamStore({**params.params, name: Tensor(pert[r * n : (r + 1) * n])}, None, params.buffers) for r in range(k)]
                    preds = np.concatenate([_run_from(segs, j, inputs[j], v, True).data for v in views])
                else:
                    preds = _run_from(segs, j, _repeat_state(inputs[j], k), view, True).data
            preds = preds.reshape(k, n)
            hi, lo = preds[0::2], preds[1::2]
            # (hi - y)^2 - (lo - y)^2 factored to avoid cancellation between two losses
            delta = ((hi - lo) * (hi + lo - 2.0 * y.reshape(1, n))).mean(axis=1)
            numeric[start : start + len(idx)] = delta / (2 * eps)
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) * corrupt
        err = T.relative_error(analytic, numeric)
        worst = int(np.argmax(err))
        entry = tuple(int(i) for i in np.unravel_index(worst, p.shape))
        result.groups.append(GroupResult(name, float(err[worst]), entry, size))
    params.zero_grad()
    return result


GRADCHECK_EPS = 3e-5
GRADCHECK_RESIDUAL = 0.01


def gradcheck_setup(cfg: ModelConfig, seed: int = 0, residual: float = GRADCHECK_RESIDUAL, jitter: float = 0.05):
    """Float64 check point for ``model_grad_check``.

    Parameters are the seeded init plus N(0, jitter) noise, so no entry sits
    at an exact zero (the zero cls token is a high-curvature point of layer
    norm). The target is placed ``residual`` below the prediction: a small
    residual keeps float64 round-off in the loss difference well below the
    gradient of entries whose true gradient is tiny.
    """
    params = init_params(cfg, seed, np.float64)
    rng = np.random.default_rng([seed, 7])
    for _, p in params.items():
        p.data += rng.normal(0.0, jitter, p.shape)
    x = rng.random((1, cfg.input_channels, cfg.input_height, cfg.input_width))
    with T.no_grad():
        pred = forward(Tensor(x), cfg, params, training=True).data.reshape(-1)
    return params, x, pred - residual
