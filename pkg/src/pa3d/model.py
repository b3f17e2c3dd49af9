"""Patch-token encoder: shared-MLP PointNet over center-relative coords
plus a positional MLP of the centroid, a pre-norm transformer trunk, and
the two projection heads.

Parameters are a flat name -> Tensor registry; the prefix before '/' is
the freezing group ("pointnet", "posmlp", "block3", "final_ln", "head_2d",
"head_text", "tau_bias"). Attention stores per-head Q/K/V matrices because
the op set has no slicing; the math is identical to fused projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .geometry import PatchSet
from .tensor import Tensor

FREEZE_POLICIES = ("all", "last_block_and_heads", "last_two", "last_three",
                   "heads_only")

TAU_INIT = 0.1
BIAS_INIT = -10.0

_FORWARD_CALLS = 0


def forward_call_count() -> int:
    return _FORWARD_CALLS


def reset_forward_call_count() -> None:
    global _FORWARD_CALLS
    _FORWARD_CALLS = 0


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    pointnet_hidden: int = 64
    head_2d_out: int = 16
    head_text_out: int = 16
    num_patches: int = 32   # G
    patch_size: int = 16    # k

    def __post_init__(self):
        for f, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"EncoderConfig.{f} must be >= 1, got {v}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        return EncoderConfig(**{k: int(v) for k, v in d.items()})


def expected_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter registry; single source of truth for init and
    checkpoint validation. Iteration order fixes RNG draw order at init."""
    d, ph, dh = cfg.d_model, cfg.pointnet_hidden, cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "pointnet/w1": (3, ph), "pointnet/b1": (1, ph),
        "pointnet/w2": (ph, ph), "pointnet/b2": (1, ph),
        "pointnet/w3": (ph, d), "pointnet/b3": (1, d),
        "posmlp/w1": (3, ph), "posmlp/b1": (1, ph),
        "posmlp/w2": (ph, d), "posmlp/b2": (1, d),
    }
    for i in range(cfg.n_layers):
        blk = f"block{i}"
        shapes[f"{blk}/ln1_g"] = (1, d)
        shapes[f"{blk}/ln1_b"] = (1, d)
        for h in range(cfg.n_heads):
            shapes[f"{blk}/wq{h}"] = (d, dh)
            shapes[f"{blk}/wk{h}"] = (d, dh)
            shapes[f"{blk}/wv{h}"] = (d, dh)
        shapes[f"{blk}/wo"] = (d, d)
        shapes[f"{blk}/bo"] = (1, d)
        shapes[f"{blk}/ln2_g"] = (1, d)
        shapes[f"{blk}/ln2_b"] = (1, d)
        shapes[f"{blk}/mw1"] = (d, cfg.mlp_ratio * d)
        shapes[f"{blk}/mb1"] = (1, cfg.mlp_ratio * d)
        shapes[f"{blk}/mw2"] = (cfg.mlp_ratio * d, d)
        shapes[f"{blk}/mb2"] = (1, d)
    shapes["final_ln/g"] = (1, d)
    shapes["final_ln/b"] = (1, d)
    shapes["head_2d/w"] = (d, cfg.head_2d_out)
    shapes["head_2d/b"] = (1, cfg.head_2d_out)
    shapes["head_text/w"] = (d, cfg.head_text_out)
    shapes["head_text/b"] = (1, cfg.head_text_out)
    shapes["tau_bias/log_tau"] = ()
    shapes["tau_bias/bias"] = ()
    return shapes


def group_of(name: str) -> str:
    return name.split("/", 1)[0]


class ModelParams:
    """All learnable weights keyed by name, plus per-group trainability."""

    def __init__(self, cfg: EncoderConfig, tensors: dict[str, Tensor],
                 trainable: dict[str, bool]):
        self.cfg = cfg
        self.tensors = tensors
        self.trainable = trainable
        self._sync_flags()

    def _sync_flags(self) -> None:
        for name, t in self.tensors.items():
            t.requires_grad = self.trainable[group_of(name)]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self.tensors:
            seen.setdefault(group_of(name), None)
        return list(seen)

    def group_arrays(self, group: str) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()
                if group_of(n) == group}

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    @property
    def tau(self) -> float:
        return math.exp(float(self.tensors["tau_bias/log_tau"].data))

    @property
    def bias(self) -> float:
        return float(self.tensors["tau_bias/bias"].data)

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"parameter {name} became non-finite")


def init_model(cfg: EncoderConfig, rng: np.random.Generator) -> ModelParams:
    """Scaled-uniform fan-in init for linear weights AND biases (the torch
    nn.Linear convention), identity layer norms, tau = 0.1 and b = -10.

    Bias init must not be zero: every patch contains its own center with
    relative coordinates exactly (0,0,0), so zero pointnet biases would pin
    the relu preactivations of that row exactly onto the kink and break
    finite-difference gradient verification.
    """
    shapes = expected_param_shapes(cfg)
    fan_in: dict[str, int] = {}
    for name, shape in shapes.items():
        leaf = name.split("/", 1)[1]
        if len(shape) == 2 and shape[0] > 1:   # weight matrix
            fan_in[name] = shape[0]
            bias_name = name.rsplit("/", 1)[0] + "/" + leaf.replace("w", "b", 1)
            if bias_name in shapes:
                fan_in[bias_name] = shape[0]

    tensors: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        leaf = name.split("/", 1)[1]
        if name == "tau_bias/log_tau":
            data = np.asarray(math.log(TAU_INIT))
        elif name == "tau_bias/bias":
            data = np.asarray(BIAS_INIT)
        elif leaf.startswith("ln") or leaf == "g":
            data = np.ones(shape) if leaf.endswith("_g") or leaf == "g" \
                else np.zeros(shape)
        elif leaf == "b" and name == "final_ln/b":
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in[name])
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, name=name)
    trainable = {g: True for g in
                 {group_of(n) for n in tensors}}
    params = ModelParams(cfg, tensors, dict(sorted(trainable.items())))
    return params


def params_from_arrays(cfg: EncoderConfig, arrays: dict[str, np.ndarray],
                       trainable: dict[str, bool]) -> ModelParams:
    expected = expected_param_shapes(cfg)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
    tensors = {}
    for name, shape in expected.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"parameter {name}: shape {arr.shape}, expected {shape}")
        tensors[name] = Tensor(arr, name=name)
    return ModelParams(cfg, tensors, dict(trainable))


def set_trainable(params: ModelParams, policy: str) -> None:
    """Flip per-group trainability. Policies name the *trainable* set;
    everything else is frozen and receives no gradient."""
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy '{policy}'")
    last = params.cfg.n_layers - 1
    if policy == "all":
        chosen = set(params.groups())
    else:
        chosen = {"head_text", "tau_bias"}
        n_blocks = {"heads_only": 0, "last_block_and_heads": 1,
                    "last_two": 2, "last_three": 3}[policy]
        if n_blocks > 0:
            chosen.add("final_ln")
        for j in range(min(n_blocks, params.cfg.n_layers)):
            chosen.add(f"block{last - j}")
    for g in params.groups():
        params.trainable[g] = g in chosen
    params._sync_flags()


# ---------------------------------------------------------------------------
# forward


def _tile_rows(rows: int, row_param: Tensor) -> Tensor:
    """Tile a (1, C) parameter to (rows, C) via ones @ param so gradients
    reduce back through the matmul (no row broadcasting in the op set)."""
    ones = Tensor(np.ones((rows, 1)))
    return T.matmul(ones, row_param)


def _affine_rows(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    r = x.shape[0]
    return T.add(T.mul(x, _tile_rows(r, gain)), _tile_rows(r, bias))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = T.matmul(x, w)
    if x.shape[0] == 1:
        return T.add(out, b)
    return T.add(out, _tile_rows(x.shape[0], b))


def encode_tokens(params: ModelParams, patches: PatchSet,
                  points: np.ndarray) -> Tensor:
    """Per-patch PointNet on center-relative coordinates, max-pooled over
    the k members, plus a positional MLP of the absolute centroid."""
    p = params
    tokens = []
    for i in range(patches.g):
        members = patches.membership[i]
        rel = Tensor(points[members] - patches.centers[i])
        h = T.relu(_linear(rel, p["pointnet/w1"], p["pointnet/b1"]))
        h = T.relu(_linear(h, p["pointnet/w2"], p["pointnet/b2"]))
        pooled = T.max_pool_rows(h)
        tok = _linear(pooled, p["pointnet/w3"], p["pointnet/b3"])

        center = Tensor(patches.centers[i][None, :])
        pos = T.relu(_linear(center, p["posmlp/w1"], p["posmlp/b1"]))
        pos = _linear(pos, p["posmlp/w2"], p["posmlp/b2"])
        tokens.append(T.add(tok, pos))
    return T.concat(tokens, axis=0)


def transformer_forward(params: ModelParams, tokens: Tensor) -> Tensor:
    """Pre-norm residual blocks (x + Attn(LN x), x + MLP(LN x)) with full
    bidirectional attention over the G tokens, then a final LN."""
    global _FORWARD_CALLS
    _FORWARD_CALLS += 1
    p = params
    cfg = p.cfg
    scale = 1.0 / math.sqrt(cfg.head_dim)
    x = tokens
    for i in range(cfg.n_layers):
        blk = f"block{i}"
        h = _affine_rows(T.layer_norm(x), p[f"{blk}/ln1_g"], p[f"{blk}/ln1_b"])
        heads = []
        for hd in range(cfg.n_heads):
            q = T.matmul(h, p[f"{blk}/wq{hd}"])
            k = T.matmul(h, p[f"{blk}/wk{hd}"])
            v = T.matmul(h, p[f"{blk}/wv{hd}"])
            attn = T.softmax_rows(T.scalar_mul(T.matmul(q, T.transpose(k)), scale))
            heads.append(T.matmul(attn, v))
        o = _linear(T.concat(heads, axis=1), p[f"{blk}/wo"], p[f"{blk}/bo"])
        x = T.add(x, o)

        h2 = _affine_rows(T.layer_norm(x), p[f"{blk}/ln2_g"], p[f"{blk}/ln2_b"])
        m = T.gelu(_linear(h2, p[f"{blk}/mw1"], p[f"{blk}/mb1"]))
        m = _linear(m, p[f"{blk}/mw2"], p[f"{blk}/mb2"])
        x = T.add(x, m)
    return _affine_rows(T.layer_norm(x), p["final_ln/g"], p["final_ln/b"])


def project(params: ModelParams, head: str, z: Tensor) -> Tensor:
    """Linear head on the latent tokens; the text head output is
    additionally L2-normalized row-wise."""
    if head == "h2d":
        return _linear(z, params["head_2d/w"], params["head_2d/b"])
    if head == "htext":
        return T.l2_normalize_rows(
            _linear(z, params["head_text/w"], params["head_text/b"]))
    raise ValueError(f"unknown head '{head}' (expected 'h2d' or 'htext')")
