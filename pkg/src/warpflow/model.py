"""Desk-scale warping-based iterative flow estimator.

Meta-architecture: a shared-weight CNN encoder maps each frame to features at
the indexing resolution; a recurrent update module (transformer by default,
ConvGRU / plain CNN as ablation variants) consumes concat(frame-1 features,
indexed frame-2 features, hidden state) and emits a residual flow, mixture
parameters, and convex-upsampling masks for T refinement steps.

Indexing variants: backward warping (default), multi-scale partial cost
volume, no indexing (raw frame-2 features), or image-space warping that
re-encodes the warped second frame every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from . import flow_ops as fo
from .flow_ops import FlowField
from .losses import MoLParams

__all__ = ["ModelConfig", "HiddenState", "FlowEstimate", "FlowModel",
           "ForwardResult", "count_macs", "conv_macs"]

UPDATE_KINDS = ("transformer_dpt", "conv_gru", "plain_cnn")
INDEXING_KINDS = ("warp", "partial_cost_volume", "none", "image_space_warp")


@dataclass
class ModelConfig:
    T: int = 5
    index_resolution: float = 0.5               # 1/2 or 1/8 of input
    feature_dim: int = 64
    update_kind: str = "transformer_dpt"
    indexing_kind: str = "warp"
    r: int = 4                                  # lookup radius (cost-volume variant)
    scales: int = 4                             # pyramid scales (cost-volume variant)
    use_context_encoder: bool = False
    patch_size: int = 4
    pos_embed_base: tuple[int, int] = (16, 16)
    upsample_factor: int = 0                    # 0 -> derived from index_resolution
    embed_dim: int = 96
    n_blocks: int = 4
    n_heads: int = 4
    refine_dim: int = 64
    width_mult: float = 1.0                     # capacity scaling for matched-MACs variants
    dtype: str = "float64"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.update_kind not in UPDATE_KINDS:
            raise ValueError(f"update_kind must be one of {UPDATE_KINDS}")
        if self.indexing_kind not in INDEXING_KINDS:
            raise ValueError(f"indexing_kind must be one of {INDEXING_KINDS}")
        inv = 1.0 / self.index_resolution
        if abs(inv - round(inv)) > 1e-9:
            raise ValueError("index_resolution must be a 1/2^k fraction")
        if self.upsample_factor == 0:
            self.upsample_factor = int(round(inv))

    @property
    def levels(self) -> int:
        return int(round(math.log2(1.0 / self.index_resolution)))

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def scaled(self, base: int) -> int:
        """Width under the capacity multiplier, rounded to a head multiple."""
        v = max(self.n_heads, int(round(base * self.width_mult)))
        return (v // self.n_heads) * self.n_heads

    @property
    def index_channels(self) -> int:
        if self.indexing_kind == "partial_cost_volume":
            return (2 * self.r + 1) ** 2 * self.scales
        return self.feature_dim

    @property
    def update_in_channels(self) -> int:
        c = 2 * self.feature_dim + self.index_channels
        if self.use_context_encoder:
            c += self.feature_dim
        return c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pos_embed_base"] = list(self.pos_embed_base)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "pos_embed_base" in d:
            d["pos_embed_base"] = tuple(d["pos_embed_base"])
        return ModelConfig(**d)


@dataclass
class HiddenState:
    data: Tensor                                # N x d x h x w


@dataclass
class FlowEstimate:
    flow: FlowField                             # at index resolution
    step: int


@dataclass
class ForwardResult:
    flows: list[FlowField]                      # full resolution, one per step
    mols: list[MoLParams]                       # full resolution, one per step
    flows_index: list[FlowField]                # index resolution (pre-upsample)


# -----------------------------------------------------------------------------
# parameterized layers
# -----------------------------------------------------------------------------

class Conv:
    def __init__(self, params: dict, name: str, rng, cin: int, cout: int,
                 k: int = 3, stride: int = 1, padding: Optional[int] = None,
                 zero_init: bool = False, dtype=np.float64):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            std = math.sqrt(2.0 / (cin * k * k))
            w = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        params[f"{name}.w"] = self.w
        params[f"{name}.b"] = self.b

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear:
    def __init__(self, params: dict, name: str, rng, din: int, dout: int,
                 dtype=np.float64):
        std = math.sqrt(1.0 / din)
        self.w = Tensor((rng.standard_normal((din, dout)) * std).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)
        params[f"{name}.w"] = self.w
        params[f"{name}.b"] = self.b

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class LayerNorm:
    def __init__(self, params: dict, name: str, dim: int, dtype=np.float64):
        self.g = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        params[f"{name}.g"] = self.g
        params[f"{name}.b"] = self.b

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b, axis=-1)


class TransformerBlock:
    def __init__(self, params: dict, name: str, rng, dim: int, heads: int,
                 dtype=np.float64):
        self.heads = heads
        self.ln1 = LayerNorm(params, f"{name}.ln1", dim, dtype)
        self.ln2 = LayerNorm(params, f"{name}.ln2", dim, dtype)
        std = math.sqrt(1.0 / dim)
        for nm in ("wq", "wk", "wv", "wo"):
            t = Tensor((rng.standard_normal((dim, dim)) * std).astype(dtype),
                       requires_grad=True)
            setattr(self, nm, t)
            params[f"{name}.{nm}"] = t
        self.fc1 = Linear(params, f"{name}.fc1", rng, dim, 2 * dim, dtype)
        self.fc2 = Linear(params, f"{name}.fc2", rng, 2 * dim, dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + ad.self_attention(self.ln1(x), self.wq, self.wk, self.wv,
                                  self.wo, self.heads)
        return x + self.fc2(ad.gelu(self.fc1(self.ln2(x))))


class PredictionHeads:
    """Shared head stack: new hidden, residual flow, MoL extras, upsample mask."""

    def __init__(self, params: dict, name: str, rng, cin: int, d: int, s: int,
                 dtype=np.float64):
        self.hidden = Conv(params, f"{name}.hidden", rng, cin, d, dtype=dtype)
        self.flow = Conv(params, f"{name}.flow", rng, cin, 2, zero_init=True,
                         dtype=dtype)
        self.extras = Conv(params, f"{name}.extras", rng, cin, 4, zero_init=True,
                           dtype=dtype)
        self.mask = Conv(params, f"{name}.mask", rng, cin, 9 * s * s,
                         zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor):
        return (ad.tanh(self.hidden(x)), self.flow(x), self.extras(x), self.mask(x))


# -----------------------------------------------------------------------------
# model
# -----------------------------------------------------------------------------

class FlowModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        c = config

        self.encoder = self._build_encoder(rng, "encoder", dt)
        if c.use_context_encoder:
            self.context_encoder = self._build_encoder(rng, "context", dt)

        d = c.feature_dim
        self.init_conv = Conv(self.params, "init", rng, 2 * d, d, k=1, padding=0,
                              dtype=dt)

        cin = c.update_in_channels
        s = c.upsample_factor
        if c.update_kind == "transformer_dpt":
            e = c.scaled(c.embed_dim)
            cr = c.scaled(c.refine_dim)
            p = c.patch_size
            self.patch = Linear(self.params, "patch", rng, cin * p * p, e, dt)
            ph, pw = c.pos_embed_base
            self.pos = Tensor((rng.standard_normal((1, e, ph, pw)) * 0.02).astype(dt),
                              requires_grad=True)
            self.params["pos"] = self.pos
            self.blocks = [TransformerBlock(self.params, f"block{i}", rng, e,
                                            c.n_heads, dt)
                           for i in range(c.n_blocks)]
            self.ln_out = LayerNorm(self.params, "ln_out", e, dt)
            self.reassemble = Linear(self.params, "reassemble", rng, e,
                                     p * p * cr, dt)
            self.fuse = Conv(self.params, "fuse", rng, cr, cr, dtype=dt)
            self.heads = PredictionHeads(self.params, "head", rng, cr, d, s, dt)
        elif c.update_kind == "conv_gru":
            w = c.scaled(d)
            self.gru_z = Conv(self.params, "gru_z", rng, cin + d, d, dtype=dt)
            self.gru_r = Conv(self.params, "gru_r", rng, cin + d, d, dtype=dt)
            self.gru_q = Conv(self.params, "gru_q", rng, cin + d, d, dtype=dt)
            self.post = Conv(self.params, "post", rng, d, w, dtype=dt)
            self.heads = PredictionHeads(self.params, "head", rng, w, d, s, dt)
        else:                                    # plain_cnn
            w = c.scaled(2 * d)
            self.cnn1 = Conv(self.params, "cnn1", rng, cin, w, dtype=dt)
            self.cnn2 = Conv(self.params, "cnn2", rng, w, w, dtype=dt)
            self.heads = PredictionHeads(self.params, "head", rng, w, d, s, dt)

    def _build_encoder(self, rng, name: str, dt):
        # downsampling is pool-then-conv so every conv keeps an odd kernel
        c = self.config
        d = c.feature_dim
        convs = [Conv(self.params, f"{name}0", rng, 3, 32, dtype=dt)]
        cin = 32
        for i in range(c.levels):
            convs.append(Conv(self.params, f"{name}{i + 1}", rng, cin, d,
                              dtype=dt))
            cin = d
        convs.append(Conv(self.params, f"{name}{c.levels + 1}", rng, cin, d,
                          dtype=dt))
        return convs

    # -- spec surface ---------------------------------------------------------

    def _run_encoder(self, convs, img: Tensor) -> Tensor:
        x = ad.relu(convs[0](img))
        for conv in convs[1:-1]:
            x = ad.relu(conv(ad.avg_pool2d(x, 2)))
        return convs[-1](x)

    def encode(self, i1: Tensor, i2: Tensor) -> tuple[Tensor, Tensor]:
        """Shared-weight feature extraction at the indexing resolution."""
        inv = int(round(1.0 / self.config.index_resolution))
        if i1.shape[2] % inv or i1.shape[3] % inv:
            raise DimensionError(
                f"input {i1.shape[2]}x{i1.shape[3]} not divisible by {inv}")
        return self._run_encoder(self.encoder, i1), self._run_encoder(self.encoder, i2)

    def init_state(self, f1: Tensor, f2: Tensor) -> tuple[HiddenState, FlowEstimate]:
        if f1.shape != f2.shape:
            raise DimensionError("feature shapes differ")
        hidden = self.init_conv(ad.concat([f1, f2], axis=1))
        n, _, h, w = f1.shape
        flow = FlowField.zeros(n, h, w, dtype=self.config.np_dtype)
        return HiddenState(hidden), FlowEstimate(flow, step=0)

    def update_step(self, hidden: HiddenState, f1: Tensor, indexed: Tensor,
                    flow: FlowEstimate, context: Optional[Tensor] = None):
        """One refinement step: returns (hidden, residual flow, MoL params, mask)."""
        c = self.config
        parts = [f1, indexed, hidden.data]
        if context is not None:
            parts.append(context)
        x = ad.concat(parts, axis=1)

        if c.update_kind == "transformer_dpt":
            feat = self._transformer_trunk(x)
        elif c.update_kind == "conv_gru":
            feat = self._gru_trunk(x, hidden.data)
        else:
            feat = ad.relu(self.cnn2(ad.relu(self.cnn1(x))))

        new_hidden, residual, extras, mask = self.heads(feat)
        mol = MoLParams(ad.concat([flow.flow.data + residual, extras], axis=1))
        return (HiddenState(new_hidden), FlowField(residual), mol, mask)

    def _transformer_trunk(self, x: Tensor) -> Tensor:
        c = self.config
        p = c.patch_size
        n, _, h, w = x.shape
        if h % p or w % p:
            raise DimensionError(f"feature grid {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        cin = x.shape[1]
        patches = ad.reshape(x, (n, cin, gh, p, gw, p))
        patches = ad.transpose(patches, (0, 2, 4, 1, 3, 5))
        patches = ad.reshape(patches, (n, gh * gw, cin * p * p))
        tok = self.patch(patches)                                 # N,L,e
        pos = ad.bilinear_resize(self.pos, gh, gw)
        e = tok.shape[-1]
        pos = ad.transpose(ad.reshape(pos, (1, e, gh * gw)), (0, 2, 1))
        tok = tok + pos
        for blk in self.blocks:
            tok = blk(tok)
        tok = self.ln_out(tok)
        dense = self.reassemble(tok)                              # N,L,p*p*cr
        cr = dense.shape[-1] // (p * p)
        dense = ad.reshape(dense, (n, gh, gw, p, p, cr))
        dense = ad.transpose(dense, (0, 5, 1, 3, 2, 4))           # N,cr,gh,p,gw,p
        dense = ad.reshape(dense, (n, cr, h, w))
        return ad.relu(self.fuse(dense))

    def _gru_trunk(self, x: Tensor, h: Tensor) -> Tensor:
        hx = ad.concat([h, x], axis=1)
        z = ad.sigmoid(self.gru_z(hx))
        r = ad.sigmoid(self.gru_r(hx))
        q = ad.tanh(self.gru_q(ad.concat([r * h, x], axis=1)))
        new_h = (1.0 - z) * h + z * q
        return ad.relu(self.post(new_h))

    def forward(self, i1: Tensor, i2: Tensor) -> ForwardResult:
        c = self.config
        n, _, hh, ww = i1.shape
        f1, f2 = self.encode(i1, i2)
        context = None
        if c.use_context_encoder:
            context = self._run_encoder(self.context_encoder, i1)

        pyramid = None
        if c.indexing_kind == "partial_cost_volume":
            pyramid = fo.build_pyramid(f2, c.scales)

        hidden, est = self.init_state(f1, f2)
        s = c.upsample_factor
        flows, mols, flows_index = [], [], []
        for t in range(c.T):
            indexed = self._index(f1, f2, i2, est.flow, pyramid)
            hidden, residual, mol, mask = self.update_step(hidden, f1, indexed,
                                                           est, context)
            est = FlowEstimate(FlowField(est.flow.data + residual.data), t + 1)
            flows_index.append(est.flow)
            up_flow = fo.convex_upsample(est.flow, mask, s)
            up_extras = fo.convex_combine(mol.data[:, 2:], mask, s, unit_scale=1.0)
            flows.append(up_flow)
            mols.append(MoLParams(ad.concat([up_flow.data, up_extras], axis=1)))
        return ForwardResult(flows, mols, flows_index)

    def _index(self, f1, f2, i2, flow: FlowField, pyramid) -> Tensor:
        kind = self.config.indexing_kind
        if kind == "warp":
            warped, _ = fo.warp(f2, flow)
            return warped
        if kind == "none":
            return f2
        if kind == "partial_cost_volume":
            return fo.partial_cost_volume(f1, pyramid, flow, self.config.r).data
        # image_space_warp: re-warp frame 2 at full resolution and re-encode
        n, _, hh, ww = i2.shape
        up = fo.rescale_flow(flow, hh, ww)
        warped_img, _ = fo.warp(i2, up)
        return self._run_encoder(self.encoder, warped_img)

    # -- bookkeeping -----------------------------------------------------------

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def count_macs(self, input_shape: tuple[int, int, int, int]) -> int:
        return count_macs(self.config, input_shape)


# -----------------------------------------------------------------------------
# analytic MAC accounting
# -----------------------------------------------------------------------------

def conv_macs(n: int, cin: int, cout: int, h_out: int, w_out: int, k: int) -> int:
    return n * h_out * w_out * cout * cin * k * k


def _encoder_macs(c: ModelConfig, n: int, hh: int, ww: int) -> int:
    total = conv_macs(n, 3, 32, hh, ww, 3)
    cin, h, w = 32, hh, ww
    for _ in range(c.levels):
        h, w = h // 2, w // 2
        total += conv_macs(n, cin, c.feature_dim, h, w, 3)
        cin = c.feature_dim
    total += conv_macs(n, cin, c.feature_dim, h, w, 3)
    return total


def _indexing_macs(c: ModelConfig, n: int, h: int, w: int) -> int:
    d = c.feature_dim
    if c.indexing_kind == "warp":
        return 4 * n * h * w * d                 # 4-corner bilinear blend
    if c.indexing_kind == "none":
        return 0
    if c.indexing_kind == "partial_cost_volume":
        k2 = (2 * c.r + 1) ** 2
        # per lookup: 4-corner interpolation (4d) + dot product (d)
        return n * h * w * k2 * c.scales * 5 * d
    return 0                                     # image_space_warp counted via encoder


def _update_macs(c: ModelConfig, n: int, h: int, w: int) -> int:
    d = c.feature_dim
    cin = c.update_in_channels
    s = c.upsample_factor
    total = 0
    if c.update_kind == "transformer_dpt":
        e = c.scaled(c.embed_dim)
        cr = c.scaled(c.refine_dim)
        p = c.patch_size
        gh, gw = h // p, w // p
        L = gh * gw
        total += n * L * (cin * p * p) * e       # patch embedding
        per_block = 4 * n * L * e * e + 2 * n * L * L * e \
            + n * L * e * 2 * e + n * L * 2 * e * e
        total += c.n_blocks * per_block
        total += n * L * e * (p * p * cr)        # reassemble
        total += conv_macs(n, cr, cr, h, w, 3)   # fuse
        head_in = cr
    elif c.update_kind == "conv_gru":
        wd = c.scaled(d)
        total += 3 * conv_macs(n, cin + d, d, h, w, 3)
        total += conv_macs(n, d, wd, h, w, 3)
        head_in = wd
    else:
        wd = c.scaled(2 * d)
        total += conv_macs(n, cin, wd, h, w, 3)
        total += conv_macs(n, wd, wd, h, w, 3)
        head_in = wd
    for cout in (d, 2, 4, 9 * s * s):
        total += conv_macs(n, head_in, cout, h, w, 3)
    return total


def count_macs(config: ModelConfig,
               input_shape: tuple[int, int, int, int] = (1, 3, 64, 64)) -> int:
    """Analytic multiply-accumulate count for one unrolled forward pass."""
    c = config
    n, _, hh, ww = input_shape
    h = int(hh * c.index_resolution)
    w = int(ww * c.index_resolution)
    d = c.feature_dim

    total = 2 * _encoder_macs(c, n, hh, ww)      # both frames, weights shared
    if c.use_context_encoder:
        total += _encoder_macs(c, n, hh, ww)
    if c.indexing_kind == "image_space_warp":
        total += c.T * _encoder_macs(c, n, hh, ww)   # re-encode warped frame 2
        total += c.T * 4 * n * hh * ww * 3           # image-space warp itself
    total += n * h * w * 2 * d                   # init 1x1 conv
    total += c.T * _indexing_macs(c, n, h, w)
    total += c.T * _update_macs(c, n, h, w)
    # convex upsampling: 9 weighted sums per fine pixel for flow + 4 extras
    s = c.upsample_factor
    total += c.T * n * (h * s) * (w * s) * 9 * 6
    return int(total)
