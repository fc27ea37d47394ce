"""The desk-scale segmentation network.

Four-stage strided CNN encoder (side taps at strides 2/4/8/16), a slim
DeepLabV3+-style decoder, a multi-scale boundary head fused by a per-class
grouped convolution, and an optional grouped refinement of the boundary map
with the mask's spatial gradient. Boundary cues entering the segmentation
decoder are detached, so the segmentation loss never trains the boundary
head through that path.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import (
    BatchNormState,
    ShapeError,
    Tensor,
    abs_,
    avg_pool_3x3_same,
    batch_norm,
    bilinear_resize,
    channel_max,
    concat_channels,
    conv2d,
    relu,
    sigmoid,
    slice_channels,
    slice_interleave,
    softmax_channels,
    sub,
)

BOUNDARY_MODES = ("none", "semantic", "binary")


@dataclass
class ModelConfig:
    num_classes: int = 5
    encoder_widths: Tuple[int, int, int, int] = (16, 32, 64, 96)
    decoder_width: int = 64
    use_bsf: bool = False
    use_sgf: bool = False
    boundary_mode: str = "none"

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.encoder_widths) != 4 or any(w < 1 for w in self.encoder_widths):
            raise ValueError(
                f"encoder_widths must be 4 positive ints, got {self.encoder_widths}"
            )
        if self.decoder_width < 1:
            raise ValueError("decoder_width must be >= 1")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(
                f"boundary_mode must be one of {BOUNDARY_MODES}, got "
                f"{self.boundary_mode!r}"
            )
        if (self.use_bsf or self.use_sgf) and self.boundary_mode == "none":
            raise ValueError("use_bsf/use_sgf require a boundary head (bcrm)")

    @property
    def boundary_channels(self) -> int:
        if self.boundary_mode == "none":
            return 0
        return self.num_classes if self.boundary_mode == "semantic" else 1


@dataclass
class ForwardOutputs:
    seg_logits: Tensor
    q_fuse: Optional[Tensor] = None
    q_last: Optional[Tensor] = None
    q_refine: Optional[Tensor] = None
    q_gradm: Optional[Tensor] = None

    def boundary_heads(self) -> List[Tensor]:
        """The supervised boundary prediction set Q."""
        heads = [q for q in (self.q_fuse, self.q_last) if q is not None]
        if self.q_refine is not None:
            heads.append(self.q_refine)
        return heads


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # per-layer stream keyed by name, so adding/removing heads does not
    # shift the init of unrelated layers
    return np.random.default_rng((seed, zlib.crc32(name.encode("utf-8"))))


class Conv2dLayer:
    def __init__(
        self,
        name: str,
        c_in: int,
        c_out: int,
        k: int,
        *,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
        seed: int = 0,
    ):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (c_in // groups) * k * k
        bound = float(np.sqrt(6.0 / fan_in))
        rng = _layer_rng(seed, name)
        w = rng.uniform(-bound, bound, size=(c_out, c_in // groups, k, k))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = (
            Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
            if bias
            else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )

    def params(self) -> List[Tuple[str, Tensor]]:
        out = [(f"{self.name}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias))
        return out


class BatchNorm2dLayer:
    def __init__(self, name: str, channels: int, momentum: float, eps: float = 1e-5):
        self.name = name
        self.state = BatchNormState(channels, momentum=momentum, eps=eps)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.state, train)

    def params(self) -> List[Tuple[str, Tensor]]:
        return [(f"{self.name}.gamma", self.state.gamma), (f"{self.name}.beta", self.state.beta)]

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [
            (f"{self.name}.running_mean", self.state.running_mean),
            (f"{self.name}.running_var", self.state.running_var),
        ]


class ConvBNRelu:
    def __init__(self, name, c_in, c_out, k, *, stride=1, padding=0, seed, bn_momentum):
        self.conv = Conv2dLayer(
            f"{name}.conv", c_in, c_out, k, stride=stride, padding=padding,
            bias=False, seed=seed,
        )
        self.bn = BatchNorm2dLayer(f"{name}.bn", c_out, momentum=bn_momentum)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return relu(self.bn(self.conv(x), train))

    def params(self):
        return self.conv.params() + self.bn.params()


class SegBoundaryNet:
    """Encoder + segmentation decoder + optional boundary head and fusion."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, bn_momentum: float = 0.1):
        self.cfg = cfg
        self.seed = seed
        w1, w2, w3, w4 = cfg.encoder_widths
        dec = cfg.decoder_width
        cb = cfg.boundary_channels
        mk = lambda name, ci, co, k, s=1, p=0: ConvBNRelu(
            name, ci, co, k, stride=s, padding=p, seed=seed, bn_momentum=bn_momentum
        )

        self.enc = [
            (mk("enc.s1a", 3, w1, 3, 2, 1), mk("enc.s1b", w1, w1, 3, 1, 1)),
            (mk("enc.s2a", w1, w2, 3, 2, 1), mk("enc.s2b", w2, w2, 3, 1, 1)),
            (mk("enc.s3a", w2, w3, 3, 2, 1), mk("enc.s3b", w3, w3, 3, 1, 1)),
            (mk("enc.s4a", w3, w4, 3, 2, 1), mk("enc.s4b", w4, w4, 3, 1, 1)),
        ]

        self.context = mk("dec.context", w4, dec, 3, 1, 1)
        bneck_in = dec + (cb if cfg.use_bsf else 0)
        self.bottleneck = mk("dec.bottleneck", bneck_in, dec, 1)
        self.fuse_low = mk("dec.fuse_low", dec + w2, dec, 3, 1, 1)
        self.classifier = Conv2dLayer("dec.classifier", dec, cfg.num_classes, 1, seed=seed)

        self.side_pre: List[ConvBNRelu] = []
        self.side_post: List[Conv2dLayer] = []
        self.head_fuse: Optional[Conv2dLayer] = None
        self.sgf_conv: Optional[Conv2dLayer] = None
        if cb:
            widths = (w1, w2, w3, w4)
            for i in range(4):
                out_ch = cb if i == 3 else 1
                self.side_pre.append(mk(f"bdry.side{i + 1}.pre", widths[i], out_ch, 1))
                self.side_post.append(
                    Conv2dLayer(
                        f"bdry.side{i + 1}.post", out_ch, out_ch, 3, padding=1, seed=seed
                    )
                )
            self.head_fuse = Conv2dLayer(
                "bdry.fuse", 4 * cb, cb, 1, groups=cb, seed=seed
            )
            if cfg.use_sgf:
                self.sgf_conv = Conv2dLayer(
                    "sgf.conv", 2 * cb, cb, 3, padding=1, groups=cb, seed=seed
                )

    # -- parameter plumbing ---------------------------------------------------
    def _modules(self):
        for a, b in self.enc:
            yield a
            yield b
        yield self.context
        yield self.bottleneck
        yield self.fuse_low
        yield self.classifier
        for m in self.side_pre:
            yield m
        for m in self.side_post:
            yield m
        if self.head_fuse is not None:
            yield self.head_fuse
        if self.sgf_conv is not None:
            yield self.sgf_conv

    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for m in self._modules():
            for name, p in m.params():
                out[name] = p
        return out

    def bn_states(self) -> Dict[str, BatchNormState]:
        out: Dict[str, BatchNormState] = {}
        for m in self._modules():
            if isinstance(m, ConvBNRelu):
                out[m.bn.name] = m.bn.state
        return out

    def bn_buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, state in self.bn_states().items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    # -- forward pieces ---------------------------------------------------------
    def encoder_forward(self, image: Tensor, train: bool) -> List[Tensor]:
        n, c, h, w = image.data.shape
        if c != 3:
            raise ShapeError(f"encoder expects 3 input channels, got {c}")
        if h % 16 or w % 16:
            raise ShapeError(f"input size {h}x{w} must be divisible by 16")
        feats = []
        x = image
        for a, b in self.enc:
            x = b(a(x, train), train)
            feats.append(x)
        return feats

    def boundary_head_forward(
        self, feats: List[Tensor], train: bool
    ) -> Tuple[Tensor, Tensor]:
        cb = self.cfg.boundary_channels
        h2 = feats[0].data.shape[2]  # stride-2 resolution = half input
        w2 = feats[0].data.shape[3]
        sides = []
        for i in range(4):
            s = self.side_pre[i](feats[i], train)
            s = bilinear_resize(s, h2, w2)
            s = self.side_post[i](s)
            sides.append(s)
        s1, s2, s3, s4 = sides
        parts = []
        for c in range(cb):
            parts.extend([slice_channels(s4, c, c + 1), s1, s2, s3])
        fused = self.head_fuse(concat_channels(parts))
        q_fuse = sigmoid(bilinear_resize(fused, 2 * h2, 2 * w2))
        q_last = sigmoid(bilinear_resize(s4, 2 * h2, 2 * w2))
        return q_fuse, q_last

    def seg_head_forward(
        self, feats: List[Tensor], boundary: Optional[Tensor], train: bool
    ) -> Tensor:
        if self.cfg.use_bsf and boundary is None:
            raise ShapeError("seg head needs a boundary map when use_bsf is on")
        f2, f4 = feats[1], feats[3]
        h16, w16 = f4.data.shape[2], f4.data.shape[3]
        x = self.context(f4, train)
        if self.cfg.use_bsf:
            bdown = bilinear_resize(boundary.detach(), h16, w16)
            x = concat_channels([x, bdown])
        x = self.bottleneck(x, train)
        h4, w4 = f2.data.shape[2], f2.data.shape[3]
        x = bilinear_resize(x, h4, w4)
        x = self.fuse_low(concat_channels([x, f2]), train)
        logits = self.classifier(x)
        return bilinear_resize(logits, 4 * h4, 4 * w4)

    def spatial_gradient(self, seg_logits: Tensor) -> Tensor:
        """Per-channel |mask - local mean| of the softmax mask."""
        m = softmax_channels(seg_logits)
        return abs_(sub(m, avg_pool_3x3_same(m)))

    def sgf_refine(self, q_fuse: Tensor, q_gradm: Tensor) -> Tensor:
        if q_fuse.data.shape != q_gradm.data.shape:
            raise ShapeError(
                f"sgf_refine: boundary {q_fuse.shape} and gradient "
                f"{q_gradm.shape} shapes must match"
            )
        return sigmoid(self.sgf_conv(slice_interleave(q_fuse, q_gradm)))

    def forward(self, image: Tensor, train: bool) -> ForwardOutputs:
        feats = self.encoder_forward(image, train)
        q_fuse = q_last = q_refine = q_gradm = None
        if self.cfg.boundary_channels:
            q_fuse, q_last = self.boundary_head_forward(feats, train)
        # BSF consumes the head's fused map; the SGF-refined map depends on
        # the decoder output, so feeding it back in would be circular.
        seg_logits = self.seg_head_forward(
            feats, q_fuse if self.cfg.use_bsf else None, train
        )
        if self.cfg.use_sgf:
            grad_full = self.spatial_gradient(seg_logits)
            q_gradm = (
                channel_max(grad_full)
                if self.cfg.boundary_mode == "binary"
                else grad_full
            )
            q_refine = self.sgf_refine(q_fuse, q_gradm)
        return ForwardOutputs(
            seg_logits=seg_logits,
            q_fuse=q_fuse,
            q_last=q_last,
            q_refine=q_refine,
            q_gradm=q_gradm,
        )

