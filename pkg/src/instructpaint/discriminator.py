"""Text-conditioned U-Net discriminator.

A shared strided-conv encoder feeds three heads: a per-pixel unconditional
decoder (local realness map, same spatial shape as the input), a global
text-conditional projection head on the pooled feature difference between
target and source, and an auxiliary added-object classifier on the same
difference. Every layer is spectrally normalized. The source image is always
encoded without gradient tracking; it is conditioning context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data
from .autodiff import Tensor
from .generator import GAIN, lrelu
from .nn import Conv2d, Linear, Module


@dataclass
class DiscriminatorOutput:
    d_local: object  # [B, 1, S, S] logits
    d_global: object  # [B] scalar logits
    aux_logits: object  # [B, n_classes]


class UNetEncoder(Module):
    """Three stride-2 scales; returns the pyramid, deepest last."""

    def __init__(self, rng, base, dtype=np.float32):
        super().__init__()
        self.c1 = Conv2d(rng, 3, base, 3, stride=2, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.c2 = Conv2d(rng, base, base * 2, 3, stride=2, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.c3 = Conv2d(rng, base * 2, base * 4, 3, stride=2, padding=1, sn=True, gain=GAIN, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ad.ShapeError(f"discriminator encoder expects [B, 3, S, S], got {x.shape}")
        e1 = lrelu(self.c1(x))
        e2 = lrelu(self.c2(e1))
        e3 = lrelu(self.c3(e2))
        return [e1, e2, e3]


class UNetLocalHead(Module):
    """Decoder with additive skip projections; per-pixel logits."""

    def __init__(self, rng, base, dtype=np.float32):
        super().__init__()
        self.up2 = Conv2d(rng, base * 4, base * 2, 3, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.skip2 = Conv2d(rng, base * 2, base * 2, 1, bias=False, sn=True, dtype=dtype)
        self.up1 = Conv2d(rng, base * 2, base, 3, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.skip1 = Conv2d(rng, base, base, 1, bias=False, sn=True, dtype=dtype)
        self.up0 = Conv2d(rng, base, base // 2, 3, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.out = Conv2d(rng, base // 2, 1, 1, dtype=dtype, sn=True)

    def forward(self, pyramid):
        e1, e2, e3 = pyramid
        d2 = lrelu(self.up2(ad.upsample2x(e3)) + self.skip2(e2))
        d1 = lrelu(self.up1(ad.upsample2x(d2)) + self.skip1(e1))
        d0 = lrelu(self.up0(ad.upsample2x(d1)))
        return self.out(d0)


class GlobalHead(Module):
    """Projection discriminator on the pooled feature difference.

    d_global = psi(delta) + <V_proj ebar, delta'> with delta' the bias-free
    penultimate feature, so a zero difference is text-independent.
    """

    def __init__(self, rng, feat_dim, emb_dim, dtype=np.float32):
        super().__init__()
        self.pre = Linear(rng, feat_dim, feat_dim, bias=False, sn=True, gain=GAIN, dtype=dtype)
        self.psi = Linear(rng, feat_dim, 1, sn=True, dtype=dtype)
        self.proj = Linear(rng, emb_dim, feat_dim, bias=False, sn=True, dtype=dtype)

    def forward(self, phi_tgt, phi_src, ebar):
        delta = phi_tgt - phi_src
        dprime = lrelu(self.pre(delta))
        psi = ad.reshape(self.psi(dprime), (dprime.shape[0],))
        proj = (self.proj(ebar) * dprime).sum(axis=1)
        return psi + proj


class Discriminator(Module):
    def __init__(self, rng, base=32, emb_dim=64, n_classes=data.N_CLASSES, dtype=np.float32):
        super().__init__()
        self.encoder = UNetEncoder(rng, base, dtype=dtype)
        self.local_head = UNetLocalHead(rng, base, dtype=dtype)
        self.global_head = GlobalHead(rng, base * 4, emb_dim, dtype=dtype)
        self.aux_head = Linear(rng, base * 4, n_classes, sn=True, dtype=dtype)

    def pooled(self, pyramid):
        # Average-pooled deepest features, rescaled by the pool size so the
        # 1-Lipschitz heads see sum-pooled magnitudes: a one-object edit moves
        # roughly one deep cell, and dividing by H*W would shrink the head
        # inputs (hence every global/aux logit) below the hinge margin.
        deepest = pyramid[-1]
        pool_size = float(deepest.shape[2] * deepest.shape[3])
        return deepest.mean(axis=(2, 3)) * pool_size

    def encode_pair(self, x_tgt, x_src, phi_src=None):
        """Encode target (on-graph) and source (gradient-free).

        Returns (pyramid of x_tgt, phi_tgt, phi_src). A precomputed pooled
        source feature can be passed to skip re-encoding.
        """
        if not isinstance(x_tgt, Tensor):
            x_tgt = Tensor(x_tgt)
        if phi_src is None:
            src_shape = x_src.shape if isinstance(x_src, np.ndarray) else x_src.shape
            if tuple(x_tgt.shape) != tuple(src_shape):
                raise ad.ShapeError(f"target/source shape mismatch: {x_tgt.shape} vs {src_shape}")
            with ad.no_grad():
                src = x_src.detach() if isinstance(x_src, Tensor) else Tensor(x_src)
                phi_src = self.pooled(self.encoder(src)).data
        pyr_tgt = self.encoder(x_tgt)
        return pyr_tgt, self.pooled(pyr_tgt), Tensor(np.asarray(phi_src))

    def forward(self, x_tgt, x_src, ebar):
        """Returns DiscriminatorOutput; x_src is encoded without gradients."""
        if not isinstance(ebar, Tensor):
            ebar = Tensor(ebar)
        pyr_tgt, phi_tgt, phi_src = self.encode_pair(x_tgt, x_src)
        delta = phi_tgt - phi_src
        return DiscriminatorOutput(
            d_local=self.local_head(pyr_tgt),
            d_global=self.global_head(phi_tgt, phi_src, ebar),
            aux_logits=self.aux_head(delta),
        )

    discriminate = forward

    def realness_scalar(self, x_tgt, x_src, ebar):
        """Scalar per-sample score d_global + mean(d_local); R1 target."""
        out = self.forward(x_tgt, x_src, ebar)
        return out.d_global + out.d_local.mean(axis=(1, 2, 3))
