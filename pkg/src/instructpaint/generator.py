"""Generator: image encoder, text-conditioned broadcast, relational feature
extractor with source-target attention over instruction tokens, gated
spatially-adaptive synthesis, and an upsampling decoder.

All affine/conv layers are spectrally normalized. Feature maps are
[B, C, H, W]; the fused spatial grid is image_size / 4 per side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, Linear, Module, ModuleList, Parameter, lrelu_gain
from .norms import adain, instance_norm


@dataclass
class GenConfig:
    n_z: int = 32
    emb_dim: int = 64
    c_h: int = 64
    c_u: int = 32
    c_r: int = 64
    height: int = 8
    width: int = 8
    d_model: int = 64
    n_heads: int = 8
    n_spade_blocks: int = 2
    image_size: int = 32
    c_mp: int = 32  # gate pre-activation channels
    disc_base: int = 32  # discriminator stem width

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.height != self.width:
            raise ValueError("fused feature grid must be square")
        if self.image_size != 4 * self.height:
            raise ValueError("image_size must be 4x the fused grid (two downsamplings)")


GAIN = lrelu_gain(0.2)


def lrelu(x):
    return ad.leaky_relu(x, 0.2)


class ImageEncoder(Module):
    """[B, 3, S, S] -> [B, C_h, S/4, S/4] via two strided convolutions."""

    def __init__(self, rng, c_h, dtype=np.float32):
        super().__init__()
        self.stem = Conv2d(rng, 3, c_h // 4, 3, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.down1 = Conv2d(rng, c_h // 4, c_h // 2, 3, stride=2, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.down2 = Conv2d(rng, c_h // 2, c_h, 3, stride=2, padding=1, sn=True, gain=GAIN, dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ad.ShapeError(f"image encoder expects [B, 3, S, S], got {x.shape}")
        y = lrelu(self.stem(x))
        y = lrelu(self.down1(y))
        return lrelu(self.down2(y))


class ConditioningAugmentor(Module):
    """Reparameterized Gaussian sample of the text condition."""

    def __init__(self, rng, emb_dim, dtype=np.float32):
        super().__init__()
        self.mu = Linear(rng, emb_dim, emb_dim, sn=True, dtype=dtype)
        self.logvar = Linear(rng, emb_dim, emb_dim, sn=True, gain=0.1, dtype=dtype)

    def forward(self, ebar, eps):
        mu = self.mu(ebar)
        logvar = self.logvar(ebar)
        if not isinstance(eps, Tensor):
            eps = Tensor(np.asarray(eps, dtype=mu.dtype))
        c = mu + ad.texp(logvar * 0.5) * eps
        return c, mu, logvar


class TextBroadcast(Module):
    """[c, z] -> [B, C_u, H, W], identical at every spatial position."""

    def __init__(self, rng, emb_dim, n_z, c_u, height, width, dtype=np.float32):
        super().__init__()
        self.proj = Linear(rng, emb_dim + n_z, c_u, sn=True, dtype=dtype)
        self.height = height
        self.width = width

    def forward(self, c, z):
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=c.dtype))
        u = self.proj(ad.concat([c, z], axis=1))  # affine; nonlinearity lives downstream
        return ad.spatial_broadcast(u, self.height, self.width)


class AxisRelation(Module):
    """Pairwise relation network along one pooled axis."""

    def __init__(self, rng, c_h, c_u, out_dim, dtype=np.float32):
        super().__init__()
        in_dim = 2 * c_h + c_u
        self.fc1 = Linear(rng, in_dim, out_dim * 2, sn=True, gain=GAIN, dtype=dtype)
        self.fc2 = Linear(rng, out_dim * 2, out_dim, sn=True, dtype=dtype)

    def forward(self, pooled_h, pooled_u, pos):
        """pooled_h: [B, N, C_h]; pooled_u: [B, N, C_u]; pos: [N, C_h].

        Returns [B, N, out_dim]: sum over partners k of F([a_i, a_k, u_i]).
        """
        b, n, c_h = pooled_h.shape
        a = pooled_h + pos
        a_i = ad.expand(ad.reshape(a, (b, n, 1, c_h)), (b, n, n, c_h))
        a_k = ad.expand(ad.reshape(a, (b, 1, n, c_h)), (b, n, n, c_h))
        u_i = ad.expand(ad.reshape(pooled_u, (b, n, 1, pooled_u.shape[2])), (b, n, n, pooled_u.shape[2]))
        pair = ad.concat([a_i, a_k, u_i], axis=3)
        rel = self.fc2(lrelu(self.fc1(pair)))
        return rel.sum(axis=2)


class RelationalExtractor(Module):
    """Width/height pooled pairwise relations fused to [B, C_r, H, W]."""

    def __init__(self, rng, cfg: GenConfig, dtype=np.float32):
        super().__init__()
        if cfg.c_r % 2 != 0:
            raise ValueError("c_r must be even")
        half = cfg.c_r // 2
        self.pos_w = Parameter(rng.standard_normal((cfg.height, cfg.c_h)) * 0.02, dtype=dtype)
        self.pos_h = Parameter(rng.standard_normal((cfg.width, cfg.c_h)) * 0.02, dtype=dtype)
        self.rel_w = AxisRelation(rng, cfg.c_h, cfg.c_u, half, dtype=dtype)
        self.rel_h = AxisRelation(rng, cfg.c_h, cfg.c_u, half, dtype=dtype)
        self.mix = Conv2d(rng, cfg.c_r, cfg.c_r, 1, sn=True, dtype=dtype)

    def forward(self, h, u):
        if h.shape[2:] != u.shape[2:]:
            raise ad.ShapeError(f"relational extractor: h grid {h.shape} vs u grid {u.shape}")
        b, c_h, hh, ww = h.shape
        # Width-wise pooling: one vector per row i (mean over columns j).
        h_w = ad.transpose(h.mean(axis=3), (0, 2, 1))  # [B, H, C_h]
        u_w = ad.transpose(u.mean(axis=3), (0, 2, 1))
        r_w = self.rel_w(h_w, u_w, self.pos_w)  # [B, H, half]
        # Height-wise pooling: one vector per column j (mean over rows i).
        h_h = ad.transpose(h.mean(axis=2), (0, 2, 1))  # [B, W, C_h]
        u_h = ad.transpose(u.mean(axis=2), (0, 2, 1))
        r_h = self.rel_h(h_h, u_h, self.pos_h)  # [B, W, half]
        half = r_w.shape[2]
        # r[(i, j)] = [r_h[j], r_w[i]] -> channels-first maps.
        r_h_map = ad.expand(ad.reshape(ad.transpose(r_h, (0, 2, 1)), (b, half, 1, ww)), (b, half, hh, ww))
        r_w_map = ad.expand(ad.reshape(ad.transpose(r_w, (0, 2, 1)), (b, half, hh, 1)), (b, half, hh, ww))
        return self.mix(ad.concat([r_h_map, r_w_map], axis=1))


class SourceTargetAttention(Module):
    """Multi-head scaled dot-product attention: relational visual queries
    attend over word embeddings plus the sentence embedding."""

    def __init__(self, rng, emb_dim, c_r, d_model, n_heads, dtype=np.float32):
        super().__init__()
        self.w_k = Linear(rng, emb_dim, d_model, bias=False, sn=True, dtype=dtype)
        self.w_v = Linear(rng, emb_dim, d_model, bias=False, sn=True, dtype=dtype)
        self.w_q = Linear(rng, c_r, d_model, bias=False, sn=True, dtype=dtype)
        self.n_heads = n_heads
        self.d_model = d_model

    def forward(self, e, ebar, mask, r):
        """e: [B, L, E]; ebar: [B, E]; mask: bool [B, L]; r: [B, C_r, H, W]."""
        b, l, _ = e.shape
        src = ad.concat([e, ad.reshape(ebar, (b, 1, ebar.shape[1]))], axis=1)
        full_mask = np.concatenate([np.asarray(mask, dtype=bool), np.ones((b, 1), dtype=bool)], axis=1)
        return self.attend(src, full_mask, r)

    def attend(self, src, src_mask, r):
        b, s, _ = src.shape
        _, c_r, hh, ww = r.shape
        n, dh = self.n_heads, self.d_model // self.n_heads
        src_mask = np.asarray(src_mask, dtype=bool)
        if np.any(src_mask.sum(axis=1) == 0):
            raise ValueError("attention: a sample has zero unmasked source rows")
        k = self._heads(self.w_k(src), b, s, n, dh)  # [B, n, S, dh]
        v = self._heads(self.w_v(src), b, s, n, dh)
        rq = ad.transpose(ad.reshape(r, (b, c_r, hh * ww)), (0, 2, 1))  # [B, HW, C_r]
        q = self._heads(self.w_q(rq), b, hh * ww, n, dh)  # [B, n, HW, dh]
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        bias = np.where(src_mask, 0.0, -np.inf).astype(scores.dtype)[:, None, None, :]
        att = ad.softmax(scores + Tensor(bias), axis=-1)  # [B, n, HW, S]
        out = ad.matmul(att, v)  # [B, n, HW, dh]
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, hh * ww, self.d_model))
        return ad.transpose(out, (0, 2, 1)).reshape(b, self.d_model, hh, ww)

    @staticmethod
    def _heads(x, b, s, n, dh):
        return ad.transpose(ad.reshape(x, (b, s, n, dh)), (0, 2, 1, 3))


class SpadeNorm(Module):
    """Parameter-free instance norm modulated by scale/shift maps predicted
    from the gate pre-activation."""

    def __init__(self, rng, channels, mod_channels, dtype=np.float32):
        super().__init__()
        hidden = max(mod_channels // 2, 8)
        self.shared = Conv2d(rng, mod_channels, hidden, 3, padding=1, sn=True, gain=GAIN, dtype=dtype)
        self.gamma = Conv2d(rng, hidden, channels, 3, padding=1, sn=True, gain=0.1, dtype=dtype)
        self.beta = Conv2d(rng, hidden, channels, 3, padding=1, sn=True, gain=0.1, dtype=dtype)

    def forward(self, x, mod):
        xhat = instance_norm(x)
        ctx = lrelu(self.shared(mod))
        return xhat * (1.0 + self.gamma(ctx)) + self.beta(ctx)


class SpadeResBlock(Module):
    def __init__(self, rng, channels, mod_channels, dtype=np.float32):
        super().__init__()
        self.norm1 = SpadeNorm(rng, channels, mod_channels, dtype=dtype)
        # conv1's output is instance-normalized next, so a bias would be dead.
        self.conv1 = Conv2d(rng, channels, channels, 3, padding=1, bias=False, sn=True, gain=GAIN, dtype=dtype)
        self.norm2 = SpadeNorm(rng, channels, mod_channels, dtype=dtype)
        self.conv2 = Conv2d(rng, channels, channels, 3, padding=1, sn=True, dtype=dtype)

    def forward(self, x, mod):
        y = self.conv1(lrelu(self.norm1(x, mod)))
        y = self.conv2(lrelu(self.norm2(y, mod)))
        return x + y


class SemanticSynthesis(Module):
    """Text-image residual gating: h_out = w_gate*(h .* m) + w_res*(h_res .* (1-m))."""

    def __init__(self, rng, c_h, c_u, d_model, c_mp, n_blocks, dtype=np.float32):
        super().__init__()
        in_ch = c_h + c_u + d_model
        self.gate_pre = Conv2d(rng, in_ch, c_mp, 1, sn=True, gain=GAIN, dtype=dtype)
        self.gate_out = Conv2d(rng, c_mp, 1, 1, sn=True, dtype=dtype)
        self.blocks = ModuleList([SpadeResBlock(rng, c_h, c_mp, dtype=dtype) for _ in range(n_blocks)])
        self.w_gate = Parameter(np.asarray(1.0), dtype=dtype)
        self.w_res = Parameter(np.asarray(1.0), dtype=dtype)

    def forward(self, h, u, g):
        parts = [h] + ([u] if u is not None else []) + [g]
        m_p = self.gate_pre(ad.concat(parts, axis=1))
        m = ad.sigmoid(self.gate_out(m_p))  # [B, 1, H, W], broadcast over channels
        h_res = h
        for blk in self.blocks:
            h_res = blk(h_res, m_p)
        return self.w_gate * (h * m) + self.w_res * (h_res * (1.0 - m)), m


class AdainResBlock(Module):
    """Upsampling decoder block restyled by the sentence embedding."""

    def __init__(self, rng, c_in, c_out, emb_dim, dtype=np.float32):
        super().__init__()
        self.style1 = Linear(rng, emb_dim, 2 * c_in, dtype=dtype)
        # conv1 feeds an adaptive instance norm, which cancels any bias.
        self.conv1 = Conv2d(rng, c_in, c_out, 3, padding=1, bias=False, sn=True, gain=GAIN, dtype=dtype)
        self.style2 = Linear(rng, emb_dim, 2 * c_out, dtype=dtype)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, padding=1, sn=True, dtype=dtype)
        self.skip = Conv2d(rng, c_in, c_out, 1, bias=False, sn=True, dtype=dtype)
        self.c_in = c_in
        self.c_out = c_out

    def _restyle(self, x, style, channels):
        mean = style[:, :channels]
        std = ad.softplus(style[:, channels:]) + 1e-3
        return adain(x, mean, std)

    def forward(self, x, ebar):
        x = ad.upsample2x(x)
        y = self.conv1(lrelu(self._restyle(x, self.style1(ebar), self.c_in)))
        y = self.conv2(lrelu(self._restyle(y, self.style2(ebar), self.c_out)))
        return y + self.skip(x)


class Decoder(Module):
    """[B, C_h, H, W] -> [B, 3, 4H, 4W] image in (-1, 1)."""

    def __init__(self, rng, c_h, emb_dim, dtype=np.float32):
        super().__init__()
        self.block1 = AdainResBlock(rng, c_h, c_h // 2, emb_dim, dtype=dtype)
        self.block2 = AdainResBlock(rng, c_h // 2, c_h // 4, emb_dim, dtype=dtype)
        self.out = Conv2d(rng, c_h // 4, 3, 3, padding=1, sn=True, dtype=dtype)

    def forward(self, h_out, ebar):
        y = self.block1(h_out, ebar)
        y = self.block2(y, ebar)
        return ad.tanh(self.out(lrelu(y)))


class Generator(Module):
    def __init__(self, rng, cfg: GenConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.image_enc = ImageEncoder(rng, cfg.c_h, dtype=dtype)
        self.cond_aug = ConditioningAugmentor(rng, cfg.emb_dim, dtype=dtype)
        self.text_map = TextBroadcast(rng, cfg.emb_dim, cfg.n_z, cfg.c_u, cfg.height, cfg.width, dtype=dtype)
        self.relational = RelationalExtractor(rng, cfg, dtype=dtype)
        self.attention = SourceTargetAttention(rng, cfg.emb_dim, cfg.c_r, cfg.d_model, cfg.n_heads, dtype=dtype)
        self.synthesis = SemanticSynthesis(rng, cfg.c_h, cfg.c_u, cfg.d_model, cfg.c_mp, cfg.n_spade_blocks, dtype=dtype)
        self.decoder = Decoder(rng, cfg.c_h, cfg.emb_dim, dtype=dtype)

    def forward(self, x_src, e, ebar, mask, z, eps):
        """Full pipeline; returns (image, mu, logvar)."""
        if not isinstance(x_src, Tensor):
            x_src = Tensor(x_src)
        if not isinstance(e, Tensor):
            e = Tensor(e)
        if not isinstance(ebar, Tensor):
            ebar = Tensor(ebar)
        h = self.image_enc(x_src)
        c, mu, logvar = self.cond_aug(ebar, eps)
        u = self.text_map(c, z)
        r = self.relational(h, u)
        g = self.attention(e, ebar, mask, r)
        h_out, _ = self.synthesis(h, u, g)
        image = self.decoder(h_out, ebar)
        return image, mu, logvar

    generate = forward
