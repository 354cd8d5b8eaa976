"""Tokenization and the trainable text encoder producing (per-token, pooled)
embeddings from the instruction history.

The encoder is a single-layer bidirectional GRU over learned token
embeddings; the pooled sentence vector is the masked mean of per-token
hidden states. After the l1 pretraining phase the encoder is frozen and its
outputs are constants for the rest of training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import data
from .autodiff import Tensor
from .nn import Embedding, Module, Parameter

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SEP_TELLER, SEP_DRAWER = "<teller>", "<drawer>"
SPECIALS = (PAD, UNK, BOS, EOS, SEP_TELLER, SEP_DRAWER)

DEFAULT_L_MAX = 32


class Vocabulary:
    """Dense token -> id map; PAD is always id 0."""

    def __init__(self, tokens):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        assert self.ids[PAD] == 0

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token):
        return self.ids.get(token, self.ids[UNK])

    def save(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_default_vocab():
    words = ["add", "a", "the", "at", "center", "and", "it", "to", "of", "left", "right", "in", "front", "behind"]
    words += list(data.COLORS) + list(data.SHAPES)
    return Vocabulary(list(SPECIALS) + words)


def tokenize(vocab, history, current, l_max=DEFAULT_L_MAX):
    """Token ids: BOS + (<teller> + turn)* + <teller> + current + EOS, padded.

    Over-length sequences drop whole oldest history turns first; if the
    current turn alone still overflows, its leading tokens are trimmed.
    Unknown words map to UNK.
    """
    if not current:
        raise ValueError("tokenize: current instruction is empty")
    history = list(history)

    def assemble(hist):
        toks = [BOS]
        for turn in hist:
            toks.append(SEP_TELLER)
            toks.extend(turn.split())
        toks.append(SEP_TELLER)
        toks.extend(current.split())
        toks.append(EOS)
        return toks

    toks = assemble(history)
    while len(toks) > l_max and history:
        history = history[1:]
        toks = assemble(history)
    if len(toks) > l_max:
        toks = [BOS] + toks[len(toks) - l_max + 1:]
    ids = [vocab.id_of(t) for t in toks]
    ids += [vocab.ids[PAD]] * (l_max - len(ids))
    return np.asarray(ids, dtype=np.int64)


class GRUDirection(Module):
    """One GRU direction; PAD steps leave the hidden state untouched."""

    def __init__(self, rng, in_dim, hidden, dtype=np.float32):
        super().__init__()
        std_x = 1.0 / np.sqrt(in_dim)
        std_h = 1.0 / np.sqrt(hidden)
        self.w_x = Parameter(rng.standard_normal((in_dim, 3 * hidden)) * std_x, dtype=dtype)
        self.w_h = Parameter(rng.standard_normal((hidden, 3 * hidden)) * std_h, dtype=dtype)
        self.bias = Parameter(np.zeros(3 * hidden), dtype=dtype)
        self.hidden = hidden

    def forward(self, emb, mask, reverse=False):
        """emb: [B, L, E]; mask: [B, L] float; returns [B, L, hidden]."""
        b, l, _ = emb.shape
        hdim = self.hidden
        h = Tensor(np.zeros((b, hdim), dtype=emb.dtype))
        order = range(l - 1, -1, -1) if reverse else range(l)
        outs = [None] * l
        for t in order:
            x_t = emb[:, t, :]
            m_t = Tensor(mask[:, t:t + 1].astype(emb.dtype))
            gates = ad.matmul(x_t, self.w_x) + self.bias
            hg = ad.matmul(h, self.w_h)
            z = ad.sigmoid(gates[:, 0:hdim] + hg[:, 0:hdim])
            r = ad.sigmoid(gates[:, hdim:2 * hdim] + hg[:, hdim:2 * hdim])
            n = ad.tanh(gates[:, 2 * hdim:] + r * hg[:, 2 * hdim:])
            h_new = n + z * (h - n)
            h = m_t * h_new + (1.0 - m_t) * h
            outs[t] = ad.reshape(h, (b, 1, hdim))
        return ad.concat(outs, axis=1)


class TextEncoder(Module):
    """f_text: token ids -> (per-token embeddings e, pooled sentence vector)."""

    def __init__(self, rng, vocab_size, emb_dim=64, dtype=np.float32):
        super().__init__()
        if emb_dim % 2 != 0:
            raise ValueError("emb_dim must be even (bidirectional halves)")
        self.embedding = Embedding(rng, vocab_size, emb_dim, dtype=dtype)
        self.fwd = GRUDirection(rng, emb_dim, emb_dim // 2, dtype=dtype)
        self.bwd = GRUDirection(rng, emb_dim, emb_dim // 2, dtype=dtype)
        self.emb_dim = emb_dim
        self.frozen = False

    def forward(self, token_ids):
        """token_ids: int array [B, L]. Returns (e, ebar, mask).

        e: [B, L, E] with PAD rows exactly zero; ebar: [B, E] masked mean.
        """
        token_ids = np.asarray(token_ids)
        if token_ids.ndim == 1:
            token_ids = token_ids[None]
        mask = (token_ids != 0).astype(np.float64)
        if np.any(mask.sum(axis=1) == 0):
            raise ValueError("encode_text: an input row is entirely PAD")
        emb = self.embedding(token_ids)
        hf = self.fwd(emb, mask)
        hb = self.bwd(emb, mask, reverse=True)
        e = ad.concat([hf, hb], axis=2)
        m = Tensor(mask[:, :, None].astype(e.dtype))
        e = e * m
        counts = Tensor(mask.sum(axis=1, keepdims=True).astype(e.dtype))
        ebar = e.sum(axis=1) / counts
        return e, ebar, mask.astype(bool)

    def trainable_parameters(self):
        return [] if self.frozen else self.parameters()


def freeze_text(encoder):
    """Freeze f_text: its parameters stop receiving gradient updates."""
    encoder.frozen = True
    for p in encoder.parameters():
        p.requires_grad = False
    encoder.eval()
    return encoder


def encode_batch(encoder, token_ids):
    """Frozen-encoder convenience: numpy (e, ebar, mask) without a graph."""
    with ad.no_grad():
        e, ebar, mask = encoder(token_ids)
    return e.data, ebar.data, mask


class PretrainModel(Module):
    """f_image + f_fusion for the l1 pretraining phase.

    f_fusion is a source-target attention over the instruction embeddings
    (queries come straight from image features) followed by the residual
    gating structure; no noise path is involved.
    """

    def __init__(self, rng, gen_cfg, dtype=np.float32):
        super().__init__()
        from .generator import ImageEncoder, SemanticSynthesis, SourceTargetAttention

        self.f_image = ImageEncoder(rng, gen_cfg.c_h, dtype=dtype)
        self.sta = SourceTargetAttention(rng, gen_cfg.emb_dim, gen_cfg.c_h, gen_cfg.d_model,
                                         gen_cfg.n_heads, dtype=dtype)
        self.fusion = SemanticSynthesis(rng, gen_cfg.c_h, 0, gen_cfg.d_model, gen_cfg.c_mp,
                                        gen_cfg.n_spade_blocks, dtype=dtype)

    def fuse(self, x_src, e, ebar, mask):
        if not isinstance(x_src, Tensor):
            x_src = Tensor(np.asarray(x_src, dtype=np.float32))
        h = self.f_image(x_src)
        g = self.sta(e, ebar, mask, h)
        fused, _ = self.fusion(h, None, g)
        return fused

    def forward(self, x_src, x_tgt, e, ebar, mask):
        if not isinstance(x_tgt, Tensor):
            x_tgt = Tensor(np.asarray(x_tgt, dtype=np.float32))
        target_feat = self.f_image(x_tgt)
        fused = self.fuse(x_src, e, ebar, mask)
        return target_feat, fused


def pretrain_step(model, encoder, x_src, tokens, x_tgt):
    """Mean l1 distance between target features and fused source features.

    Gradients flow into f_text, f_image and f_fusion. A non-finite
    per-sample loss raises with the offending batch index.
    """
    e, ebar, mask = encoder(tokens)
    target_feat, fused = model(
        Tensor(np.asarray(x_src, dtype=np.float32)),
        Tensor(np.asarray(x_tgt, dtype=np.float32)),
        e, ebar, mask,
    )
    diff = ad.tabs(target_feat - fused)
    per_sample = diff.mean(axis=(1, 2, 3))
    bad = np.flatnonzero(~np.isfinite(per_sample.data))
    if bad.size:
        raise FloatingPointError(f"pretrain loss non-finite at batch index {int(bad[0])}")
    return per_sample.mean()
