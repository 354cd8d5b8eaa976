"""Two-phase training orchestration.

Phase 1 pretrains the text encoder through an l1 feature-matching objective
(see `text.PretrainModel`); phase 2 runs alternating hinge-GAN updates over
teacher-forced turn samples with an EMA evaluation generator, checkpointing,
and a JSONL loss log. Batches sample (episode, turn) pairs i.i.d. from one
seeded generator stream, so a checkpoint (params + optimizer moments + RNG
state) resumes bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import data as mdata
from . import losses as L
from . import text as mtext
from .autodiff import Tensor
from .discriminator import Discriminator
from .generator import GenConfig, Generator
from .nn import converge_spectral_states, load_state_arrays, state_arrays


class NumericalError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    lr_d: float = 0.0004
    lr_g: float = 0.0001
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    ema_decay: float = 0.999
    trunc_threshold: float = 2.0
    input_noise_scale: float = 1.0 / 64.0
    batch_size: int = 8
    max_steps: int = 2000
    pretrain_steps: int = 500
    pretrain_lr: float = 0.001
    seed: int = 0
    teacher_forcing: bool = True
    checkpoint_every: int = 1000
    l_max: int = 32

    def __post_init__(self):
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")
        if self.trunc_threshold <= 0:
            raise ValueError("trunc_threshold must be positive")


class Adam:
    def __init__(self, named_params, lr, beta1=0.0, beta2=0.9, eps=1e-8):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def zero_grad(self):
        for _, p in self.named:
            p.zero_grad()

    def step(self):
        if self.lr == 0.0:
            self.t += 1
            return
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for n, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_tensors(self, prefix):
        out = {}
        for n, _ in self.named:
            out[f"{prefix}.m.{n}"] = self.m[n]
            out[f"{prefix}.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors, prefix):
        for n, _ in self.named:
            self.m[n] = tensors[f"{prefix}.m.{n}"].copy()
            self.v[n] = tensors[f"{prefix}.v.{n}"].copy()


def ema_update(theta_ema, named_params, decay):
    """theta_ema' = decay * theta_ema + (1 - decay) * theta, in place."""
    for name, p in named_params:
        target = theta_ema[name]
        if target.shape != p.data.shape:
            raise ValueError(f"ema_update: {name} shape {target.shape} != {p.data.shape}")
        target *= decay
        target += (1.0 - decay) * p.data
    return theta_ema


def truncate_noise(z, threshold, rng):
    """Resample components with |z_i| > threshold until all lie inside."""
    z = np.array(z, copy=True)
    mask = np.abs(z) > threshold
    while np.any(mask):
        z[mask] = rng.standard_normal(int(mask.sum()))
        mask = np.abs(z) > threshold
    return z


def add_input_noise(image, rng, scale):
    """image + Uniform(0, scale) elementwise; scale 0 is a no-op."""
    if scale == 0:
        return image
    return (image + rng.uniform(0.0, scale, size=image.shape)).astype(image.dtype)


def one_hot_labels(class_ids, n_classes=mdata.N_CLASSES):
    out = np.zeros((len(class_ids), n_classes), dtype=np.float32)
    out[np.arange(len(class_ids)), class_ids] = 1.0
    return out


class EmbeddingCache:
    """Frozen-encoder text embeddings for every (episode, turn)."""

    def __init__(self, encoder, vocab, episodes, l_max):
        self.e = {}
        self.ebar = {}
        self.mask = {}
        for ei, ep in enumerate(episodes):
            instructions = [t.instruction for t in ep.turns]
            for ti in range(len(instructions)):
                ids = mtext.tokenize(vocab, instructions[:ti], instructions[ti], l_max)
                e, ebar, mask = mtext.encode_batch(encoder, ids[None])
                self.e[(ei, ti)] = e[0].astype(np.float32)
                self.ebar[(ei, ti)] = ebar[0].astype(np.float32)
                self.mask[(ei, ti)] = mask[0]

    def batch(self, keys):
        e = np.stack([self.e[k] for k in keys])
        ebar = np.stack([self.ebar[k] for k in keys])
        mask = np.stack([self.mask[k] for k in keys])
        return e, ebar, mask


class GANTrainer:
    def __init__(self, gen_cfg: GenConfig, train_cfg: TrainConfig, loss_weights: L.LossWeights,
                 encoder, vocab, episodes, log_path=None, config_blob=None):
        self.gen_cfg = gen_cfg
        self.cfg = train_cfg
        self.lw = loss_weights
        self.encoder = encoder
        self.vocab = vocab
        self.episodes = episodes
        self.log_path = log_path
        self.config_blob = config_blob or {}
        init_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
        self.gen = Generator(init_rng, gen_cfg)
        self.disc = Discriminator(init_rng, base=gen_cfg.disc_base, emb_dim=gen_cfg.emb_dim)
        # Warm-started power iterations: sigma estimates are accurate from the
        # first step instead of drifting while u converges.
        converge_spectral_states(self.gen, 30)
        converge_spectral_states(self.disc, 30)
        self.rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 2]))
        self.opt_g = Adam(list(self.gen.named_parameters()), train_cfg.lr_g,
                          train_cfg.adam_beta1, train_cfg.adam_beta2)
        self.opt_d = Adam(list(self.disc.named_parameters()), train_cfg.lr_d,
                          train_cfg.adam_beta1, train_cfg.adam_beta2)
        self.ema = {n: p.data.copy() for n, p in self.gen.named_parameters()}
        self.step = 0
        self._cache = None
        self.pool = [(ei, ti) for ei, ep in enumerate(episodes) for ti in range(len(ep.turns))]
        self._eval_gen = None

    @property
    def cache(self):
        # Built lazily: only the training path needs the full embedding table,
        # and it must see the final (frozen) encoder weights.
        if self._cache is None:
            self._cache = EmbeddingCache(self.encoder, self.vocab, self.episodes, self.cfg.l_max)
        return self._cache

    # -- batching ---------------------------------------------------------

    def _source_image(self, ep_idx, turn_idx):
        ep = self.episodes[ep_idx]
        if turn_idx == 0:
            return ep.background
        if self.cfg.teacher_forcing:
            return ep.turns[turn_idx - 1].image
        # Free-running source: roll the current generator forward silently.
        images = self.rollout_episode(ep, mode="eval", generator=self.gen,
                                      truncate=False, stop_at=turn_idx)
        return images[turn_idx - 1]

    def sample_batch(self):
        idx = self.rng.integers(0, len(self.pool), size=self.cfg.batch_size)
        keys = [self.pool[int(i)] for i in idx]
        x_src = np.stack([self._source_image(ei, ti) for ei, ti in keys])
        x_tgt = np.stack([self.episodes[ei].turns[ti].image for ei, ti in keys])
        labels = one_hot_labels(
            [mdata.class_id(self.episodes[ei].turns[ti].added.shape,
                            self.episodes[ei].turns[ti].added.color) for ei, ti in keys]
        )
        e, ebar, mask = self.cache.batch(keys)
        return dict(x_src=x_src, x_tgt=x_tgt, labels=labels, e=e, ebar=ebar, mask=mask)

    # -- optimization -----------------------------------------------------

    def train_step(self, batch):
        cfg, lw = self.cfg, self.lw
        rng = self.rng
        bsz = batch["x_src"].shape[0]
        noise = cfg.input_noise_scale
        x_src = batch["x_src"].astype(np.float32)
        x_tgt = batch["x_tgt"].astype(np.float32)
        e, ebar, mask = batch["e"], batch["ebar"], batch["mask"]
        labels = batch["labels"]

        x_tgt_n = add_input_noise(x_tgt, rng, noise)
        x_src_n = add_input_noise(x_src, rng, noise)
        z = rng.standard_normal((bsz, self.gen_cfg.n_z)).astype(np.float32)
        eps = rng.standard_normal((bsz, self.gen_cfg.emb_dim)).astype(np.float32)

        # --- discriminator update ---
        with ad.no_grad():
            fake, _, _ = self.gen(x_src, e, ebar, mask, Tensor(z), eps)
        fake_n = add_input_noise(fake.data, rng, noise)

        self.opt_d.zero_grad()
        ebar_t = Tensor(ebar)
        pyr_t, phi_t, phi_s = self.disc.encode_pair(x_tgt_n, x_src_n)
        d_local_real = self.disc.local_head(pyr_t)
        d_global_real = self.disc.global_head(phi_t, phi_s, ebar_t)
        aux_logits = self.disc.aux_head(phi_t - phi_s)
        ebar_wrong = Tensor(np.roll(ebar, 1, axis=0))
        d_global_wrong = self.disc.global_head(phi_t, phi_s, ebar_wrong)
        pyr_f, phi_f, _ = self.disc.encode_pair(fake_n, x_src_n, phi_src=phi_s.data)
        d_local_fake = self.disc.local_head(pyr_f)
        d_global_fake = self.disc.global_head(phi_f, Tensor(phi_s.data), ebar_t)

        l_real_g = L.hinge_d_real(d_global_real)
        l_real_l = L.hinge_d_real(d_local_real)
        l_fake_g = L.hinge_d_fake(d_global_fake)
        l_fake_l = L.hinge_d_fake(d_local_fake)
        l_wrong_g = L.hinge_d_wrong(d_global_wrong)
        l_aux_d = L.aux_bce(aux_logits, labels)
        if lw.gamma > 0:
            phi_s_const = Tensor(phi_s.data)

            def score(xt):
                pyr = self.disc.encoder(xt)
                phi = self.disc.pooled(pyr)
                d_g = self.disc.global_head(phi, phi_s_const, ebar_t)
                d_l = self.disc.local_head(pyr).mean(axis=(1, 2, 3))
                return d_g + d_l

            l_r1 = L.r1_fd_estimator(score, x_tgt_n, lw.gamma, rng=rng,
                                     n_probes=lw.r1_probes, step=lw.r1_step)
        else:
            l_r1 = Tensor(np.asarray(0.0, dtype=np.float32))
        total_d = (l_real_g + 0.5 * (l_fake_g + l_wrong_g) + lw.beta * l_aux_d
                   + l_real_l + l_fake_l + l_r1)
        total_d.backward()
        self.opt_d.step()

        # --- generator update ---
        self.opt_g.zero_grad()
        self.disc.zero_grad()
        z2 = rng.standard_normal((bsz, self.gen_cfg.n_z)).astype(np.float32)
        eps2 = rng.standard_normal((bsz, self.gen_cfg.emb_dim)).astype(np.float32)
        fake2, mu, logvar = self.gen(x_src, e, ebar, mask, Tensor(z2), eps2)
        if noise > 0:
            fake2_in = fake2 + Tensor(rng.uniform(0.0, noise, size=fake2.shape).astype(np.float32))
        else:
            fake2_in = fake2
        pyr_g, phi_g, phi_sg = self.disc.encode_pair(fake2_in, x_src_n)
        d_local_g = self.disc.local_head(pyr_g)
        d_global_g = self.disc.global_head(phi_g, phi_sg, ebar_t)
        aux_logits_g = self.disc.aux_head(phi_g - phi_sg)
        l_gf_g = L.g_fake(d_global_g)
        l_gf_l = L.g_fake(d_local_g)
        l_aux_g = L.aux_bce(aux_logits_g, labels)
        l_kl = L.kl_gaussian(mu, logvar, self.lw.alpha)
        total_g = l_gf_g + lw.beta * l_aux_g + l_gf_l + l_kl
        total_g.backward()
        self.opt_g.step()
        ema_update(self.ema, self.gen.named_parameters(), cfg.ema_decay)

        bundle = L.LossBundle(
            d_real_global=l_real_g.item(), d_fake_global=l_fake_g.item(),
            d_wrong_global=l_wrong_g.item(), d_real_local=l_real_l.item(),
            d_fake_local=l_fake_l.item(), aux_d=l_aux_d.item(), aux_g=l_aux_g.item(),
            r1=l_r1.item(), kl=l_kl.item(), g_fake_global=l_gf_g.item(),
            g_fake_local=l_gf_l.item(),
        )
        bundle.total_d = L.compose_d(bundle.d_real_global, bundle.d_fake_global,
                                     bundle.d_wrong_global, bundle.aux_d,
                                     bundle.d_real_local, bundle.d_fake_local,
                                     bundle.r1, lw.beta)
        bundle.total_g = L.compose_g(bundle.g_fake_global, bundle.aux_g,
                                     bundle.g_fake_local, bundle.kl, lw.beta)
        if not all(np.isfinite(v) for v in bundle.to_dict().values()):
            raise NumericalError("non-finite loss", step=self.step)
        return bundle

    def evaluate_losses(self, batch, probe_seed=0):
        """Discriminator loss components on a batch: no noise, no updates.

        Uses a fixed local stream for the fake path so repeated calls are
        comparable; spectral states are left untouched (eval mode).
        """
        gen_was, disc_was = self.gen.training, self.disc.training
        self.gen.eval()
        self.disc.eval()
        try:
            rng = np.random.default_rng(probe_seed)
            bsz = batch["x_src"].shape[0]
            x_src = batch["x_src"].astype(np.float32)
            x_tgt = batch["x_tgt"].astype(np.float32)
            e, ebar, mask = batch["e"], batch["ebar"], batch["mask"]
            z = rng.standard_normal((bsz, self.gen_cfg.n_z)).astype(np.float32)
            eps = rng.standard_normal((bsz, self.gen_cfg.emb_dim)).astype(np.float32)
            with ad.no_grad():
                fake, _, _ = self.gen(x_src, e, ebar, mask, Tensor(z), eps)
                ebar_t = Tensor(ebar)
                pyr_t, phi_t, phi_s = self.disc.encode_pair(x_tgt, x_src)
                bundle = L.LossBundle(
                    d_real_global=L.hinge_d_real(self.disc.global_head(phi_t, phi_s, ebar_t)).item(),
                    d_real_local=L.hinge_d_real(self.disc.local_head(pyr_t)).item(),
                    d_wrong_global=L.hinge_d_wrong(
                        self.disc.global_head(phi_t, phi_s, Tensor(np.roll(ebar, 1, axis=0)))).item(),
                    aux_d=L.aux_bce(self.disc.aux_head(phi_t - phi_s), batch["labels"]).item(),
                )
                pyr_f, phi_f, _ = self.disc.encode_pair(fake.data, x_src, phi_src=phi_s.data)
                bundle.d_fake_global = L.hinge_d_fake(
                    self.disc.global_head(phi_f, Tensor(phi_s.data), ebar_t)).item()
                bundle.d_fake_local = L.hinge_d_fake(self.disc.local_head(pyr_f)).item()
            return bundle
        finally:
            self.gen.train(gen_was)
            self.disc.train(disc_was)

    def fit(self, max_steps=None, log_every=1, checkpoint_path=None):
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        while self.step < max_steps:
            batch = self.sample_batch()
            bundle = self.train_step(batch)
            self.step += 1
            if self.log_path and self.step % log_every == 0:
                with open(self.log_path, "a") as f:
                    f.write(json.dumps({"step": self.step, **bundle.to_dict()}) + "\n")
            if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        return self

    # -- rollouts ----------------------------------------------------------

    def eval_generator(self):
        """Generator copy carrying the EMA weights (and current SN states)."""
        if self._eval_gen is None:
            self._eval_gen = Generator(np.random.default_rng(0), self.gen_cfg)
        arrays = dict(state_arrays(self.gen))
        for n, _ in self.gen.named_parameters():
            arrays[n] = self.ema[n]
        load_state_arrays(self._eval_gen, arrays)
        self._eval_gen.eval()
        return self._eval_gen

    def rollout_episode(self, episode, mode, rng=None, generator=None, truncate=True, stop_at=None):
        """Generate per-turn images. Train mode feeds ground-truth sources
        (teacher forcing); eval mode feeds the previous generated image."""
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if not episode.turns:
            raise ValueError("empty episode")
        gen = generator if generator is not None else (self.eval_generator() if mode == "eval" else self.gen)
        was_training = gen.training
        gen.eval()  # keep spectral-norm states untouched during rollouts
        rng = rng if rng is not None else self.rng
        instructions = [t.instruction for t in episode.turns]
        images = []
        prev = episode.background
        n_turns = len(episode.turns) if stop_at is None else stop_at
        with ad.no_grad():
            for ti in range(n_turns):
                ids = mtext.tokenize(self.vocab, instructions[:ti], instructions[ti], self.cfg.l_max)
                e, ebar, mask = mtext.encode_batch(self.encoder, ids[None])
                z = rng.standard_normal(self.gen_cfg.n_z).astype(np.float32)
                if mode == "eval" and truncate:
                    z = truncate_noise(z, self.cfg.trunc_threshold, rng).astype(np.float32)
                eps = rng.standard_normal(self.gen_cfg.emb_dim).astype(np.float32)
                if mode == "train":
                    src = episode.background if ti == 0 else episode.turns[ti - 1].image
                else:
                    src = prev
                img, _, _ = gen(src[None].astype(np.float32), e.astype(np.float32),
                                ebar.astype(np.float32), mask, Tensor(z[None]), eps[None])
                prev = img.data[0]
                images.append(prev)
        gen.train(was_training)
        return images

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        tensors = {}
        tensors.update(state_arrays(self.gen, "gen."))
        tensors.update(state_arrays(self.disc, "disc."))
        tensors.update(state_arrays(self.encoder, "text."))
        for n, arr in self.ema.items():
            tensors[f"ema.{n}"] = arr
        tensors.update(self.opt_g.state_tensors("opt_g"))
        tensors.update(self.opt_d.state_tensors("opt_d"))
        state = {
            "step": self.step,
            "adam_t_g": self.opt_g.t,
            "adam_t_d": self.opt_d.t,
            "rng": ckpt.rng_state_to_json(self.rng),
            "config_hash": self.config_blob.get("config_hash", ""),
        }
        ckpt.save_checkpoint(path, tensors, state, self.config_blob)

    def load(self, path):
        tensors, state, _config = ckpt.load_checkpoint(path)
        load_state_arrays(self.gen, {k[len("gen."):]: v for k, v in tensors.items() if k.startswith("gen.")})
        load_state_arrays(self.disc, {k[len("disc."):]: v for k, v in tensors.items() if k.startswith("disc.")})
        load_state_arrays(self.encoder, {k[len("text."):]: v for k, v in tensors.items() if k.startswith("text.")})
        for n in self.ema:
            self.ema[n] = tensors[f"ema.{n}"].copy()
        self.opt_g.load_state_tensors(tensors, "opt_g")
        self.opt_d.load_state_tensors(tensors, "opt_d")
        self.opt_g.t = int(state["adam_t_g"])
        self.opt_d.t = int(state["adam_t_d"])
        self.step = int(state["step"])
        self.rng = ckpt.rng_state_from_json(state["rng"])
        return self


# -- pretraining harness -------------------------------------------------------


class Pretrainer:
    """Phase 1: joint l1 training of f_text, f_image, f_fusion; only f_text
    survives into the adversarial phase."""

    def __init__(self, encoder, vocab, episodes, train_cfg: TrainConfig, gen_cfg: GenConfig,
                 log_path=None, config_blob=None):
        self.encoder = encoder
        self.vocab = vocab
        self.episodes = episodes
        self.cfg = train_cfg
        self.log_path = log_path
        self.config_blob = config_blob or {}
        init_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 3]))
        self.model = mtext.PretrainModel(init_rng, gen_cfg)
        converge_spectral_states(self.model, 30)
        self.rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 4]))
        params = list(self.model.named_parameters()) + [
            ("text." + n, p) for n, p in encoder.named_parameters()
        ]
        self.opt = Adam(params, train_cfg.pretrain_lr, 0.9, 0.999)
        self.pool = [(ei, ti) for ei, ep in enumerate(episodes) for ti in range(len(ep.turns))]
        self.tokens = {}
        for ei, ep in enumerate(episodes):
            instr = [t.instruction for t in ep.turns]
            for ti in range(len(instr)):
                self.tokens[(ei, ti)] = mtext.tokenize(vocab, instr[:ti], instr[ti], train_cfg.l_max)
        self.step = 0

    def sample_batch(self):
        idx = self.rng.integers(0, len(self.pool), size=self.cfg.batch_size)
        keys = [self.pool[int(i)] for i in idx]
        x_src = np.stack([
            self.episodes[ei].background if ti == 0 else self.episodes[ei].turns[ti - 1].image
            for ei, ti in keys
        ]).astype(np.float32)
        x_tgt = np.stack([self.episodes[ei].turns[ti].image for ei, ti in keys]).astype(np.float32)
        tokens = np.stack([self.tokens[k] for k in keys])
        return x_src, tokens, x_tgt

    def run(self, steps=None):
        steps = self.cfg.pretrain_steps if steps is None else steps
        while self.step < steps:
            x_src, tokens, x_tgt = self.sample_batch()
            self.opt.zero_grad()
            loss = mtext.pretrain_step(self.model, self.encoder, x_src, tokens, x_tgt)
            loss.backward()
            self.opt.step()
            self.step += 1
            if self.log_path:
                with open(self.log_path, "a") as f:
                    f.write(json.dumps({"step": self.step, "l1": loss.item()}) + "\n")
        return self

    def save_text_checkpoint(self, path):
        tensors = state_arrays(self.encoder, "text.")
        state = {
            "step": self.step,
            "rng": ckpt.rng_state_to_json(self.rng),
            "config_hash": self.config_blob.get("config_hash", ""),
        }
        ckpt.save_checkpoint(path, tensors, state, self.config_blob)


def load_text_encoder(path, vocab, emb_dim):
    """Rebuild a frozen text encoder from a pretrain checkpoint."""
    tensors, _state, _config = ckpt.load_checkpoint(path)
    enc = mtext.TextEncoder(np.random.default_rng(0), len(vocab), emb_dim)
    load_state_arrays(enc, {k[len("text."):]: v for k, v in tensors.items() if k.startswith("text.")})
    return mtext.freeze_text(enc)
