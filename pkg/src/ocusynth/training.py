"""Adversarial training of the dual-branch generator.

Each step updates both discriminators on their own modality of one generated
pair (softplus adversarial loss, lazily interval-scaled R1 on real images),
then the generator on the summed non-saturating losses plus the lazily
applied path-length penalty. Generator weights are tracked by an exponential
moving average used for all downstream sampling.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError, SynthesisConfig, TrainConfig
from .discriminator import Discriminator, r1_penalty
from .generator import DualBranchGenerator

CHECKPOINT_KEYS = ("config", "step", "g", "g_ema", "d_vis", "d_nir", "opt", "pl_mean")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes NaN; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


def regularization_gammas(r: int, bs: int) -> tuple[float, float]:
    """Closed-form R1 and path-length weights for resolution `r`, batch size `bs`."""
    gamma1 = 1e-4 * (2.0 * r * r) / bs
    gamma2 = math.log(2.0) / (r * r * (math.log(r) - math.log(2.0)))
    return gamma1, gamma2


def discriminator_loss(disc, fake_batch, real_batch, gamma1=0.0, r1_scale=0.0):
    """Softplus adversarial loss for one domain, with an optional scaled R1 term.

    `fake_batch` must already be detached from the generator graph. Returns
    (total, parts) where parts holds the adv_fake / adv_real / r1 components.
    """
    if fake_batch.requires_grad:
        raise ValueError("fake batch must be detached for the discriminator step")
    logits_fake = disc(fake_batch)
    logits_real = disc(real_batch)
    adv_fake = F.softplus(logits_fake).mean()
    adv_real = F.softplus(-logits_real).mean()
    total = adv_fake + adv_real
    with torch.no_grad():
        absmax = float(torch.max(logits_fake.abs().max(), logits_real.abs().max()))
    parts = {
        "adv_fake": float(adv_fake.detach()),
        "adv_real": float(adv_real.detach()),
        "r1": 0.0,
        "logit_absmax": absmax,
    }
    if r1_scale > 0.0:
        r1 = r1_penalty(disc, real_batch, gamma1) * r1_scale
        parts["r1"] = float(r1.detach())
        total = total + r1
    if not torch.isfinite(total):
        raise TrainingDiverged("discriminator loss is not finite", snapshot=parts)
    return total, parts


def generator_adversarial_loss(d_vis, d_nir, vis, nir):
    """Sum of softplus(-D(x)) over both domains; (total, parts)."""
    loss_vis = F.softplus(-d_vis(vis)).mean()
    loss_nir = F.softplus(-d_nir(nir)).mean()
    total = loss_vis + loss_nir
    parts = {"adv_vis": float(loss_vis.detach()), "adv_nir": float(loss_nir.detach())}
    if not torch.isfinite(total):
        raise TrainingDiverged("generator loss is not finite", snapshot=parts)
    return total, parts


def path_length_penalty(outputs, ws, pl_mean, gamma2, decay=0.99, noise=None):
    """Penalty keeping the style-Jacobian projection norm near its running average.

    Projects each output image onto a standard-normal image q, differentiates
    the summed projections with respect to the style inputs, and penalizes the
    squared deviation of the per-sample gradient norm J from the running
    average. Returns (penalty, new_pl_mean, mean_J).

    `outputs` is a list of image tensors that share a leading batch dim with
    `ws`; `noise` may pin the projection images for testing.
    """
    if not ws.requires_grad:
        raise RuntimeError("style inputs must require grad for the path-length penalty")
    if noise is None:
        noise = [torch.randn_like(x) for x in outputs]
    proj = sum((x * q).flatten(1).sum(dim=1) for x, q in zip(outputs, noise))
    grads = torch.autograd.grad(proj.sum(), ws, create_graph=True)[0]
    j = grads.reshape(grads.shape[0], -1).norm(dim=1)
    penalty = gamma2 * ((j - pl_mean) ** 2).mean()
    mean_j = float(j.detach().mean())
    new_pl_mean = decay * pl_mean + (1.0 - decay) * mean_j
    return penalty, new_pl_mean, mean_j


def ema_decay_for(batch_size: int, halflife_kimg: float) -> float:
    """Per-step EMA decay for a half-life expressed in thousands of images."""
    if halflife_kimg <= 0:
        return 0.0
    return 0.5 ** (batch_size / (halflife_kimg * 1000.0))


@torch.no_grad()
def ema_update(ema_model, model, decay):
    """ema <- decay * ema + (1 - decay) * model, parameters and buffers alike."""
    for p_ema, p in zip(ema_model.parameters(), model.parameters()):
        p_ema.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    for b_ema, b in zip(ema_model.buffers(), model.buffers()):
        b_ema.copy_(b)


def flip_pair_batch(vis, nir, flip_prob, rng):
    """Horizontally mirror a random subset of pairs, identically in both modalities."""
    if flip_prob <= 0.0:
        return vis, nir
    flips = rng.random(vis.shape[0]) < flip_prob
    if not flips.any():
        return vis, nir
    vis = vis.clone()
    nir = nir.clone()
    idx = np.nonzero(flips)[0]
    vis[idx] = torch.flip(vis[idx], dims=[-1])
    nir[idx] = torch.flip(nir[idx], dims=[-1])
    return vis, nir


class PairDataset:
    """In-memory aligned pair store with seeded, order-deterministic batch iteration."""

    def __init__(self, vis, nir):
        vis = torch.as_tensor(vis, dtype=torch.float32)
        nir = torch.as_tensor(nir, dtype=torch.float32)
        if vis.shape[0] != nir.shape[0]:
            raise ValueError("vis and nir counts differ")
        if vis.shape[-2:] != nir.shape[-2:]:
            raise ValueError("vis and nir spatial dims differ")
        self.vis = vis
        self.nir = nir

    def __len__(self):
        return self.vis.shape[0]

    def batches(self, batch_size, seed):
        """Yield (vis, nir) batches forever, reshuffling each epoch from one seed."""
        rng = np.random.default_rng(seed)
        n = len(self)
        while True:
            order = rng.permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                idx = order[start : start + batch_size]
                yield self.vis[idx], self.nir[idx]


@dataclass
class TrainState:
    step: int = 0
    images_seen: int = 0
    pl_mean: float = 0.0
    ema_decay: float = 0.0
    rng_state: object = None  # latent-sampler state, refreshed every step


def second_order_selftest() -> None:
    """Verify the backend supports gradients of gradients; raise loudly if not.

    Both regularizers backpropagate through an autograd.grad call, so a
    backend without double-backward support must fail at startup, not steps
    into training.
    """
    x = torch.randn(2, 3, requires_grad=True, dtype=torch.float64)
    w = torch.randn(3, 3, requires_grad=True, dtype=torch.float64)
    y = torch.nn.functional.leaky_relu(x @ w, 0.2).square().sum()
    (g,) = torch.autograd.grad(y, x, create_graph=True)
    (gw,) = torch.autograd.grad(g.square().sum(), w)
    if gw is None or not torch.isfinite(gw).all():
        raise RuntimeError("backend cannot compute second-order gradients")


def save_checkpoint(path, synthesis_config, train_config, step, g, g_ema, d_vis, d_nir,
                    optimizers, pl_mean):
    payload = {
        "config": {
            "synthesis": dataclasses.asdict(synthesis_config),
            "train": dataclasses.asdict(train_config),
        },
        "step": step,
        "g": {"mapping": g.mapping.state_dict(), "synthesis": g.synthesis.state_dict()},
        "g_ema": {"mapping": g_ema.mapping.state_dict(), "synthesis": g_ema.synthesis.state_dict()},
        "d_vis": d_vis.state_dict(),
        "d_nir": d_nir.state_dict(),
        "opt": {name: opt.state_dict() for name, opt in optimizers.items()},
        "pl_mean": pl_mean,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Load a checkpoint archive and rebuild the generator/discriminator modules."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    missing = [k for k in CHECKPOINT_KEYS if k not in payload]
    if missing:
        raise ValueError(f"checkpoint {path} missing keys: {missing}")
    synthesis_config = SynthesisConfig(**payload["config"]["synthesis"])
    train_config = TrainConfig(**payload["config"]["train"])
    g = DualBranchGenerator(synthesis_config)
    g.mapping.load_state_dict(payload["g"]["mapping"])
    g.synthesis.load_state_dict(payload["g"]["synthesis"])
    g_ema = DualBranchGenerator(synthesis_config)
    g_ema.mapping.load_state_dict(payload["g_ema"]["mapping"])
    g_ema.synthesis.load_state_dict(payload["g_ema"]["synthesis"])
    g_ema.eval()
    for p in g_ema.parameters():
        p.requires_grad_(False)
    d_vis = Discriminator(synthesis_config, "VIS")
    d_vis.load_state_dict(payload["d_vis"])
    d_nir = Discriminator(synthesis_config, "NIR")
    d_nir.load_state_dict(payload["d_nir"])
    return {
        "synthesis_config": synthesis_config,
        "train_config": train_config,
        "step": payload["step"],
        "g": g,
        "g_ema": g_ema,
        "d_vis": d_vis,
        "d_nir": d_nir,
        "opt": payload["opt"],
        "pl_mean": payload["pl_mean"],
    }


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    def __init__(self, synthesis_config: SynthesisConfig, train_config: TrainConfig,
                 dataset: PairDataset, out_dir, seed=None):
        self.cfg = synthesis_config
        self.tcfg = train_config
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.seed = train_config.seed if seed is None else seed

        second_order_selftest()
        torch.manual_seed(self.seed)
        self.g = DualBranchGenerator(synthesis_config)
        self.g_ema = copy.deepcopy(self.g)
        self.g_ema.eval()
        _set_requires_grad(self.g_ema, False)
        self.d_vis = Discriminator(synthesis_config, "VIS")
        self.d_nir = Discriminator(synthesis_config, "NIR")

        betas = (train_config.beta1, train_config.beta2)
        lr, eps = train_config.learning_rate, train_config.eps_opt
        self.opt_g = torch.optim.Adam(self.g.parameters(), lr=lr, betas=betas, eps=eps)
        self.opt_d_vis = torch.optim.Adam(self.d_vis.parameters(), lr=lr, betas=betas, eps=eps)
        self.opt_d_nir = torch.optim.Adam(self.d_nir.parameters(), lr=lr, betas=betas, eps=eps)

        g1, g2 = regularization_gammas(synthesis_config.output_resolution, train_config.batch_size)
        self.gamma1 = train_config.gamma1 if train_config.gamma1 is not None else g1
        self.gamma2 = train_config.gamma2 if train_config.gamma2 is not None else g2

        self.state = TrainState(
            ema_decay=ema_decay_for(train_config.batch_size, train_config.ema_halflife_kimg)
        )
        self._flip_rng = np.random.default_rng(self.seed + 1)
        self._latent_rng = torch.Generator().manual_seed(self.seed + 2)
        self._divergence_run = 0
        self._log_path = self.out_dir / "progress.jsonl"
        self.checkpoints: list[Path] = []

    # -- single step ---------------------------------------------------------

    def _sample_latents(self, batch):
        return torch.randn((batch, self.cfg.latent_dim), generator=self._latent_rng)

    def step(self, real_vis, real_nir):
        tcfg = self.tcfg
        step = self.state.step
        do_r1 = step % tcfg.r1_interval == 0
        do_pl = step % tcfg.pl_interval == 0
        record = {"step": step, "images_seen": self.state.images_seen}

        real_vis, real_nir = flip_pair_batch(real_vis, real_nir, tcfg.flip_prob, self._flip_rng)

        # discriminator updates: both domains, same generated pair
        with torch.no_grad():
            z = self._sample_latents(real_vis.shape[0])
            fake_vis, fake_nir, _ = self.g(z)
        _set_requires_grad(self.g, False)
        max_logit = 0.0
        for disc, opt, fake, real, tag in (
            (self.d_vis, self.opt_d_vis, fake_vis, real_vis, "vis"),
            (self.d_nir, self.opt_d_nir, fake_nir, real_nir, "nir"),
        ):
            opt.zero_grad(set_to_none=True)
            loss, parts = discriminator_loss(
                disc, fake, real, gamma1=self.gamma1,
                r1_scale=float(tcfg.r1_interval) if do_r1 else 0.0,
            )
            loss.backward()
            opt.step()
            max_logit = max(max_logit, parts["logit_absmax"])
            record[f"d_{tag}_adv_fake"] = parts["adv_fake"]
            record[f"d_{tag}_adv_real"] = parts["adv_real"]
            record[f"d_{tag}_r1"] = parts["r1"]
        _set_requires_grad(self.g, True)

        # generator update; path-length penalty reuses the same synthesis pass
        # and differentiates w.r.t. the pre-broadcast style vector w
        _set_requires_grad(self.d_vis, False)
        _set_requires_grad(self.d_nir, False)
        self.opt_g.zero_grad(set_to_none=True)
        z = self._sample_latents(real_vis.shape[0])
        w = self.g.map_latent(z)
        vis, nir, _ = self.g.synthesize(w)
        g_loss, g_parts = generator_adversarial_loss(self.d_vis, self.d_nir, vis, nir)
        record["g_adv_vis"] = g_parts["adv_vis"]
        record["g_adv_nir"] = g_parts["adv_nir"]
        record["g_pl"] = 0.0
        if do_pl:
            penalty, new_mean, mean_j = path_length_penalty(
                [vis, nir], w, self.state.pl_mean, self.gamma2, tcfg.pl_decay
            )
            g_loss = g_loss + penalty * tcfg.pl_interval
            self.state.pl_mean = new_mean
            record["g_pl"] = float(penalty.detach()) * tcfg.pl_interval
            record["pl_j"] = mean_j
        g_loss.backward()
        self.opt_g.step()
        _set_requires_grad(self.d_vis, True)
        _set_requires_grad(self.d_nir, True)

        ema_update(self.g_ema, self.g, self.state.ema_decay)
        record["pl_mean"] = self.state.pl_mean

        self.state.step += 1
        self.state.images_seen += real_vis.shape[0]
        self.state.rng_state = self._latent_rng.get_state()

        if max_logit > tcfg.divergence_logit:
            self._divergence_run += 1
        else:
            self._divergence_run = 0
        record["max_logit"] = max_logit
        return record

    # -- full run -------------------------------------------------------------

    def _write_log(self, record):
        with open(self._log_path, "a") as f:
            f.write(json.dumps(record) + "\n")

    def _save(self, tag):
        path = self.out_dir / f"ckpt_{tag}.pt"
        save_checkpoint(
            path, self.cfg, self.tcfg, self.state.step, self.g, self.g_ema,
            self.d_vis, self.d_nir,
            {"g": self.opt_g, "d_vis": self.opt_d_vis, "d_nir": self.opt_d_nir},
            self.state.pl_mean,
        )
        self.checkpoints.append(path)
        return path

    def train(self):
        """Run to total_kimgs (or divergence); returns the checkpoint series."""
        tcfg = self.tcfg
        if len(self.dataset) < tcfg.batch_size:
            raise ConfigError("dataset smaller than one batch")
        total_images = int(tcfg.total_kimgs * 1000)
        ckpt_every = max(int(tcfg.checkpoint_every_kimg * 1000), tcfg.batch_size)
        next_ckpt = ckpt_every
        batches = self.dataset.batches(tcfg.batch_size, self.seed + 3)
        diverged = False

        while self.state.images_seen < total_images:
            real_vis, real_nir = next(batches)
            try:
                record = self.step(real_vis, real_nir)
            except TrainingDiverged as e:
                self._write_log({"step": self.state.step, "event": "diverged",
                                 "detail": str(e), **e.snapshot})
                diverged = True
                break
            if self._divergence_run >= tcfg.divergence_window:
                self._write_log({"step": self.state.step, "event": "diverged",
                                 "detail": f"|logit| > {tcfg.divergence_logit} for "
                                           f"{tcfg.divergence_window} consecutive steps"})
                diverged = True
                break
            if self.state.step % tcfg.log_every_steps == 0:
                self._write_log(record)
            if self.state.images_seen >= next_ckpt:
                self._save(f"{self.state.images_seen:08d}")
                next_ckpt += ckpt_every

        if not diverged:
            self._save("final")
        elif not self.checkpoints:
            # nothing good to keep; still leave a marker of the initial state
            self._write_log({"event": "no_good_checkpoint"})
        return self.checkpoints


def train(synthesis_config, train_config, dataset, out_dir, seed=None):
    """Train a dual-branch model on aligned pairs; returns the checkpoint series."""
    trainer = Trainer(synthesis_config, train_config, dataset, out_dir, seed=seed)
    trainer.train()
    return trainer
