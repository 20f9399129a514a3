"""Conditional VAE over future motion given past motion.

The generator ``G(z, c)`` decodes a latent code and a context into a future
motion; the encoder ``F(x, c)`` outputs a diagonal Gaussian posterior. Both
come in a recurrent (GRU) and a feedforward flavour selected by
:class:`CvaeArch`. Once trained the model is frozen and only ever used for
sampling.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .data import DatasetSplit
from .errors import ConfigError, ParseError, TrainingFault

log = logging.getLogger(__name__)

LOG_SIGMA_MIN = math.log(1e-8)
LOG_SIGMA_MAX = math.log(1e8)

ACTIVATIONS = {"tanh": nn.Tanh, "silu": nn.SiLU, "softplus": nn.Softplus, "elu": nn.ELU}


@dataclass(frozen=True)
class CvaeArch:
    H: int
    T: int
    V: int
    n_z: int = 16
    hidden: int = 128
    cell: str = "mlp"  # "mlp" or "gru"
    alpha: float = 1.0
    activation: str = "tanh"

    def __post_init__(self):
        if self.cell not in ("mlp", "gru"):
            raise ConfigError(f"unknown cell type {self.cell!r}")
        if min(self.H, self.T, self.V, self.n_z, self.hidden) < 1:
            raise ConfigError("architecture sizes must be positive")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class CvaeTrainConfig:
    epochs: int = 100
    samples_per_epoch: int = 5000
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class GaussianPosterior:
    mu: torch.Tensor
    sigma: torch.Tensor


class MotionEncoder(nn.Module):
    """Summarises a ``(B, steps, V)`` motion into a ``(B, hidden)`` feature."""

    def __init__(self, steps, V, hidden, cell, activation="tanh"):
        super().__init__()
        self.cell = cell
        act = ACTIVATIONS[activation]
        if cell == "gru":
            self.rnn = nn.GRU(V, hidden, batch_first=True)
        else:
            self.net = nn.Sequential(
                nn.Linear(steps * V, hidden), act(), nn.Linear(hidden, hidden), act()
            )

    def forward(self, motion):
        if self.cell == "gru":
            _, h = self.rnn(motion)
            return h[-1]
        return self.net(motion.flatten(1))


class CVAE(nn.Module):
    def __init__(self, arch: CvaeArch):
        super().__init__()
        self.arch = arch
        h, nz = arch.hidden, arch.n_z
        act = ACTIVATIONS[arch.activation]
        self.context_enc = MotionEncoder(arch.H, arch.V, h, arch.cell, arch.activation)
        self.future_enc = MotionEncoder(arch.T, arch.V, h, arch.cell, arch.activation)
        self.enc_mlp = nn.Sequential(nn.Linear(2 * h, h), act())
        self.enc_out = nn.Linear(h, 2 * nz)
        if arch.cell == "gru":
            self.dec_init = nn.Linear(nz + h, h)
            self.dec_cell = nn.GRUCell(nz + h + arch.V, h)
            self.dec_out = nn.Linear(h, arch.V)
        else:
            self.dec_mlp = nn.Sequential(nn.Linear(nz + h, h), act(), nn.Linear(h, h), act())
            self.dec_out = nn.Linear(h, arch.T * arch.V)
        self.frozen = False
        self.frozen_checksum: Optional[str] = None
        self.train_log: list = []

    # shape guards raise ConfigError rather than letting torch fail deep inside
    def _check(self, name, tensor, tail):
        if tuple(tensor.shape[-len(tail):]) != tuple(tail):
            raise ConfigError(f"{name} has shape {tuple(tensor.shape)}, expected (..., {tail})")

    def encode(self, x, c) -> GaussianPosterior:
        a = self.arch
        self._check("future", x, (a.T, a.V))
        self._check("context", c, (a.H, a.V))
        feat = torch.cat([self.future_enc(x), self.context_enc(c)], dim=-1)
        out = self.enc_out(self.enc_mlp(feat))
        mu, raw = out.split(a.n_z, dim=-1)
        sigma = torch.exp(raw.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        return GaussianPosterior(mu, sigma)

    def decode(self, z, c):
        """Mean future motion ``G(z, c)``.

        ``z`` is ``(B, n_z)`` or ``(B, K, n_z)``; in the latter case the context
        ``(B, H, V)`` is shared across the K codes and the result is
        ``(B, K, T, V)``.
        """
        a = self.arch
        self._check("latent code", z, (a.n_z,))
        self._check("context", c, (a.H, a.V))
        if z.dim() == 3:
            B, K, _ = z.shape
            c_rep = c.unsqueeze(1).expand(B, K, a.H, a.V).reshape(B * K, a.H, a.V)
            return self.decode(z.reshape(B * K, a.n_z), c_rep).reshape(B, K, a.T, a.V)
        h_c = self.context_enc(c)
        last = c[:, -1, :]
        if a.cell == "gru":
            zc = torch.cat([z, h_c], dim=-1)
            h = torch.tanh(self.dec_init(zc))
            pose = last
            frames = []
            for _ in range(a.T):
                h = self.dec_cell(torch.cat([zc, pose], dim=-1), h)
                pose = pose + self.dec_out(h)
                frames.append(pose)
            return torch.stack(frames, dim=1)
        out = self.dec_out(self.dec_mlp(torch.cat([z, h_c], dim=-1)))
        return last.unsqueeze(1) + out.view(-1, a.T, a.V)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        self.frozen_checksum = self.checksum()
        return self

    def checksum(self) -> str:
        return state_checksum(self.state_dict())


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def gaussian_kl(mu, sigma):
    """Closed-form KL(N(mu, diag sigma^2) || N(0, I)), summed over the last axis."""
    return 0.5 * torch.sum(sigma**2 + mu**2 - 1.0 - 2.0 * torch.log(sigma), dim=-1)


def reparameterize(post: GaussianPosterior, noise=None, generator=None):
    if noise is None:
        noise = torch.randn(
            post.mu.shape, generator=generator, dtype=post.mu.dtype, device=post.mu.device
        )
    return post.mu + post.sigma * noise


def reconstruction_energy(x, x_rec, alpha: float):
    """``||x - x_rec||^2 / (2 alpha)`` per item: the Gaussian likelihood term up to a constant."""
    return ((x - x_rec) ** 2).flatten(1).sum(-1) / (2.0 * alpha)


def elbo_terms(x, c, model: CVAE, generator=None, noise=None):
    """Per-item ``(reconstruction, kl)`` of the negative ELBO (constants dropped)."""
    post = model.encode(x, c)
    z = reparameterize(post, noise, generator)
    recon = reconstruction_energy(x, model.decode(z, c), model.arch.alpha)
    return recon, gaussian_kl(post.mu, post.sigma)


def elbo_loss(x, c, model: CVAE, generator=None, noise=None):
    """Batch mean of the negative ELBO, one reparameterised draw per item."""
    if model.frozen:
        raise ConfigError("cannot compute a training loss on a frozen model")
    recon, kl = elbo_terms(x, c, model, generator, noise)
    loss = (recon + kl).mean()
    if not torch.isfinite(loss):
        raise TrainingFault(
            "non-finite ELBO",
            diagnostics={"recon": recon.mean().item(), "kl": kl.mean().item()},
        )
    return loss


def _as_tensor(a, dtype=torch.float32):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def train_cvae(
    train: DatasetSplit,
    arch: CvaeArch,
    config: Optional[CvaeTrainConfig] = None,
    seed: int = 0,
) -> CVAE:
    """Fit a CVAE with Adam on the negative ELBO and return it frozen.

    Every epoch draws ``samples_per_epoch`` items with replacement. The run is
    deterministic given ``seed``; the global torch RNG is left untouched.
    """
    config = config or CvaeTrainConfig()
    if (train.H, train.T, train.V) != (arch.H, arch.T, arch.V):
        raise ConfigError("training data does not match the architecture dimensions")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CVAE(arch)
    gen = torch.Generator().manual_seed(seed)
    ctx = _as_tensor(train.contexts)
    fut = _as_tensor(train.futures)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.epochs):
        idx = torch.randint(len(train), (config.samples_per_epoch,), generator=gen)
        total = recon_sum = kl_sum = 0.0
        for start in range(0, config.samples_per_epoch, config.batch_size):
            b = idx[start : start + config.batch_size]
            recon, kl = elbo_terms(fut[b], ctx[b], model, gen)
            loss = (recon + kl).mean()
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                raise TrainingFault(
                    f"CVAE loss diverged at epoch {epoch}",
                    last_good_state=last_good,
                    diagnostics={"epoch": epoch, "recon": recon.mean().item(), "kl": kl.mean().item()},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = len(b)
            total += loss.item() * n
            recon_sum += recon.mean().item() * n
            kl_sum += kl.mean().item() * n
        n_seen = config.samples_per_epoch
        record = {
            "epoch": epoch,
            "loss": total / n_seen,
            "recon": recon_sum / n_seen,
            "kl": kl_sum / n_seen,
        }
        model.train_log.append(record)
        last_good = copy.deepcopy(model.state_dict())
        log.debug("cvae epoch %(epoch)d loss %(loss).4f recon %(recon).4f kl %(kl).4f", record)
    return model.freeze()


@torch.no_grad()
def sample_random(c, model: CVAE, K: int, generator=None):
    """Baseline sampler: K i.i.d. codes from N(0, I), each decoded independently.

    ``c`` is ``(H, V)`` or ``(B, H, V)``; returns ``(K, T, V)`` or ``(B, K, T, V)``.
    """
    if not model.frozen:
        raise ConfigError("random sampling expects a frozen (trained) model")
    single = c.dim() == 2
    if single:
        c = c.unsqueeze(0)
    z = torch.randn(
        (c.shape[0], K, model.arch.n_z), generator=generator, dtype=c.dtype, device=c.device
    )
    x = model.decode(z, c)
    return x[0] if single else x


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(module: nn.Module, directory, manifest: dict):
    """Write ``params.npz`` (one named float array per parameter) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    with open(directory / "params.npz", "wb") as fh:
        np.savez(fh, **arrays)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_params(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        with np.load(directory / "params.npz") as npz:
            state = {k: torch.from_numpy(npz[k].copy()) for k in npz.files}
    except (OSError, ValueError) as exc:
        raise ParseError(f"{directory}: unreadable checkpoint: {exc}") from None
    return state, manifest


def save_cvae(model: CVAE, directory, seed: int, data_fingerprint: str = ""):
    manifest = {
        "kind": "cvae",
        "arch": asdict(model.arch),
        "n_z": model.arch.n_z,
        "alpha": model.arch.alpha,
        "seed": seed,
        "data_fingerprint": data_fingerprint,
        "checksum": model.checksum(),
        "train_log": model.train_log,
    }
    save_checkpoint(model, directory, manifest)


def load_cvae(directory) -> CVAE:
    state, manifest = load_params(directory)
    if manifest.get("kind") != "cvae":
        raise ParseError(f"{directory}: manifest is not a CVAE checkpoint")
    model = CVAE(CvaeArch(**manifest["arch"]))
    model.load_state_dict(state)
    model.train_log = manifest.get("train_log", [])
    model.freeze()
    if model.frozen_checksum != manifest["checksum"]:
        raise ParseError(f"{directory}: parameter checksum does not match manifest")
    return model
