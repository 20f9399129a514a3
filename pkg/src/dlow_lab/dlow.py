"""Diversifying latent flows over a frozen CVAE.

A mapping network ``Q(c)`` emits K affine maps ``z_k = A_k eps + b_k``. One
shared ``eps ~ N(0, I)`` therefore yields K correlated latent codes, which the
frozen generator decodes into K correlated futures. The maps are trained on

    beta * sum_k KL(N(b_k, A_k A_k^T) || N(0, I))
        + lambda_d * E_d + lambda_r * E_r + lambda_s * E_s

where the energies score diversity, closeness to the ground truth and
agreement on a subset of pose features.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .cvae import CVAE, MotionEncoder, load_params, sample_random, save_checkpoint
from .data import DatasetSplit
from .errors import ConfigError, FrozenModelModified, ParseError, SingularityError, TrainingFault

log = logging.getLogger(__name__)

EPS_NONSINGULAR = 1e-6


# -- affine maps --------------------------------------------------------------


@dataclass
class AffineMap:
    """``z = A eps + b`` with ``A`` either a diagonal vector ``(n,)`` or a matrix ``(n, n)``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        n = self.b.shape[0]
        if self.b.ndim != 1 or self.A.shape not in ((n,), (n, n)):
            raise ConfigError(f"A {self.A.shape} and b {self.b.shape} are inconsistent")

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 1

    @property
    def n_z(self) -> int:
        return self.b.shape[0]

    @classmethod
    def identity(cls, n_z: int, diagonal: bool = True) -> "AffineMap":
        return cls(np.ones(n_z) if diagonal else np.eye(n_z), np.zeros(n_z))

    def matrix(self) -> np.ndarray:
        return np.diag(self.A) if self.diagonal else self.A


@dataclass
class MappingSet:
    maps: list
    identity_first: bool = False

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, k):
        return self.maps[k]


def transform(eps, m: AffineMap) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    return (m.A * eps if m.diagonal else m.A @ eps) + m.b


def _check_nonsingular(m: AffineMap):
    if m.diagonal:
        if np.any(np.abs(m.A) < EPS_NONSINGULAR):
            raise SingularityError("diagonal entry below the nonsingularity threshold")
        return
    lu, pivots, info = torch.linalg.lu_factor_ex(torch.from_numpy(m.A))
    u = torch.diagonal(lu).abs()
    if info.item() != 0 or u.min().item() < EPS_NONSINGULAR * max(u.max().item(), 1.0):
        raise SingularityError("matrix factorisation found a (near-)zero pivot")


def inverse_transform(z, m: AffineMap) -> np.ndarray:
    """``eps = A^{-1} (z - b)``."""
    _check_nonsingular(m)
    r = np.asarray(z, dtype=np.float64) - m.b
    if m.diagonal:
        return r / m.A
    return np.linalg.solve(m.A, r)


def affine_kl(A, b, diagonal: bool):
    """Batched closed-form KL(N(b, A A^T) || N(0, I)) over the last axes."""
    n = b.shape[-1]
    if diagonal:
        trace = torch.sum(A**2, dim=-1)
        logdet = torch.sum(torch.log(A**2), dim=-1)
    else:
        trace = torch.sum(A**2, dim=(-2, -1))
        logdet = 2.0 * torch.linalg.slogdet(A).logabsdet
    return 0.5 * (trace + torch.sum(b**2, dim=-1) - n - logdet)


def kl_term(m: AffineMap) -> float:
    _check_nonsingular(m)
    A = torch.from_numpy(m.A)
    b = torch.from_numpy(m.b)
    if not m.diagonal:
        cond = np.linalg.cond(m.A)
        log.debug("kl_term: condition number %.3g", cond)
    return float(affine_kl(A, b, m.diagonal))


# -- energies -----------------------------------------------------------------


def _flat(X, features=None):
    """Restrict to pose features (last axis) and flatten each motion."""
    if features is not None and len(features) > 0:
        X = X[..., list(features)]
    return X.flatten(-2)


def _pairwise_sq(F):
    diff = F.unsqueeze(-2) - F.unsqueeze(-3)
    return torch.sum(diff**2, dim=-1)


def _offdiag_mean(M):
    K = M.shape[-1]
    mask = ~torch.eye(K, dtype=torch.bool, device=M.device)
    return torch.sum(M * mask, dim=(-2, -1)) / (K * (K - 1))


def energy_diversity(X, sigma_d: float, features=None):
    """Mean RBF similarity over ordered sample pairs, in (0, 1].

    ``X`` is ``(..., K, T, V)``; returns ``(...)``.
    """
    K = X.shape[-3]
    if K < 2:
        raise ConfigError("diversity energy needs at least two samples")
    if not sigma_d > 0:
        raise ConfigError("sigma_d must be positive")
    d2 = _pairwise_sq(_flat(X, features))
    return _offdiag_mean(torch.exp(-d2 / sigma_d))


def energy_reconstruction(X, x_hat):
    """Squared distance from ``x_hat`` to the closest sample.

    Only the arg-min sample (lowest index on ties) receives gradient.
    """
    d2 = torch.sum((X - x_hat.unsqueeze(-3)).flatten(-2) ** 2, dim=-1)
    idx = torch.argmin(d2.detach(), dim=-1, keepdim=True)
    return torch.gather(d2, -1, idx).squeeze(-1)


def energy_similarity(X, features):
    """Mean pairwise squared distance on the given pose features."""
    if features is None or len(features) == 0:
        raise ConfigError("similarity energy needs a non-empty feature subset")
    K = X.shape[-3]
    if K < 2:
        raise ConfigError("similarity energy needs at least two samples")
    return _offdiag_mean(_pairwise_sq(_flat(X, features)))


# -- config and mapping network ---------------------------------------------


@dataclass
class DLowConfig:
    K: int = 10
    beta: float = 1.0
    lambda_d: float = 25.0
    lambda_r: float = 2.0
    lambda_s: float = 0.0
    sigma_d: Optional[float] = None  # None: calibrate from random CVAE samples
    J_s: tuple = ()
    J_d: tuple = ()  # empty: all features
    identity_first: bool = False
    a_mode: str = "diag"  # "diag" or "full"
    hidden: int = 128
    cell: str = "mlp"
    epochs: int = 100
    samples_per_epoch: int = 5000
    batch_size: int = 64
    lr: float = 1e-4

    def __post_init__(self):
        self.J_s = tuple(int(j) for j in self.J_s)
        self.J_d = tuple(int(j) for j in self.J_d)

    def validate(self, V: Optional[int] = None):
        if self.K < 2:
            raise ConfigError("DLow training needs K >= 2")
        if min(self.beta, self.lambda_d, self.lambda_r, self.lambda_s) < 0:
            raise ConfigError("beta and lambda weights must be non-negative")
        if self.sigma_d is not None and not self.sigma_d > 0:
            raise ConfigError("sigma_d must be positive")
        if set(self.J_s) & set(self.J_d):
            raise ConfigError("J_s and J_d must be disjoint")
        if self.lambda_s > 0 and not self.J_s:
            raise ConfigError("lambda_s > 0 needs a non-empty J_s")
        if self.a_mode not in ("diag", "full"):
            raise ConfigError(f"unknown A mode {self.a_mode!r}")
        if self.cell not in ("mlp", "gru"):
            raise ConfigError(f"unknown cell type {self.cell!r}")
        if V is not None and any(not 0 <= j < V for j in self.J_s + self.J_d):
            raise ConfigError(f"feature index outside [0, {V})")


class MappingNet(nn.Module):
    """K-head network from a context to K affine maps.

    Diagonal mode emits ``log A`` and ``b``; full mode emits ``A - I`` and
    ``b``, so a zero head output is the identity map in both modes.
    """

    def __init__(self, H, V, n_z, config: DLowConfig, zero_init: bool = False):
        super().__init__()
        self.n_z = n_z
        self.K = config.K
        self.diagonal = config.a_mode == "diag"
        self.identity_first = config.identity_first
        h = config.hidden
        self.context_enc = MotionEncoder(H, V, h, config.cell)
        self.mlp = nn.Sequential(nn.Linear(h, h), nn.Tanh())
        per_map = (n_z if self.diagonal else n_z * n_z) + n_z
        self.head = nn.Linear(h, self.K * per_map)
        if zero_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        self.clamp_events = 0

    def forward(self, c):
        """Return ``A`` (``(B, K, n)`` or ``(B, K, n, n)``) and ``b`` ``(B, K, n)``."""
        B, n, K = c.shape[0], self.n_z, self.K
        out = self.head(self.mlp(self.context_enc(c))).view(B, K, -1)
        if self.diagonal:
            raw, b = out.split(n, dim=-1)
            floor = math.log(EPS_NONSINGULAR)
            if torch.any(raw < floor):
                self.clamp_events += 1
                log.warning("mapping diagonal clamped to the nonsingularity floor")
            A = torch.exp(raw.clamp(min=floor))
            eye = torch.ones(n, dtype=c.dtype, device=c.device)
        else:
            raw, b = out.split(n * n, dim=-1)
            eye = torch.eye(n, dtype=c.dtype, device=c.device)
            A = eye + raw.view(B, K, n, n)
        if self.identity_first:
            A = torch.cat([eye.expand(B, 1, *eye.shape), A[:, 1:]], dim=1)
            b = torch.cat([torch.zeros_like(b[:, :1]), b[:, 1:]], dim=1)
        return A, b


def apply_maps(A, b, eps):
    """``z_k = A_k eps + b_k`` for a shared ``eps`` ``(B, n)``; returns ``(B, K, n)``."""
    if A.dim() == 3:
        return A * eps.unsqueeze(1) + b
    return torch.einsum("bkij,bj->bki", A, eps) + b


class DLowModel(nn.Module):
    def __init__(self, cvae: CVAE, config: DLowConfig, zero_init: bool = False):
        super().__init__()
        if not cvae.frozen:
            raise ConfigError("DLow requires a frozen CVAE")
        config.validate(cvae.arch.V)
        self.config = config
        self.mapping = MappingNet(cvae.arch.H, cvae.arch.V, cvae.arch.n_z, config, zero_init)
        # not registered as a submodule: gamma is the only trainable state
        object.__setattr__(self, "cvae", cvae)
        self.cvae_checksum = cvae.frozen_checksum
        self.train_log: list = []

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def n_z(self) -> int:
        return self.cvae.arch.n_z

    def draw_eps(self, batch, generator=None, dtype=torch.float32):
        return torch.randn((batch, self.n_z), generator=generator, dtype=dtype)

    def latent_codes(self, c, eps):
        A, b = self.mapping(c)
        return apply_maps(A, b, eps)

    def forward(self, c, eps):
        return self.cvae.decode(self.latent_codes(c, eps), c)

    @torch.no_grad()
    def map_params(self, c) -> MappingSet:
        """Affine maps for one context ``(H, V)``."""
        A, b = self.mapping(torch.as_tensor(c, dtype=self._dtype).unsqueeze(0))
        A = A[0].double().numpy()
        b = b[0].double().numpy()
        return MappingSet([AffineMap(A[k], b[k]) for k in range(self.K)], self.config.identity_first)

    @property
    def _dtype(self):
        return next(self.mapping.parameters()).dtype

    @torch.no_grad()
    def sample(self, c, eps=None, generator=None):
        """K correlated futures for context(s) ``c``; a deterministic function of ``(c, eps)``."""
        single = c.dim() == 2
        if single:
            c = c.unsqueeze(0)
            if eps is not None and eps.dim() == 1:
                eps = eps.unsqueeze(0)
        if eps is None:
            eps = self.draw_eps(c.shape[0], generator, c.dtype)
        X = self(c, eps)
        if self.config.identity_first:
            # decode the identity slot on its own so it is bit-identical to
            # decode(eps, c); batched matmuls may round differently
            X[:, 0] = self.cvae.decode(eps, c)
        return X[0] if single else X

    @torch.no_grad()
    def sample_with_reference(self, c, x_ref):
        """Sample set whose first slot reproduces the reference motion's latent code.

        ``z_ref`` is the posterior mean of ``x_ref``; ``eps_ref`` inverts the
        first map (the identity when ``identity_first``), then all K maps are
        applied to ``eps_ref``.
        """
        if not self.config.identity_first:
            raise ConfigError("reference-conditioned sampling requires identity_first")
        z_ref = self.cvae.encode(x_ref.unsqueeze(0), c.unsqueeze(0)).mu[0]
        m1 = self.map_params(c)[0]
        eps_ref = inverse_transform(z_ref.double().numpy(), m1)
        eps_ref = torch.as_tensor(eps_ref, dtype=c.dtype)
        return self.sample(c, eps_ref), z_ref, eps_ref


def sample_dlow(c, model: DLowModel, eps=None, generator=None):
    return model.sample(c, eps, generator)


def sample_with_reference(c, x_ref, model: DLowModel):
    return model.sample_with_reference(c, x_ref)[0]


# -- objective and training --------------------------------------------------


def dlow_loss(c, x_hat, model: DLowModel, generator=None, eps=None, sigma_d=None):
    """Batch-mean DLow objective and its component breakdown.

    Returns ``(total, parts)`` where ``parts`` holds the raw components
    ``kl``, ``e_d``, ``e_r``, ``e_s`` as tensors; ``total`` equals
    ``beta*kl + lambda_d*e_d + lambda_r*e_r + lambda_s*e_s``.
    """
    cfg = model.config
    sigma_d = sigma_d if sigma_d is not None else cfg.sigma_d
    if sigma_d is None:
        raise ConfigError("sigma_d is not set; calibrate it or pass it explicitly")
    if eps is None:
        eps = model.draw_eps(c.shape[0], generator, c.dtype)
    A, b = model.mapping(c)
    X = model.cvae.decode(apply_maps(A, b, eps), c)
    kl = affine_kl(A, b, model.mapping.diagonal)
    if cfg.identity_first:
        kl = kl[:, 1:]
    parts = {
        "kl": kl.sum(-1).mean(),
        "e_d": energy_diversity(X, sigma_d, cfg.J_d or None).mean(),
        "e_r": energy_reconstruction(X, x_hat).mean(),
        "e_s": energy_similarity(X, cfg.J_s).mean() if cfg.J_s else X.new_zeros(()),
    }
    total = (
        cfg.beta * parts["kl"]
        + cfg.lambda_d * parts["e_d"]
        + cfg.lambda_r * parts["e_r"]
        + cfg.lambda_s * parts["e_s"]
    )
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise TrainingFault(f"non-finite DLow component {name}", diagnostics={name: value.item()})
    return total, parts


@torch.no_grad()
def calibrate_sigma_d(contexts, cvae: CVAE, K: int, features=None, generator=None) -> float:
    """Mean pairwise squared distance among random CVAE samples.

    The mean is used rather than the median: with imbalanced modes most random
    pairs share a mode, and the median then collapses to the noise scale.
    """
    X = sample_random(contexts, cvae, K, generator)
    d2 = _pairwise_sq(_flat(X, features))
    iu = torch.triu_indices(K, K, offset=1)
    return float(torch.mean(d2[:, iu[0], iu[1]]))


def train_dlow(
    train: DatasetSplit,
    cvae: CVAE,
    config: DLowConfig,
    seed: int = 0,
    calibration_items: int = 128,
) -> DLowModel:
    """Optimise the mapping network with Adam; the CVAE stays untouched.

    ``sigma_d`` is calibrated on a seeded subset of the training contexts when
    the config leaves it unset. Raises :class:`FrozenModelModified` if the CVAE
    parameters changed by the end of training.
    """
    if not cvae.frozen:
        raise ConfigError("train_dlow needs a frozen CVAE")
    config = copy.deepcopy(config)
    config.validate(cvae.arch.V)
    start_sum = cvae.checksum()
    if start_sum != cvae.frozen_checksum:
        raise FrozenModelModified("CVAE differs from its frozen checksum before training")
    gen = torch.Generator().manual_seed(seed)
    ctx = torch.as_tensor(train.contexts, dtype=torch.float32)
    fut = torch.as_tensor(train.futures, dtype=torch.float32)
    if config.sigma_d is None:
        pick = torch.randperm(len(train), generator=gen)[:calibration_items]
        config.sigma_d = calibrate_sigma_d(ctx[pick], cvae, config.K, config.J_d or None, gen)
        log.info("calibrated sigma_d = %.6g", config.sigma_d)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DLowModel(cvae, config)
    opt = torch.optim.Adam(model.mapping.parameters(), lr=config.lr)
    for epoch in range(config.epochs):
        idx = torch.randint(len(train), (config.samples_per_epoch,), generator=gen)
        sums = dict.fromkeys(("kl", "e_d", "e_r", "e_s", "total"), 0.0)
        for start in range(0, config.samples_per_epoch, config.batch_size):
            b = idx[start : start + config.batch_size]
            total, parts = dlow_loss(ctx[b], fut[b], model, gen)
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in parts.items():
                sums[k] += v.item() * len(b)
            sums["total"] += total.item() * len(b)
        record = {"epoch": epoch}
        record.update({k: v / config.samples_per_epoch for k, v in sums.items()})
        model.train_log.append(record)
        log.debug(
            "dlow epoch %(epoch)d total %(total).4f kl %(kl).4f e_d %(e_d).4f e_r %(e_r).4f e_s %(e_s).4f",
            record,
        )
    if cvae.checksum() != start_sum:
        raise FrozenModelModified("CVAE parameters changed during DLow training")
    model.eval()
    return model


# -- checkpoints --------------------------------------------------------------


def save_dlow(model: DLowModel, directory, seed: int):
    manifest = {
        "kind": "dlow",
        "config": asdict(model.config),
        "cvae_checksum": model.cvae_checksum,
        "seed": seed,
        "train_log": model.train_log,
    }
    save_checkpoint(model.mapping, directory, manifest)


def load_dlow(directory, cvae: CVAE) -> DLowModel:
    state, manifest = load_params(directory)
    if manifest.get("kind") != "dlow":
        raise ParseError(f"{directory}: manifest is not a DLow checkpoint")
    if manifest["cvae_checksum"] != cvae.frozen_checksum:
        raise ConfigError(f"{directory}: checkpoint was trained against a different CVAE")
    model = DLowModel(cvae, DLowConfig(**manifest["config"]))
    model.mapping.load_state_dict(state)
    model.train_log = manifest.get("train_log", [])
    model.eval()
    return model
