"""Safety-aware bisimulation learning for the state encoder.

Two states are close when they earn similar rewards, incur similar costs and
lead to similar next-state distributions.  The encoder is regressed so that
the L1 distance between latents matches that target distance::

    d(s1, s2) = |r1 - r2| + lam |c1 - c2| + gamma_b W2(p(.|s1, a1), p(.|s2, a2))
    loss      = mean((|phi(s1) - sg(phi(s2))|_1 - d)^2)

Next-state distributions come from the world model's factor heads (detached)
and are pushed through the encoder by first-order linearisation, which keeps
them diagonal Gaussians so ``W2`` has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dataset import FACTORS, Batch, DatasetError, OfflineDataset
from .optim import OptimState, adam_step, clip_grad_norm, collect_grads, zero_grads


@dataclass(frozen=True)
class BisimConfig:
    lam: float = 1.0  # weight on the cost difference
    gamma: float = 0.99  # weight on the dynamics distance
    seed: int = 0  # pairing stream

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class PairBatch:
    """Side 1 is the minibatch as sampled, side 2 the same rows permuted.

    ``mu``/``sigma`` describe the predicted next-state distribution in
    latent space, one diagonal Gaussian per row.
    """

    s1: dict[str, np.ndarray]
    a1: np.ndarray
    r1: np.ndarray
    c1: np.ndarray
    mu1: np.ndarray
    sigma1: np.ndarray
    s2: dict[str, np.ndarray]
    a2: np.ndarray
    r2: np.ndarray
    c2: np.ndarray
    mu2: np.ndarray
    sigma2: np.ndarray
    perm: np.ndarray

    def __len__(self) -> int:
        return len(self.r1)

    def swapped(self) -> "PairBatch":
        return PairBatch(self.s2, self.a2, self.r2, self.c2, self.mu2, self.sigma2,
                         self.s1, self.a1, self.r1, self.c1, self.mu1, self.sigma1, np.argsort(self.perm))


def w2_gaussian(mu1, sigma1, mu2, sigma2) -> np.ndarray:
    """2-Wasserstein distance between diagonal Gaussians (reduces the last axis)."""
    sigma1 = np.asarray(sigma1, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if (sigma1 < 0).any() or (sigma2 < 0).any():
        raise ValueError("standard deviations must be non-negative")
    dm = np.asarray(mu1, dtype=float) - np.asarray(mu2, dtype=float)
    ds = sigma1 - sigma2
    return np.sqrt(np.sum(dm * dm, axis=-1) + np.sum(ds * ds, axis=-1))


def latent_gaussian(model, mu_obs: dict[str, np.ndarray], sigma_obs: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Push diagonal observation-space Gaussians through the encoder.

    Mean maps to ``phi(mu)``; the standard deviation uses the diagonal of
    ``J diag(sigma^2) J^T`` with ``J`` the encoder Jacobian at ``mu``.
    Pure numpy, nothing is recorded for differentiation.
    """
    P = {k: v.data for k, v in model.params.items() if k.startswith("enc.")}
    d = P["enc.fuse.b"].shape[0]
    pre = [mu_obs[f] @ P[f"enc.{f}.W"] + P[f"enc.{f}.b"] for f in FACTORS]
    h = np.tanh(np.concatenate(pre, axis=-1))
    mu_z = h @ P["enc.fuse.W"] + P["enc.fuse.b"]
    gate = 1.0 - h * h
    var = np.zeros_like(mu_z)
    for i, f in enumerate(FACTORS):
        sl = slice(i * d, (i + 1) * d)
        # J_f[n, j, k] = sum_m W_f[j, m] gate[n, m] W_fuse[m, k]
        jac = (P[f"enc.{f}.W"] * gate[..., None, sl]) @ P["enc.fuse.W"][sl]
        var += np.sum((sigma_obs[f][..., :, None] * jac) ** 2, axis=-2)
    return mu_z, np.sqrt(var)


def make_pairs(s: dict[str, np.ndarray], a, r, c, mu, sigma, rng: np.random.Generator) -> PairBatch:
    """Pair each row with a uniformly shuffled copy of the same minibatch."""
    n = len(r)
    perm = rng.permutation(n)
    return PairBatch(
        s1=s, a1=a, r1=r, c1=c, mu1=mu, sigma1=sigma,
        s2={k: v[perm] for k, v in s.items()}, a2=a[perm], r2=r[perm], c2=c[perm],
        mu2=mu[perm], sigma2=sigma[perm], perm=perm,
    )


def pairs_from_batch(model, batch: Batch, dyn: dict | None, rng: np.random.Generator) -> PairBatch:
    """Pairs from the newest step of each window.

    ``dyn`` holds the model's factor heads ``(mu, log_sigma)`` for the batch;
    when absent the next-state distribution collapses to the observed next
    state with zero spread.
    """
    s = {f: batch.obs[f][:, -1] for f in FACTORS}
    if dyn is None:
        mu_obs = {f: batch.next_obs[f][:, -1] for f in FACTORS}
        sig_obs = {f: np.zeros_like(mu_obs[f]) for f in FACTORS}
    else:
        mu_obs = {f: dyn[f][0].data[:, -1] for f in FACTORS}
        sig_obs = {f: np.exp(np.clip(dyn[f][1].data[:, -1], ag.LOG_SIGMA_MIN, ag.LOG_SIGMA_MAX)) for f in FACTORS}
    mu, sigma = latent_gaussian(model, mu_obs, sig_obs)
    return make_pairs(s, batch.actions[:, -1], batch.rewards[:, -1], batch.costs[:, -1], mu, sigma, rng)


def bisim_target(pair: PairBatch, cfg: BisimConfig = BisimConfig()) -> np.ndarray:
    """Per-pair target distance; a plain array, so no gradient can reach it."""
    dr = np.abs(np.asarray(pair.r1, dtype=float) - np.asarray(pair.r2, dtype=float))
    dc = np.abs(np.asarray(pair.c1, dtype=float) - np.asarray(pair.c2, dtype=float))
    return dr + cfg.lam * dc + cfg.gamma * w2_gaussian(pair.mu1, pair.sigma1, pair.mu2, pair.sigma2)


def latent_bisim_loss(z1: Tensor, z2: Tensor, target: np.ndarray) -> Tensor:
    """Squared gap between ``|z1 - sg(z2)|_1`` and the target, batch mean."""
    dist = (z1 - z2.detach()).abs().sum(axis=-1)
    resid = dist - Tensor(np.asarray(target, dtype=float))
    return (resid * resid).mean()


def bisim_loss(model, pair: PairBatch, target: np.ndarray) -> Tensor:
    return latent_bisim_loss(model.encode(pair.s1), model.encode(pair.s2), target)


def encoder_update(model, loss: Tensor, state: OptimState, grad_clip: float = 1.0) -> float:
    """Backpropagate ``loss`` and step only the encoder parameters."""
    enc = model.encoder_params()
    model.zero_grad()
    loss.backward()
    grads = collect_grads(enc)
    norm = clip_grad_norm(grads, grad_clip)
    adam_step(enc, grads, state)
    zero_grads(model.params)
    return norm


def cbl_step(dataset: OfflineDataset, model, cfg: BisimConfig, state: OptimState, rng: np.random.Generator,
             batch_size: int = 16, H: int | None = None, weight: float = 1.0, grad_clip: float = 1.0) -> float:
    """One bisimulation update of the encoder from a fresh minibatch.

    Dynamics come from a deterministic forward pass of the world model;
    returns the unweighted loss.
    """
    if len(dataset) == 0 or dataset.total_steps == 0:
        raise DatasetError("cannot run bisimulation on an empty dataset")
    H = H or model.cfg.context_len
    batch = dataset.sample_windows(batch_size, H, rng)
    out = model(batch, training=False)
    pair = pairs_from_batch(model, batch, out.dyn, rng)
    loss = bisim_loss(model, pair, bisim_target(pair, cfg))
    encoder_update(model, loss * weight, state, grad_clip)
    return loss.item()


__all__ = [
    "BisimConfig", "PairBatch", "w2_gaussian", "latent_gaussian", "make_pairs", "pairs_from_batch",
    "bisim_target", "latent_bisim_loss", "bisim_loss", "encoder_update", "cbl_step",
]
