"""State-conditioned contrastive VAE over actions.

Two Gaussian encoders read (state, action): a *salient* one for structure
that only buffer actions carry and an *irrelevant* one for shared variation.
The decoder maps (state, salient, irrelevant) back to an action. Background
samples (orthonormal actions) are decoded with the salient code pinned to
zero, and a discriminator estimates the total correlation between the two
codes with the usual permutation trick.

Encoders and decoder see actions in centred box coordinates, so every
network here is bias-free ReLU and maps an all-zero input to an all-zero
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numkit as nk
from .replay import ActionBoxFrame, orthonormal_actions

KL_SIGNS = ("sum", "difference")


@dataclass
class CvaeConfig:
    hidden: int = 512
    latent_multiplier: int = 2
    beta: float = 1.0
    learning_rate: float = 1e-3
    disc_learning_rate: float = 1e-3
    elbo_kl_sign: str = "sum"

    def __post_init__(self):
        if self.elbo_kl_sign not in KL_SIGNS:
            raise ValueError(f"elbo_kl_sign must be one of {KL_SIGNS}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


class DiagGaussian(NamedTuple):
    mu: nk.Tensor
    log_var: nk.Tensor


@dataclass
class ContrastiveBatch:
    states: np.ndarray
    actions: np.ndarray
    background_states: np.ndarray
    background_actions: np.ndarray


@dataclass
class CvaeReport:
    recon_target: float
    kl_salient: float
    kl_irrelevant: float
    tc: float
    recon_background: float
    kl_background: float
    target_loss: float
    background_loss: float
    total: float
    disc_loss: float


class CvaeModel:
    def __init__(self, state_dim: int, action_dim: int, frame: ActionBoxFrame, config: CvaeConfig,
                 rng: np.random.Generator):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.frame = frame
        self.config = config
        self.latent_dim = config.latent_multiplier * action_dim
        h, L = (config.hidden, config.hidden), self.latent_dim

        def spec(n_in, n_out, out_act="identity"):
            return nk.MlpSpec(n_in, h, n_out, use_bias=False, activation="relu", output_activation=out_act)

        self.salient_encoder = nk.Mlp(spec(state_dim + action_dim, 2 * L), rng, "cvae.salient")
        self.irrelevant_encoder = nk.Mlp(spec(state_dim + action_dim, 2 * L), rng, "cvae.irrelevant")
        self.decoder = nk.Mlp(spec(state_dim + 2 * L, action_dim, "tanh"), rng, "cvae.decoder")
        self.discriminator = nk.Mlp(spec(2 * L, 1), rng, "cvae.disc")
        self.optimizer = nk.Adam(self.generator_params, learning_rate=config.learning_rate)
        self.disc_optimizer = nk.Adam(self.discriminator.params, learning_rate=config.disc_learning_rate)

    @property
    def generator_params(self) -> list[nk.Tensor]:
        return self.salient_encoder.params + self.irrelevant_encoder.params + self.decoder.params

    @property
    def networks(self) -> list[nk.Mlp]:
        return [self.salient_encoder, self.irrelevant_encoder, self.decoder, self.discriminator]

    def _split(self, out: nk.Tensor) -> DiagGaussian:
        L = self.latent_dim
        return DiagGaussian(out[:, :L], out[:, L:])

    def encode(self, states, actions) -> tuple[DiagGaussian, DiagGaussian]:
        x = nk.concat([nk.as_tensor(np.atleast_2d(states)), nk.as_tensor(self.frame.to_centered(np.atleast_2d(actions)))])
        return self._split(self.salient_encoder(x)), self._split(self.irrelevant_encoder(x))

    def encode_irrelevant(self, states, actions) -> DiagGaussian:
        x = nk.concat([nk.as_tensor(np.atleast_2d(states)), nk.as_tensor(self.frame.to_centered(np.atleast_2d(actions)))])
        return self._split(self.irrelevant_encoder(x))

    def decode(self, states, salient, irrelevant) -> nk.Tensor:
        """Decoder output in centred coordinates, inside [-1, 1]^n."""
        return self.decoder(nk.concat([nk.as_tensor(states), nk.as_tensor(salient), nk.as_tensor(irrelevant)]))

    # -- checkpoint helpers --------------------------------------------------
    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for net in self.networks for p in net.params}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for net in self.networks:
            for p in net.params:
                p.data[...] = arrays[p.name]


def reparameterized_sample(dist: DiagGaussian, rng: np.random.Generator) -> nk.Tensor:
    """mu + sigma * eps with eps ~ N(0, I); differentiable in mu and log_var."""
    return nk.gaussian_sample(dist.mu, dist.log_var, rng.standard_normal(dist.mu.shape))


def gaussian_nll(target: np.ndarray, recon: nk.Tensor) -> nk.Tensor:
    """Per-row negative log-density of ``target`` under N(recon, I)."""
    d = target.shape[-1]
    return nk.half_sq_error(recon, target) + 0.5 * d * math.log(2 * math.pi)


def _target_terms(model: CvaeModel, states, actions, rng):
    q_s, q_z = model.encode(states, actions)
    s_bar = reparameterized_sample(q_s, rng)
    z = reparameterized_sample(q_z, rng)
    recon = model.decode(np.atleast_2d(states), s_bar, z)
    nll = gaussian_nll(model.frame.to_centered(np.atleast_2d(actions)), recon)
    kl_s = nk.gaussian_kl(q_s.mu, q_s.log_var)
    kl_z = nk.gaussian_kl(q_z.mu, q_z.log_var)
    return nll, kl_s, kl_z, s_bar, z


def _combine_target(model: CvaeModel, nll, kl_s, kl_z) -> nk.Tensor:
    beta = model.config.beta
    if model.config.elbo_kl_sign == "sum":
        return nll + (kl_s + kl_z) * beta
    return nll + (kl_s - kl_z) * beta


def elbo_target(model: CvaeModel, states, actions, rng: np.random.Generator) -> nk.Tensor:
    """Mean negative target ELBO over the batch (a loss to minimise)."""
    nll, kl_s, kl_z, _, _ = _target_terms(model, states, actions, rng)
    return _combine_target(model, nll, kl_s, kl_z).mean()


def _background_terms(model: CvaeModel, states, others, rng):
    states = np.atleast_2d(states)
    q_z = model.encode_irrelevant(states, others)
    z = reparameterized_sample(q_z, rng)
    zeros = np.zeros((len(states), model.latent_dim))
    recon = model.decode(states, zeros, z)
    nll = gaussian_nll(model.frame.to_centered(np.atleast_2d(others)), recon)
    return nll, nk.gaussian_kl(q_z.mu, q_z.log_var)


def elbo_background(model: CvaeModel, states, others, rng: np.random.Generator) -> nk.Tensor:
    """Mean negative background ELBO; the salient code is fixed at zero."""
    nll, kl_z = _background_terms(model, states, others, rng)
    return (nll + kl_z * model.config.beta).mean()


def total_correlation(model: CvaeModel, salient, irrelevant) -> nk.Tensor:
    """Mean discriminator log-odds log(D / (1 - D)) on joint latent pairs.

    The discriminator enters as a constant, so gradients reach the encoders only.
    """
    salient, irrelevant = nk.as_tensor(salient), nk.as_tensor(irrelevant)
    if len(salient) < 2:
        raise ValueError("total correlation needs a batch of at least 2")
    return model.discriminator(nk.concat([salient, irrelevant]), detach_params=True).mean()


def discriminator_loss(model: CvaeModel, salient: np.ndarray, irrelevant: np.ndarray, perm: np.ndarray) -> nk.Tensor:
    n = len(salient)
    pairs = np.concatenate([np.concatenate([salient, irrelevant], axis=1),
                            np.concatenate([salient, irrelevant[perm]], axis=1)])
    logits = model.discriminator(pairs)
    # positives for the first n rows, negatives for the permuted rest
    sign = np.concatenate([-np.ones((n, 1)), np.ones((n, 1))])
    return nk.softplus(logits * sign).sum() * (1.0 / n)


def train_discriminator(model: CvaeModel, salient, irrelevant, rng: np.random.Generator) -> float:
    """One BCE step: joint pairs are positives, batch-permuted pairs negatives."""
    salient = np.asarray(getattr(salient, "data", salient))
    irrelevant = np.asarray(getattr(irrelevant, "data", irrelevant))
    if len(salient) < 2:
        raise ValueError("discriminator training needs a batch of at least 2")
    perm = rng.permutation(len(salient))
    loss = discriminator_loss(model, salient, irrelevant, perm)
    model.disc_optimizer.minimize(loss)
    return loss.item()


def cvae_loss(model: CvaeModel, batch: ContrastiveBatch, rng: np.random.Generator):
    """Loss to minimise: mean target loss + mean TC + mean background loss.

    Target and background rows share one pass through the irrelevant encoder
    and the decoder; the noise draws match the separate ELBO functions.
    Returns (total, parts, salient_sample, irrelevant_sample).
    """
    states, actions = np.atleast_2d(batch.states), np.atleast_2d(batch.actions)
    n, nb, L = len(states), len(batch.background_states), model.latent_dim
    centred = model.frame.to_centered(actions)
    x = np.concatenate([states, centred], axis=1)
    if nb:
        bg_states = np.atleast_2d(batch.background_states)
        bg_centred = model.frame.to_centered(np.atleast_2d(batch.background_actions))
        all_states = np.concatenate([states, bg_states])
        x_all = np.concatenate([x, np.concatenate([bg_states, bg_centred], axis=1)])
    else:
        all_states, x_all = states, x
    q_s = model._split(model.salient_encoder(nk.Tensor(x)))
    q_z = model._split(model.irrelevant_encoder(nk.Tensor(x_all)))
    s_bar = reparameterized_sample(q_s, rng)
    eps_z = rng.standard_normal((n, L))
    if nb:
        eps_z = np.concatenate([eps_z, rng.standard_normal((nb, L))])
    z_all = nk.gaussian_sample(q_z.mu, q_z.log_var, eps_z)
    salient_all = nk.concat([s_bar, nk.Tensor(np.zeros((nb, L)))], axis=0) if nb else s_bar
    recon = model.decode(all_states, salient_all, z_all)
    targets = np.concatenate([centred, bg_centred]) if nb else centred
    nll_all = gaussian_nll(targets, recon)
    kl_z_all = nk.gaussian_kl(q_z.mu, q_z.log_var)
    nll, kl_z, z = nll_all[:n], kl_z_all[:n], z_all[:n]
    kl_s = nk.gaussian_kl(q_s.mu, q_s.log_var)

    target = _combine_target(model, nll, kl_s, kl_z).mean()
    tc = total_correlation(model, s_bar, z) if n >= 2 else nk.Tensor(0.0)
    parts = {
        "recon_target": nll.mean(),
        "kl_salient": kl_s.mean(),
        "kl_irrelevant": kl_z.mean(),
        "tc": tc,
        "target_loss": target,
    }
    total = target + tc
    if nb:
        b_nll, b_kl = nll_all[n:], kl_z_all[n:]
        background = (b_nll + b_kl * model.config.beta).mean()
        parts.update(recon_background=b_nll.mean(), kl_background=b_kl.mean(), background_loss=background)
        total = total + background
    else:
        zero = nk.Tensor(0.0)
        parts.update(recon_background=zero, kl_background=zero, background_loss=zero)
    return total, parts, s_bar, z


def cvae_step(model: CvaeModel, batch: ContrastiveBatch, rng: np.random.Generator) -> CvaeReport:
    """One generator step on the contrastive objective, then one discriminator step."""
    if len(batch.states) == 0:
        raise ValueError("empty contrastive batch")
    total, parts, s_bar, z = cvae_loss(model, batch, rng)
    model.optimizer.minimize(total)
    disc = train_discriminator(model, s_bar.data, z.data, rng) if len(batch.states) >= 2 else float("nan")
    return CvaeReport(**{k: v.item() for k, v in parts.items()}, total=total.item(), disc_loss=disc)


def augment_all_background(states: np.ndarray, actions: np.ndarray, frame: ActionBoxFrame):
    """Every state paired with every one of its n-1 orthonormal actions."""
    v = orthonormal_actions(np.atleast_2d(actions), frame)  # (N, k-1, n)
    k1 = v.shape[1]
    return np.repeat(np.atleast_2d(states), k1, axis=0), v.reshape(-1, v.shape[-1])


def sample_candidates(model: CvaeModel, states, m: int, rng: np.random.Generator, dtype=nk.DTYPE) -> np.ndarray:
    """Decode ``m`` actions per state from prior latents.

    (sd,) -> (m, n); (N, sd) -> (N, m, n). All outputs lie in the action box.
    """
    if m < 1:
        raise ValueError("need at least one candidate")
    states = np.asarray(states, dtype=float)
    single = states.ndim == 1
    states = np.atleast_2d(states)
    n = len(states)
    L = model.latent_dim
    reps = np.repeat(states, m, axis=0)
    s_bar = rng.standard_normal((n * m, L))
    z = rng.standard_normal((n * m, L))
    out = model.decoder.predict(np.concatenate([reps, s_bar, z], axis=1), dtype)
    actions = model.frame.from_centered(out).reshape(n, m, -1)
    return actions[0] if single else actions
