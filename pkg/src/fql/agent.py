"""FQL agent and a TD3-lite baseline built on the same substrate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numkit as nk
from .cvae import (
    ContrastiveBatch,
    CvaeConfig,
    CvaeModel,
    augment_all_background,
    cvae_step,
    sample_candidates,
)
from .replay import ActionBoxFrame, Batch, ReplayBuffer, orthonormal_actions

ACTOR_MODES = ("deterministic_actor", "cvae_argmax")
HETERO_MODES = ("critic_select", "augment_all")
# batch x candidates rows per target computation; single precision halves the matmul cost
TARGET_DTYPE = np.float32


@dataclass
class AgentConfig:
    gamma: float = 0.99
    batch_size: int = 256
    tau: float = 0.005
    target_update_interval: int = 2
    exploration_sigma: float = 0.1  # fraction of the half box width
    num_candidates: int = 10
    actor_mode: str = "deterministic_actor"
    hetero_mode: str = "critic_select"
    critic_lr: float = 1e-3
    actor_lr: float = 3e-4
    hidden: int = 256
    cvae_hidden: int = 512
    cvae_lr: float = 1e-3
    disc_lr: float = 1e-3
    beta: float = 1.0
    latent_multiplier: int = 2
    elbo_kl_sign: str = "sum"
    # TD3-lite only
    policy_noise: float = 0.2
    noise_clip: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.num_candidates < 1 or self.batch_size < 1 or self.target_update_interval < 1:
            raise ValueError("num_candidates, batch_size and target_update_interval must be >= 1")
        if self.actor_mode not in ACTOR_MODES:
            raise ValueError(f"actor_mode must be one of {ACTOR_MODES}")
        if self.hetero_mode not in HETERO_MODES:
            raise ValueError(f"hetero_mode must be one of {HETERO_MODES}")
        for name in ("critic_lr", "actor_lr", "cvae_lr", "disc_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.exploration_sigma < 0:
            raise ValueError("exploration_sigma must be non-negative")

    def cvae_config(self) -> CvaeConfig:
        return CvaeConfig(hidden=self.cvae_hidden, latent_multiplier=self.latent_multiplier, beta=self.beta,
                          learning_rate=self.cvae_lr, disc_learning_rate=self.disc_lr,
                          elbo_kl_sign=self.elbo_kl_sign)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


def critic_target_from_values(rewards, dones, gamma: float, q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """y = r + gamma (1 - done) max_d min(Q1, Q2) for (N, m) candidate values."""
    q1, q2 = np.atleast_2d(q1), np.atleast_2d(q2)
    best = np.minimum(q1, q2).max(axis=1)
    return np.asarray(rewards, dtype=float) + gamma * (1.0 - np.asarray(dones, dtype=float)) * best


def _check_finite(value: nk.Tensor, what: str) -> None:
    if not np.isfinite(value.data).all():
        raise nk.NonFiniteError(f"{what} became non-finite ({value.data}); aborting run")


class ActorCritic:
    """Twin critics, a deterministic tanh actor and their Polyak targets."""

    def __init__(self, state_dim: int, action_dim: int, action_low, action_high, config: AgentConfig,
                 rng: np.random.Generator):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.frame = ActionBoxFrame(action_low, action_high)
        self.config = config
        h = (config.hidden, config.hidden)
        critic_spec = nk.MlpSpec(state_dim + action_dim, h, 1)
        self.critic1 = nk.Mlp(critic_spec, rng, "critic1")
        self.critic2 = nk.Mlp(critic_spec, rng, "critic2")
        self.actor = nk.Mlp(nk.MlpSpec(state_dim, h, action_dim, output_activation="tanh"), rng, "actor")
        self.critic1_target = self.critic1.copy("critic1_target")
        self.critic2_target = self.critic2.copy("critic2_target")
        self.actor_target = self.actor.copy("actor_target")
        self.critic_optimizer = nk.Adam(self.critic1.params + self.critic2.params, learning_rate=config.critic_lr)
        self.actor_optimizer = nk.Adam(self.actor.params, learning_rate=config.actor_lr)

    # -- evaluation helpers ---------------------------------------------------
    def q_values(self, critic: nk.Mlp, states, actions, dtype=nk.DTYPE) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return critic.predict(x, dtype)[:, 0]

    def _actor_tensor(self, actor: nk.Mlp, states) -> nk.Tensor:
        return actor(states) * self.frame.radius + self.frame.shift

    def actor_action(self, states, target: bool = False) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        actor = self.actor_target if target else self.actor
        out = actor.predict(np.atleast_2d(states)) * self.frame.radius + self.frame.shift
        return out[0] if states.ndim == 1 else out

    def select_exploration_action(self, state, rng: np.random.Generator) -> np.ndarray:
        """Actor output plus Gaussian noise, clipped to the action box."""
        a = self.actor_action(state)
        sigma = self.config.exploration_sigma * self.frame.radius
        if self.config.exploration_sigma > 0:
            a = a + sigma * rng.standard_normal(a.shape)
        return np.clip(a, self.frame.low, self.frame.high)

    def policy_action(self, state, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.actor_action(state)

    # -- updates ------------------------------------------------------------
    def update_critics(self, batch: Batch, targets: np.ndarray) -> float:
        """One Adam step on mean_i sum_l (Q_l(s_i, a_i) - y_i)^2 with y held fixed."""
        x = np.concatenate([batch.states, batch.actions], axis=1)
        y = np.asarray(targets, dtype=float)[:, None]
        loss = nk.square(self.critic1(x) - y).mean() + nk.square(self.critic2(x) - y).mean()
        _check_finite(loss, "critic loss")
        self.critic_optimizer.minimize(loss)
        return loss.item()

    def actor_loss(self, states: np.ndarray) -> nk.Tensor:
        actions = self._actor_tensor(self.actor, states)
        q = self.critic1(nk.concat([nk.as_tensor(states), actions]), detach_params=True)
        return -q.mean()

    def update_actor(self, batch: Batch) -> float:
        loss = self.actor_loss(batch.states)
        _check_finite(loss, "actor loss")
        self.actor_optimizer.minimize(loss)
        return loss.item()

    def update_targets(self) -> None:
        tau = self.config.tau
        nk.polyak_update(self.critic1_target.params, self.critic1.params, tau)
        nk.polyak_update(self.critic2_target.params, self.critic2.params, tau)
        nk.polyak_update(self.actor_target.params, self.actor.params, tau)

    # -- checkpoints --------------------------------------------------------
    def networks(self) -> list[nk.Mlp]:
        return [self.critic1, self.critic2, self.actor, self.critic1_target, self.critic2_target, self.actor_target]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.networks():
            for p in net.params:
                out[f"{net.name}/{p.name.split('.', 1)[1]}"] = p.data
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for net in self.networks():
            for p in net.params:
                p.data[...] = arrays[f"{net.name}/{p.name.split('.', 1)[1]}"]


class FqlAgent(ActorCritic):
    """Actor-critic whose bootstrap targets come from cVAE action proposals."""

    def __init__(self, state_dim, action_dim, action_low, action_high, config: AgentConfig,
                 rng: np.random.Generator):
        super().__init__(state_dim, action_dim, action_low, action_high, config, rng)
        self.cvae = CvaeModel(state_dim, action_dim, self.frame, config.cvae_config(), rng)

    def networks(self):
        return super().networks() + self.cvae.networks

    def compute_critic_target(self, rewards, next_states, dones, rng: np.random.Generator) -> np.ndarray:
        """r + gamma (1 - done) * max over cVAE candidates of min over target critics."""
        next_states = np.atleast_2d(next_states)
        n, m = len(next_states), self.config.num_candidates
        cand = sample_candidates(self.cvae, next_states, m, rng, TARGET_DTYPE).reshape(n * m, -1)
        reps = np.repeat(next_states, m, axis=0)
        q1 = self.q_values(self.critic1_target, reps, cand, TARGET_DTYPE).reshape(n, m)
        q2 = self.q_values(self.critic2_target, reps, cand, TARGET_DTYPE).reshape(n, m)
        return critic_target_from_values(rewards, dones, self.config.gamma, q1, q2)

    def select_policy_action(self, state, rng: np.random.Generator) -> np.ndarray:
        """Candidate argmax under critic 1 (ties go to the lowest index)."""
        cand = sample_candidates(self.cvae, np.asarray(state, dtype=float), self.config.num_candidates, rng)
        q = self.q_values(self.critic1, np.repeat(np.atleast_2d(state), len(cand), axis=0), cand)
        return cand[int(np.argmax(q))]

    def policy_action(self, state, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.config.actor_mode == "cvae_argmax":
            return self.select_policy_action(state, rng if rng is not None else np.random.default_rng(0))
        return self.actor_action(state)

    def select_exploration_action(self, state, rng: np.random.Generator) -> np.ndarray:
        if self.config.actor_mode == "cvae_argmax":
            a = self.select_policy_action(state, rng)
            a = a + self.config.exploration_sigma * self.frame.radius * rng.standard_normal(a.shape)
            return np.clip(a, self.frame.low, self.frame.high)
        return super().select_exploration_action(state, rng)

    def select_worst_orthonormal(self, states, v_list) -> np.ndarray:
        """Per state, the orthonormal action with the lowest critic-1 value.

        states (sd,) with v_list (k, n) -> (n,); states (N, sd) with (N, k, n) -> (N, n).
        """
        v_list = np.asarray(v_list, dtype=float)
        if v_list.size == 0:
            raise ValueError("need at least one orthonormal action")
        single = v_list.ndim == 2
        states = np.atleast_2d(states)
        v = v_list[None] if single else v_list
        n, k, _ = v.shape
        if k == 1:  # nothing to choose between
            return v_list[0] if single else v[:, 0]
        q = self.q_values(self.critic1, np.repeat(states, k, axis=0), v.reshape(n * k, -1)).reshape(n, k)
        picked = v[np.arange(n), np.argmin(q, axis=1)]
        return picked[0] if single else picked

    def contrastive_batch(self, batch: Batch) -> ContrastiveBatch:
        if self.config.hetero_mode == "augment_all":
            bs, bv = augment_all_background(batch.states, batch.actions, self.frame)
        else:
            bs = batch.states
            bv = self.select_worst_orthonormal(batch.states, orthonormal_actions(batch.actions, self.frame))
        return ContrastiveBatch(batch.states, batch.actions, bs, bv)

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator, step_index: int) -> dict:
        batch = buffer.sample(self.config.batch_size, rng)
        y = self.compute_critic_target(batch.rewards, batch.next_states, batch.dones, rng)
        critic_loss = self.update_critics(batch, y)
        actor_loss = self.update_actor(batch) if self.config.actor_mode == "deterministic_actor" else float("nan")
        report = cvae_step(self.cvae, self.contrastive_batch(batch), rng)
        if step_index % self.config.target_update_interval == 0:
            self.update_targets()
        return {"critic_loss": critic_loss, "actor_loss": actor_loss, **vars(report)}


class Td3Lite(ActorCritic):
    """Twin critics, target policy smoothing and delayed actor/target updates."""

    def compute_critic_target(self, rewards, next_states, dones, rng: np.random.Generator) -> np.ndarray:
        next_states = np.atleast_2d(next_states)
        a = self.actor_action(next_states, target=True)
        r = self.frame.radius
        noise = np.clip(self.config.policy_noise * r * rng.standard_normal(a.shape),
                        -self.config.noise_clip * r, self.config.noise_clip * r)
        a = np.clip(a + noise, self.frame.low, self.frame.high)
        q1 = self.q_values(self.critic1_target, next_states, a)[:, None]
        q2 = self.q_values(self.critic2_target, next_states, a)[:, None]
        return critic_target_from_values(rewards, dones, self.config.gamma, q1, q2)

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator, step_index: int) -> dict:
        batch = buffer.sample(self.config.batch_size, rng)
        y = self.compute_critic_target(batch.rewards, batch.next_states, batch.dones, rng)
        critic_loss = self.update_critics(batch, y)
        actor_loss = float("nan")
        if step_index % self.config.target_update_interval == 0:
            actor_loss = self.update_actor(batch)
            self.update_targets()
        return {"critic_loss": critic_loss, "actor_loss": actor_loss}


def make_agent(kind: str, state_dim, action_dim, action_low, action_high, config: AgentConfig,
               rng: np.random.Generator) -> ActorCritic:
    if kind == "fql":
        return FqlAgent(state_dim, action_dim, action_low, action_high, config, rng)
    if kind == "td3_lite":
        return Td3Lite(state_dim, action_dim, action_low, action_high, config, rng)
    raise ValueError(f"unknown agent kind {kind!r}")
