"""Exact tabular laboratory for buffer-induced extrapolation error.

States of an induced MDP are the base states plus one extra absorbing
terminal, ``s_init`` (index ``S``). Pairs never seen in the buffer jump there
with reward equal to their initial value estimate. Everything here is exact
linear algebra or fixed-point iteration on small tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import FiniteMdp


@dataclass
class TabularBuffer:
    """Transition counts ``counts[s, a, s']`` and initial values ``q_init[s, a]``."""

    counts: np.ndarray
    q_init: np.ndarray = field(default=None)

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 3 or counts.shape[0] != counts.shape[2]:
            raise ValueError("counts must have shape (S, A, S)")
        if np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("counts must be non-negative integers")
        self.counts = counts.astype(np.int64)
        if self.q_init is None:
            self.q_init = np.zeros(counts.shape[:2])
        self.q_init = np.asarray(self.q_init, dtype=float)
        if self.q_init.shape != counts.shape[:2]:
            raise ValueError("q_init must have shape (S, A)")

    @property
    def observed(self) -> np.ndarray:
        """Boolean (S, A) mask of pairs with at least one stored transition."""
        return self.counts.sum(axis=2) > 0

    def pairs(self) -> list[tuple[int, int]]:
        return [tuple(map(int, p)) for p in np.argwhere(self.observed)]

    def is_empty(self) -> bool:
        return not self.counts.any()


@dataclass
class InducedMdp:
    base: FiniteMdp
    p_induced: np.ndarray  # (S+1, A, S+1)
    reward: np.ndarray  # (S+1, A, S+1)
    terminal_mask: np.ndarray  # (S+1,)

    @property
    def init_state(self) -> int:
        return self.base.num_states

    def as_finite(self) -> FiniteMdp:
        return FiniteMdp(self.p_induced, self.reward, self.base.gamma, self.terminal_mask)


def build_induced_mdp(mdp: FiniteMdp, buffer: TabularBuffer) -> InducedMdp:
    """Empirical kernel N / sum N; unobserved pairs go to ``s_init`` with reward q_init."""
    S, A = mdp.num_states, mdp.num_actions
    if buffer.counts.shape != (S, A, S):
        raise ValueError("buffer and MDP disagree on state/action counts")
    p = np.zeros((S + 1, A, S + 1))
    r = np.zeros((S + 1, A, S + 1))
    totals = buffer.counts.sum(axis=2)
    seen = totals > 0
    p[:S, :, :S][seen] = buffer.counts[seen] / totals[seen][:, None]
    p[:S, :, S][~seen] = 1.0
    r[:S, :, :S] = mdp.reward
    r[:S, :, S] = np.where(seen, 0.0, buffer.q_init)
    p[S, :, S] = 1.0
    terminal = np.append(mdp.terminal_mask, True)
    return InducedMdp(mdp, p, r, terminal)


def extend_policy(policy: np.ndarray, num_states: int) -> np.ndarray:
    """Pad a policy with uniform rows up to ``num_states`` (for absorbing extras)."""
    policy = np.asarray(policy, dtype=float)
    extra = num_states - policy.shape[0]
    if extra <= 0:
        return policy
    return np.vstack([policy, np.full((extra, policy.shape[1]), 1.0 / policy.shape[1])])


def _check_policy(policy: np.ndarray, S: int, A: int) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (S, A):
        raise ValueError(f"policy must have shape ({S}, {A})")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError("policy rows must be probability distributions")
    return policy


def _continuation(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    """Matrix M[(s,a), (s',a')] = p(s'|s,a) (1 - terminal(s')) pi(a'|s')."""
    S, A = mdp.num_states, mdp.num_actions
    p = mdp.transition * (~mdp.terminal_mask)[None, None, :]
    return (p[:, :, :, None] * policy[None, None, :, :]).reshape(S * A, S * A)


def expected_reward(mdp: FiniteMdp) -> np.ndarray:
    return (mdp.transition * mdp.reward).sum(axis=2)


def exact_policy_eval(mdp: FiniteMdp, policy) -> np.ndarray:
    """Q^pi by solving (I - gamma M) q = r_bar."""
    S, A = mdp.num_states, mdp.num_actions
    policy = _check_policy(extend_policy(policy, S), S, A)
    m = _continuation(mdp, policy)
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * m, expected_reward(mdp).ravel())
    return q.reshape(S, A)


def state_values(mdp: FiniteMdp, q: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """V(s) = sum_a pi(a|s) Q(s,a), zeroed on terminal states."""
    return np.where(mdp.terminal_mask, 0.0, (policy * q).sum(axis=1))


def value_iteration(mdp: FiniteMdp, allowed: np.ndarray | None = None, tol: float = 1e-13,
                    max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal Q with the max at each next state taken over ``allowed[s']`` only."""
    S, A = mdp.num_states, mdp.num_actions
    allowed = np.ones((S, A), dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool)
    if not allowed.any(axis=1).all():
        raise ValueError("every state needs at least one allowed action")
    r_bar = expected_reward(mdp)
    p = mdp.transition * (~mdp.terminal_mask)[None, None, :]
    q = np.zeros((S, A))
    for _ in range(max_iter):
        v = np.where(allowed, q, -np.inf).max(axis=1)
        new = r_bar + mdp.gamma * p @ v
        delta = np.max(np.abs(new - q))
        q = new
        if delta <= tol:
            break
    return q


def buffer_action_mask(buffer: TabularBuffer) -> np.ndarray:
    """Buffer-supported actions per state; states without any fall back to all actions."""
    mask = buffer.observed.copy()
    mask[~mask.any(axis=1)] = True
    return mask


def induced_allowed_mask(induced: InducedMdp, buffer: TabularBuffer) -> np.ndarray:
    return np.vstack([buffer_action_mask(buffer), np.ones(induced.p_induced.shape[1], dtype=bool)])


def constant_alpha(value: float = 1.0) -> Callable[[int], float]:
    return lambda t: value


def robbins_monro_alpha(power: float = 0.7) -> Callable[[int], float]:
    """alpha_t = 1 / (1 + t)^power, with t counted in sweeps."""
    return lambda t: 1.0 / (1.0 + t) ** power


def tabular_bcq(induced: InducedMdp, buffer: TabularBuffer, alpha_schedule: Callable[[int], float] | None = None,
                sweeps: int = 10_000, tol: float = 1e-13, trace: list | None = None) -> np.ndarray:
    """Batch-constrained Q-learning on the buffer's pairs.

    Each sweep updates every stored (s, a) in order, averaging the target over
    that pair's stored transitions; the bootstrap max at s' runs over actions
    present in the buffer at s' (all actions if there are none). Unstored pairs
    keep their initial value, which is also their exact value in the induced MDP.
    Returns Q over the base states, shape (S, A).
    """
    if buffer.is_empty():
        raise ValueError("tabular BCQ needs a nonempty buffer")
    alpha_schedule = alpha_schedule or constant_alpha(1.0)
    base = induced.base
    S = base.num_states
    gamma = base.gamma
    mask = buffer_action_mask(buffer)
    q = buffer.q_init.copy()
    pairs = buffer.pairs()
    totals = buffer.counts.sum(axis=2)
    alive = ~base.terminal_mask
    for t in range(sweeps):
        alpha = alpha_schedule(t)
        delta = 0.0
        for s, a in pairs:
            counts = buffer.counts[s, a]
            nxt = np.nonzero(counts)[0]
            boot = np.array([np.max(q[s2][mask[s2]]) if alive[s2] else 0.0 for s2 in nxt])
            target = float(np.dot(counts[nxt], base.reward[s, a, nxt] + gamma * boot) / totals[s, a])
            new = (1.0 - alpha) * q[s, a] + alpha * target
            delta = max(delta, abs(new - q[s, a]))
            q[s, a] = new
        if trace is not None:
            trace.append(delta)
        if delta <= tol:
            break
    assert q.shape == (S, base.num_actions)
    return q


def bcq_optimal_q(induced: InducedMdp, buffer: TabularBuffer) -> np.ndarray:
    """Value-iteration optimum of the induced MDP under the buffer action constraint."""
    q = value_iteration(induced.as_finite(), induced_allowed_mask(induced, buffer))
    return q[: induced.base.num_states]


def greedy_buffer_policy(q: np.ndarray, buffer: TabularBuffer) -> np.ndarray:
    """Deterministic policy (one-hot rows) picking the best buffer action per state."""
    mask = buffer_action_mask(buffer)
    best = np.where(mask, q, -np.inf).argmax(axis=1)
    return np.eye(q.shape[1])[best]


# -- extrapolation errors ---------------------------------------------------------
def _extended_true_kernel(mdp: FiniteMdp) -> np.ndarray:
    S, A = mdp.num_states, mdp.num_actions
    p0 = np.zeros((S, A, S + 1))
    p0[:, :, :S] = mdp.transition
    return p0


def _error_direct(mdp: FiniteMdp, induced: InducedMdp, policy) -> np.ndarray:
    S = mdp.num_states
    q0 = exact_policy_eval(mdp, policy)
    q_ind = exact_policy_eval(induced.as_finite(), policy)[:S]
    return q0 - q_ind


def _error_recursive(mdp: FiniteMdp, induced: InducedMdp, policy, tol: float = 1e-15,
                     max_iter: int = 1_000_000) -> np.ndarray:
    """E = b + gamma P0 Pi E with b = sum_s' (p0 - p_ind)(r + gamma V_ind), iterated to a fixed point."""
    S, A = mdp.num_states, mdp.num_actions
    policy = _check_policy(policy, S, A)
    ind = induced.as_finite()
    pol_ext = extend_policy(policy, S + 1)
    q_ind = exact_policy_eval(ind, pol_ext)
    v_ind = state_values(ind, q_ind, pol_ext)
    diff = _extended_true_kernel(mdp) - induced.p_induced[:S]
    b = (diff * (induced.reward[:S] + mdp.gamma * v_ind[None, None, :])).sum(axis=2)
    m = _continuation(mdp, policy)
    e = np.zeros(S * A)
    b = b.ravel()
    for _ in range(max_iter):
        new = b + mdp.gamma * (m @ e)
        delta = np.max(np.abs(new - e))
        e = new
        if delta <= tol * (1.0 + np.max(np.abs(e))):
            break
    return e.reshape(S, A)


def extrapolation_error_theta(mdp: FiniteMdp, induced: InducedMdp, policy, method: str = "direct") -> np.ndarray:
    """Q^pi under the true MDP minus Q^pi under the buffer-induced MDP, per (s, a)."""
    if method == "direct":
        return _error_direct(mdp, induced, policy)
    if method == "recursion":
        return _error_recursive(mdp, induced, policy)
    raise ValueError("method must be 'direct' or 'recursion'")


def default_derangement(num_actions: int) -> np.ndarray:
    if num_actions < 2:
        raise ValueError("pairing actions with a different action needs at least 2 actions")
    return (np.arange(num_actions) + 1) % num_actions


def heterogeneous_buffer(buffer: TabularBuffer, pairing: np.ndarray | None = None) -> TabularBuffer:
    """Counts of (s, a) taken from the paired action: N_h(s, a, .) = N(s, pairing[a], .).

    One-hot action embeddings make distinct indices exactly orthonormal, so any
    fixed-point-free pairing realises a perpendicular partner for every action.
    """
    A = buffer.counts.shape[1]
    pairing = default_derangement(A) if pairing is None else np.asarray(pairing, dtype=int)
    if sorted(pairing.tolist()) != list(range(A)) or np.any(pairing == np.arange(A)):
        raise ValueError("pairing must be a permutation without fixed points")
    return TabularBuffer(buffer.counts[:, pairing, :], buffer.q_init)


def extrapolation_error_rho(mdp: FiniteMdp, hetero: TabularBuffer, policy, method: str = "direct") -> np.ndarray:
    """Error against the MDP induced by the heterogeneous buffer."""
    return extrapolation_error_theta(mdp, build_induced_mdp(mdp, hetero), policy, method)


def friction_angle(e_theta, e_rho) -> np.ndarray:
    """arctan(|E_theta| / |E_rho|) elementwise, in [0, pi/2].

    Both zero gives 0; E_rho zero with E_theta nonzero gives pi/2.
    """
    num = np.abs(np.asarray(e_theta, dtype=float))
    den = np.abs(np.asarray(e_rho, dtype=float))
    return np.arctan2(num, den)


def sup_tv(mdp: FiniteMdp, induced: InducedMdp) -> float:
    """max over (s, a) of the total-variation distance between true and induced rows."""
    diff = _extended_true_kernel(mdp) - induced.p_induced[: mdp.num_states]
    return float(0.5 * np.abs(diff).sum(axis=2).max())


@dataclass
class BoundReport:
    e_rho_sup: float
    e_rho_bound: float
    e_theta_sup: float
    tv_theta: float
    tv_rho: float
    sup_angle: float
    angle_bound: float
    vacuous: bool

    @property
    def e_rho_margin(self) -> float:
        return self.e_rho_bound - self.e_rho_sup

    @property
    def angle_margin(self) -> float:
        return self.angle_bound - self.sup_angle

    @property
    def e_rho_holds(self) -> bool:
        return self.e_rho_sup <= self.e_rho_bound * (1 + 1e-12) + 1e-12

    @property
    def angle_holds(self) -> bool:
        return self.sup_angle <= self.angle_bound + 1e-12

    def as_dict(self) -> dict:
        out = dict(vars(self))
        out.update(e_rho_margin=self.e_rho_margin, angle_margin=self.angle_margin,
                   e_rho_holds=self.e_rho_holds, angle_holds=self.angle_holds)
        return out


def check_error_bounds(mdp: FiniteMdp, induced: InducedMdp, hetero: TabularBuffer, policy) -> BoundReport:
    """Sup-norm error bound for the heterogeneous kernel and the total-variation angle bound.

    The reward bound covers the initial values paid on jumps to ``s_init``.
    When the heterogeneous kernel matches the true one the angle bound is
    vacuous and reported as pi/2.
    """
    hetero_mdp = build_induced_mdp(mdp, hetero)
    e_theta = extrapolation_error_theta(mdp, induced, policy)
    e_rho = extrapolation_error_theta(mdp, hetero_mdp, policy)
    r_max = max(mdp.r_max, float(np.max(np.abs(hetero.q_init))), float(np.max(np.abs(induced.reward))))
    tv_theta, tv_rho = sup_tv(mdp, induced), sup_tv(mdp, hetero_mdp)
    e_rho_sup = float(np.max(np.abs(e_rho)))
    e_theta_sup = float(np.max(np.abs(e_theta)))
    bound = 2.0 * tv_rho * r_max / (1.0 - mdp.gamma) ** 2
    vacuous = tv_rho == 0.0
    angle_bound = math.pi / 2 if vacuous else math.atan(tv_theta / tv_rho)
    return BoundReport(e_rho_sup, bound, e_theta_sup, tv_theta, tv_rho,
                         float(friction_angle(e_theta_sup, e_rho_sup)), angle_bound, vacuous)


@dataclass
class FrictionReading:
    """Per-pair errors and angles, plus the inclined-plane picture of the sup-norms.

    The sup errors are read as the two force components of a block of weight
    m g = hypot(|E_theta|, |E_rho|) resting on a slope of the sup angle.
    """

    e_theta: np.ndarray
    e_rho: np.ndarray
    angle: np.ndarray
    tv_theta: float
    tv_rho: float
    mass: float
    gravity: float
    slope: float
    mu_s: float

    def __post_init__(self):
        if np.any(self.angle < 0) or np.any(self.angle > math.pi / 2):
            raise ValueError("angles must lie in [0, pi/2]")
        if not (0.0 <= self.tv_theta <= 1.0 and 0.0 <= self.tv_rho <= 1.0):
            raise ValueError("total-variation values must lie in [0, 1]")

    def equilibrium(self) -> "Equilibrium":
        return static_equilibrium(self.mass, self.gravity, self.slope, self.mu_s)


def friction_reading(mdp: FiniteMdp, buffer: TabularBuffer, policy, pairing=None, mu_s: float = 1.0) -> FrictionReading:
    induced = build_induced_mdp(mdp, buffer)
    hetero = heterogeneous_buffer(buffer, pairing)
    e_theta = extrapolation_error_theta(mdp, induced, policy)
    e_rho = extrapolation_error_rho(mdp, hetero, policy)
    sup_t, sup_r = float(np.max(np.abs(e_theta))), float(np.max(np.abs(e_rho)))
    return FrictionReading(e_theta, e_rho, friction_angle(e_theta, e_rho), sup_tv(mdp, induced),
                           sup_tv(mdp, build_induced_mdp(mdp, hetero)), 1.0, math.hypot(sup_t, sup_r),
                           float(friction_angle(sup_t, sup_r)), mu_s)


# -- mechanics -----------------------------------------------------------------
@dataclass(frozen=True)
class Equilibrium:
    holds: bool
    f_required: float
    f_max: float


def static_equilibrium(mass: float, gravity: float, slope_angle: float, mu_s: float) -> Equilibrium:
    """Block on an incline: holds iff m g sin(slope) <= mu_s m g cos(slope)."""
    if mass < 0 or gravity < 0 or mu_s < 0:
        raise ValueError("mass, gravity and mu_s must be non-negative")
    if not 0.0 <= slope_angle <= math.pi / 2:
        raise ValueError("slope_angle must lie in [0, pi/2]")
    weight = mass * gravity
    f_required = weight * math.sin(slope_angle)
    # cos(pi/2) is 6e-17 in floating point; the normal force really vanishes there
    normal = 0.0 if slope_angle == math.pi / 2 else weight * math.cos(slope_angle)
    f_max = mu_s * normal
    return Equilibrium(f_required <= f_max, f_required, f_max)


# -- buffers and coherence ---------------------------------------------------------
def check_coherence(buffer: TabularBuffer, mdp: FiniteMdp) -> bool:
    """Every stored next state is itself a stored source state or is terminal."""
    if buffer.is_empty():
        raise ValueError("coherence is undefined for an empty buffer")
    sources = buffer.observed.any(axis=1)
    targets = buffer.counts.sum(axis=(0, 1)) > 0
    return bool(np.all(~targets | sources | mdp.terminal_mask))


def full_coverage_buffer(mdp: FiniteMdp, samples_per_pair: int = 1, rng: np.random.Generator | None = None) -> TabularBuffer:
    """Every non-terminal (s, a) sampled ``samples_per_pair`` times; exact counts for deterministic MDPs."""
    S, A = mdp.num_states, mdp.num_actions
    counts = np.zeros((S, A, S), dtype=np.int64)
    for s in np.nonzero(~mdp.terminal_mask)[0]:
        for a in range(A):
            if mdp.is_deterministic():
                counts[s, a, int(np.argmax(mdp.transition[s, a]))] = samples_per_pair
            else:
                rng = rng or np.random.default_rng(0)
                counts[s, a] = rng.multinomial(samples_per_pair, mdp.transition[s, a])
    return TabularBuffer(counts)


def trajectory_buffer(mdp: FiniteMdp, behaviour: np.ndarray, episodes: int, horizon: int,
                      rng: np.random.Generator, start_states=None) -> TabularBuffer:
    """Counts from rollouts of a behaviour policy, each cut at a terminal or after ``horizon`` steps."""
    S, A = mdp.num_states, mdp.num_actions
    counts = np.zeros((S, A, S), dtype=np.int64)
    starts = np.nonzero(~mdp.terminal_mask)[0] if start_states is None else np.asarray(start_states)
    for _ in range(episodes):
        s = int(rng.choice(starts))
        for _ in range(horizon):
            a = int(rng.choice(A, p=behaviour[s]))
            s2 = int(rng.choice(S, p=mdp.transition[s, a]))
            counts[s, a, s2] += 1
            if mdp.terminal_mask[s2]:
                break
            s = s2
    return TabularBuffer(counts)


def random_policy(num_states: int, num_actions: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(num_actions), size=num_states)


def make_deterministic_mdp(num_states: int, num_actions: int, seed: int, gamma: float = 0.9,
                           num_terminal: int = 0) -> FiniteMdp:
    """Random deterministic MDP: one successor per (s, a), rewards uniform on [-1, 1]."""
    rng = np.random.default_rng(seed)
    p = np.zeros((num_states, num_actions, num_states))
    succ = rng.integers(0, num_states, size=(num_states, num_actions))
    np.put_along_axis(p, succ[:, :, None], 1.0, axis=2)
    mask = np.zeros(num_states, dtype=bool)
    if num_terminal:
        mask[-num_terminal:] = True
    return FiniteMdp(p, rng.uniform(-1.0, 1.0, size=p.shape), gamma, mask)
