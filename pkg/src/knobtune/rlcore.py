"""Deterministic actor-critic tuning loop with a tree-structured policy.

The agent observes normalized internal metrics, emits a normalized
configuration for the selected knobs (squashed through a sigmoid so
every action lands in [0, 1]), and is rewarded by how throughput and
latency moved against both the previous step and the initial
configuration. The critic is a small feedforward network trained on the
one-step bootstrapped value target; the policy ascends the critic by
backpropagating through it into the tree parameters. Target copies of
both networks are blended toward the online ones after every update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, RuntimeFailure
from .knobspace import KnobSchema, KnobVector
from .optim import Adam
from .softtree import (
    SoftTree,
    backward,
    forward,
    gumbel_weights,
    gumbel_weights_vjp,
    random_tree,
    sigmoid,
)

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"


# -- reward machinery ---------------------------------------------------------


def compute_delta(current: float, reference: float, orientation: str) -> float:
    """Relative performance change; positive always means improvement."""
    if not reference > 0:
        raise DataError(f"delta reference must be positive, got {reference}")
    if orientation == HIGHER_BETTER:
        return (current - reference) / reference
    if orientation == LOWER_BETTER:
        return (reference - current) / reference
    raise ConfigError(f"unknown orientation {orientation!r}")


def reward_component(delta_to_initial: float, delta_to_previous: float) -> float:
    """Reward for one metric from its two change rates.

    Positive iff the change against the initial configuration is
    positive; the magnitude grows quadratically with that change and is
    modulated by the change against the previous step.
    """
    d0, d1 = float(delta_to_initial), float(delta_to_previous)
    if d0 > 0:
        return ((1.0 + d0) ** 2 - 1.0) * abs(1.0 + d1)
    return -(((1.0 - d0) ** 2 - 1.0) * abs(1.0 - d1))


def combined_reward(r_throughput: float, r_latency: float, c_t: float, c_l: float) -> float:
    """Weighted blend of the throughput and latency rewards."""
    if c_t < 0 or c_l < 0 or abs(c_t + c_l - 1.0) > 1e-9:
        raise ConfigError(f"reward weights must be non-negative and sum to 1, got {c_t} + {c_l}")
    return c_t * r_throughput + c_l * r_latency


# -- transitions and replay ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class Transition:
    """One step of experience, everything already normalized."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool

    def __post_init__(self):
        for name in ("state", "action", "next_state"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if not np.isfinite(arr).all():
                raise DataError(f"transition {name} contains non-finite values")
        if not np.isfinite(self.reward):
            raise DataError("transition reward is non-finite")


class ReplayBuffer:
    """Fixed-capacity FIFO experience store with seeded batch sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._head = 0  # next slot to overwrite once full
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._data)

    def push(self, transition: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(transition)
        else:
            self._data[self._head] = transition  # overwrite the oldest
            self._head = (self._head + 1) % self.capacity

    def snapshot(self) -> list[Transition]:
        """Contents oldest-first."""
        return self._data[self._head :] + self._data[: self._head]

    def sample(self, batch_size: int) -> list[Transition]:
        if batch_size < 1:
            raise ConfigError("batch size must be positive")
        if len(self._data) < batch_size:
            raise DataError(f"buffer holds {len(self._data)} transitions, need {batch_size}")
        idx = self._rng.choice(len(self._data), size=batch_size, replace=False)
        return [self._data[i] for i in idx]


# -- critic -------------------------------------------------------------------


class Critic:
    """Feedforward value approximator Q(state, action) with manual gradients.

    Two rectified hidden layers then a linear scalar head.
    """

    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, int] = (128, 128), seed=0):
        if state_dim < 1 or action_dim < 1:
            raise ConfigError("critic dimensions must be positive")
        rng = np.random.default_rng(seed)
        dims = [state_dim + action_dim, hidden[0], hidden[1], 1]
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.weights = [
            rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i]))
            for i in range(3)
        ]
        self.weights[-1] *= 0.5  # keep initial value estimates small
        self.biases = [np.zeros(dims[i + 1]) for i in range(3)]

    def parameter_arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "Critic":
        other = Critic.__new__(Critic)
        other.state_dim = self.state_dim
        other.action_dim = self.action_dim
        other.hidden = self.hidden
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.state_dim + self.action_dim:
            raise DataError(f"critic expects {self.state_dim + self.action_dim} inputs")
        z1 = x @ self.weights[0].T + self.biases[0]
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.weights[1].T + self.biases[1]
        a2 = np.maximum(z2, 0.0)
        q = (a2 @ self.weights[2].T + self.biases[2])[:, 0]
        return q, (x, z1, a1, z2, a2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, cache: tuple, d_q: np.ndarray, need_input_grad: bool = False
    ) -> tuple[list[np.ndarray], np.ndarray | None]:
        """Gradients of sum(d_q * q) for all parameters (and inputs)."""
        x, z1, a1, z2, a2 = cache
        d3 = np.asarray(d_q, dtype=float)[:, None]
        d_w3 = d3.T @ a2
        d_b3 = d3.sum(axis=0)
        d_a2 = d3 @ self.weights[2]
        d_z2 = d_a2 * (z2 > 0)
        d_w2 = d_z2.T @ a1
        d_b2 = d_z2.sum(axis=0)
        d_a1 = d_z2 @ self.weights[1]
        d_z1 = d_a1 * (z1 > 0)
        d_w1 = d_z1.T @ x
        d_b1 = d_z1.sum(axis=0)
        grads = [d_w1, d_w2, d_w3, d_b1, d_b2, d_b3]
        d_x = d_z1 @ self.weights[0] if need_input_grad else None
        return grads, d_x


def soft_update(target, online, tau: float) -> None:
    """Blend target parameters toward the online ones: t <- tau*o + (1-tau)*t.

    Accepts any pair of objects exposing `parameter_arrays`, or two raw
    lists of arrays. Updates the target in place.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"soft-update rate must lie in [0, 1], got {tau}")
    t_arrays = target.parameter_arrays() if hasattr(target, "parameter_arrays") else list(target)
    o_arrays = online.parameter_arrays() if hasattr(online, "parameter_arrays") else list(online)
    if len(t_arrays) != len(o_arrays):
        raise ConfigError("target and online parameter lists differ in length")
    for t, o in zip(t_arrays, o_arrays):
        if t.shape != o.shape:
            raise ConfigError(f"parameter shape mismatch: {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o
    if hasattr(target, "mark_mutated"):
        target.mark_mutated()


# -- agent --------------------------------------------------------------------


@dataclass(frozen=True)
class AgentHyper:
    """Training hyperparameters; every field has an engine default."""

    discount: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 100_000
    noise_start: float = 0.2
    noise_end: float = 0.02
    c_t: float = 0.5
    c_l: float = 0.5
    warmup_steps: int | None = None  # defaults to 10 * batch_size
    use_gumbel: bool = True
    gumbel_temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError("discount must lie in (0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("soft-update rate must lie in (0, 1]")
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ConfigError("batch size and buffer capacity must be positive")
        if self.noise_start < 0 or self.noise_end < 0:
            raise ConfigError("noise scales must be non-negative")
        if self.c_t < 0 or self.c_l < 0 or abs(self.c_t + self.c_l - 1.0) > 1e-9:
            raise ConfigError("reward weights must be non-negative and sum to 1")
        if not self.gumbel_temperature > 0:
            raise ConfigError("gumbel temperature must be positive")

    @property
    def effective_warmup(self) -> int:
        return self.warmup_steps if self.warmup_steps is not None else 10 * self.batch_size


class DdpgAgent:
    """Tree policy + feedforward critic with their target copies."""

    def __init__(
        self,
        schema: KnobSchema,
        knob_indices: Sequence[int],
        metric_dim: int,
        hyper: AgentHyper = AgentHyper(),
        seed: int = 0,
        actor: SoftTree | None = None,
        actor_height: int = 5,
        actor_alpha0: float = 1.0,
    ):
        knob_indices = list(knob_indices)
        if not knob_indices:
            raise ConfigError("agent needs at least one knob to tune")
        self.schema = schema
        self.knob_indices = knob_indices
        self.tuned_schema = schema.subset(knob_indices)
        self.metric_dim = metric_dim
        self.hyper = hyper
        self.seed = seed
        self.rng = np.random.default_rng(seed)

        k = len(knob_indices)
        if actor is None:
            actor = random_tree(actor_height, metric_dim, k, alpha0=actor_alpha0, seed=seed)
        if actor.input_dim != metric_dim or actor.output_dim != k:
            raise ConfigError(
                f"actor tree maps {actor.input_dim}->{actor.output_dim}, "
                f"need {metric_dim}->{k}"
            )
        self.actor = actor
        self.actor_target = actor.copy()
        self.critic = Critic(metric_dim, k, seed=seed + 1)
        self.critic_target = self.critic.copy()
        self.buffer = ReplayBuffer(hyper.buffer_capacity, seed=seed + 2)
        self.actor_opt = Adam(self.actor.parameter_arrays(), lr=hyper.actor_lr)
        self.critic_opt = Adam(self.critic.parameter_arrays(), lr=hyper.critic_lr)
        self.updates_done = 0

    def policy_action(self, state: np.ndarray) -> np.ndarray:
        """Deterministic action for one state (or a batch of states)."""
        return sigmoid(forward(self.actor, state).output)


def select_action(actor: SoftTree, state: np.ndarray, noise_scale: float, seed) -> np.ndarray:
    """Policy action plus exploration noise, clamped into [0, 1]^k.

    The tree output is squashed through a sigmoid so gradients exist at
    the action bounds; Gaussian noise (std = noise_scale) then perturbs
    each component. Deterministic when noise_scale is zero.
    """
    if noise_scale < 0:
        raise ConfigError("noise scale must be non-negative")
    action = sigmoid(forward(actor, state).output)
    if noise_scale > 0:
        rng = np.random.default_rng(seed)
        action = np.clip(action + rng.normal(0.0, noise_scale, action.shape), 0.0, 1.0)
    return action


def td_targets(agent: DdpgAgent, batch: Sequence[Transition]) -> np.ndarray:
    """Bootstrapped value targets y = r + discount * (1 - done) * Q'(s', pi'(s'))."""
    next_states = np.stack([t.next_state for t in batch])
    rewards = np.array([t.reward for t in batch])
    done = np.array([t.done for t in batch], dtype=float)
    next_actions = sigmoid(forward(agent.actor_target, next_states).output)
    q_next = agent.critic_target(np.concatenate([next_states, next_actions], axis=1))
    return rewards + agent.hyper.discount * (1.0 - done) * q_next


def ddpg_update(agent: DdpgAgent, batch: Sequence[Transition]) -> tuple[float, float]:
    """One gradient step on the critic and one on the policy.

    The critic minimizes the mean squared one-step value error; the
    policy ascends the critic's estimate of its own actions by chaining
    the critic's input gradient through the action squashing into the
    tree parameters (through the Gumbel-perturbed node weights when
    enabled). Target networks are not touched here.

    Returns (critic loss, mean critic value of the policy's actions,
    measured before the policy step).
    """
    if not batch:
        raise DataError("ddpg_update needs a non-empty batch")
    states = np.stack([t.state for t in batch])
    actions = np.stack([t.action for t in batch])
    b = len(batch)

    # Critic step: fit the bootstrapped targets.
    y = td_targets(agent, batch)
    q, cache = agent.critic.forward(np.concatenate([states, actions], axis=1))
    td_error = q - y
    critic_loss = float((td_error**2).mean())
    grads, _ = agent.critic.backward(cache, 2.0 * td_error / b)
    agent.critic_opt.step(grads)

    # Policy step: ascend Q(s, pi(s)) through the fresh critic.
    node_weights = None
    if agent.hyper.use_gumbel:
        node_weights = gumbel_weights(
            agent.actor.weights, agent.hyper.gumbel_temperature, agent.rng
        )
    trace = forward(agent.actor, states, node_weights=node_weights)
    raw = trace.output
    pol_actions = sigmoid(raw)
    q_pol, cache_pol = agent.critic.forward(np.concatenate([states, pol_actions], axis=1))
    actor_objective = float(q_pol.mean())
    _, d_input = agent.critic.backward(cache_pol, np.full(b, 1.0 / b), need_input_grad=True)
    d_action = d_input[:, agent.metric_dim :]
    d_raw = d_action * pol_actions * (1.0 - pol_actions)
    tree_grads = backward(agent.actor, trace, d_raw)
    if node_weights is not None:
        tree_grads.weights = gumbel_weights_vjp(
            agent.actor.weights, node_weights, tree_grads.weights, agent.hyper.gumbel_temperature
        )
    agent.actor_opt.step([-g for g in tree_grads.arrays()])  # ascent
    agent.actor.mark_mutated()
    agent.updates_done += 1

    if not (np.isfinite(critic_loss) and np.isfinite(actor_objective)):
        raise RuntimeFailure(
            f"training diverged at update {agent.updates_done}: "
            f"critic_loss={critic_loss}, actor_objective={actor_objective}"
        )
    return critic_loss, actor_objective


# -- episodes -----------------------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    step: int
    throughput: float
    latency: float
    reward: float


@dataclass
class EpisodeTrace:
    initial_throughput: float
    initial_latency: float
    rows: list[TraceRow] = field(default_factory=list)
    truncated: bool = False


def normalize_metrics(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Scale raw metric values into [0, 1] using declared bounds."""
    return np.clip((np.asarray(values, dtype=float) - lo) / (hi - lo), 0.0, 1.0)


def noise_schedule(hyper: AgentHyper, step: int, max_steps: int) -> float:
    """Exploration noise decaying linearly over the session."""
    if max_steps <= 1:
        return hyper.noise_start
    frac = (step - 1) / (max_steps - 1)
    return hyper.noise_start + (hyper.noise_end - hyper.noise_start) * frac


def compose_full_config(agent: DdpgAgent, action_unit: np.ndarray) -> KnobVector:
    """Selected knobs take the action values; the rest keep schema defaults."""
    full = agent.schema.to_unit(agent.schema.defaults)
    full[agent.knob_indices] = action_unit
    return KnobVector(agent.schema.from_unit(full))


def run_episode(
    agent: DdpgAgent, env, max_steps: int
) -> tuple[list[Transition], EpisodeTrace]:
    """Train the agent online against an environment for max_steps steps.

    Each step: observe the normalized state, pick an action (uniform
    random during warmup, the noisy policy afterwards), deploy the
    denormalized configuration, score the measured throughput and latency
    against both the initial and previous measurements, store the
    transition, then (past warmup) run one update and blend the targets.
    Environment failures truncate the episode and flag the trace.
    """
    if max_steps < 0:
        raise ConfigError("max_steps must be non-negative")
    metrics, t_initial, l_initial = env.reset()
    lo, hi = env.metric_bounds()
    state = normalize_metrics(metrics.values, lo, hi)
    trace = EpisodeTrace(initial_throughput=t_initial, initial_latency=l_initial)
    transitions: list[Transition] = []
    prev_t, prev_l = t_initial, l_initial
    warmup = agent.hyper.effective_warmup
    k = len(agent.knob_indices)

    for step in range(1, max_steps + 1):
        if step <= warmup:
            action = agent.rng.random(k)
        else:
            scale = noise_schedule(agent.hyper, step, max_steps)
            action = select_action(agent.actor, state, scale, agent.rng)
        knobs = compose_full_config(agent, action)
        try:
            metrics, throughput, latency = env.step(knobs)
        except RuntimeFailure:
            trace.truncated = True
            break
        r_t = reward_component(
            compute_delta(throughput, t_initial, HIGHER_BETTER),
            compute_delta(throughput, prev_t, HIGHER_BETTER),
        )
        r_l = reward_component(
            compute_delta(latency, l_initial, LOWER_BETTER),
            compute_delta(latency, prev_l, LOWER_BETTER),
        )
        reward = combined_reward(r_t, r_l, agent.hyper.c_t, agent.hyper.c_l)
        next_state = normalize_metrics(metrics.values, lo, hi)
        # Sessions are fixed-length trials of a continuing task, so the
        # horizon is a truncation, not a terminal state.
        transition = Transition(state, action, reward, next_state, done=False)
        agent.buffer.push(transition)
        transitions.append(transition)
        trace.rows.append(TraceRow(step, throughput, latency, reward))

        if step > warmup and len(agent.buffer) >= agent.hyper.batch_size:
            ddpg_update(agent, agent.buffer.sample(agent.hyper.batch_size))
            soft_update(agent.critic_target, agent.critic, agent.hyper.tau)
            soft_update(agent.actor_target, agent.actor, agent.hyper.tau)

        state = next_state
        prev_t, prev_l = throughput, latency
    return transitions, trace
