"""Trading agents on numpy networks.

PPO learns on-policy from batched rollouts; DDPG, SAC and the DQN family
learn off-policy from a replay buffer. Every agent maps states to actions in
environment units: shares in [-max_shares, max_shares] for continuous
control, configured share levels for discrete control.

Loss methods take an optional flat parameter vector so their analytic
gradients can be checked against finite differences.
"""
import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from finrl_bench.buffers import ReplayBuffer, RunningNormalizer
from finrl_bench.distributions import LOG_SQRT_2PI, Categorical, DiagGaussian
from finrl_bench.exceptions import DivergenceException, ProtocolViolationException
from finrl_bench.model import AgentSpec, EnvConfig
from finrl_bench.network import MLP, Adam, clip_grad_norm, polyak_update
from finrl_bench.util import EnhancedJSONEncoder, derive_seed
from finrl_bench.vecenv import collect_trajectories

CHECKPOINT_VERSION = 1
SAC_LOG_STD_MIN = -20.0
SAC_LOG_STD_MAX = 2.0
SAC_SQUASH_EPS = 1e-6
# Gaussian width used to compare deterministic policies by KL.
DETERMINISTIC_POLICY_STD = 0.1
MAX_JOINT_ACTIONS = 4096


def clipped_surrogate(ratio, advantage, clip_epsilon: float):
    """min(ratio A, clip(ratio, 1 - eps, 1 + eps) A)."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage)


def generalized_advantages(
    rewards: np.ndarray,
    values: np.ndarray,
    next_values: np.ndarray,
    dones: np.ndarray,
    mask: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE(lambda) over (N, T) arrays; returns advantages and value targets.

    A done step neither bootstraps nor passes credit back across the episode
    boundary. Rows still running at the last step bootstrap from next_values.
    """
    advantages = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[0])
    for t in reversed(range(rewards.shape[1])):
        continuing = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * next_values[:, t] * continuing - values[:, t]
        running = delta + gamma * lam * continuing * running
        running = np.where(mask[:, t], running, 0.0)
        advantages[:, t] = running
    return advantages, advantages + values


def dqn_targets(rewards, terminals, q_target_next, gamma: float) -> np.ndarray:
    """r + gamma max_a Q_target(s', a), without bootstrap on terminal steps."""
    bootstrap = np.max(np.atleast_2d(q_target_next), axis=1)
    return np.asarray(rewards, dtype=float) + gamma * (1.0 - np.asarray(terminals, dtype=float)) * bootstrap


def double_dqn_targets(rewards, terminals, q_online_next, q_target_next, gamma: float) -> np.ndarray:
    """Double DQN target: the online network picks a', the target network values it."""
    q_online_next = np.atleast_2d(q_online_next)
    q_target_next = np.atleast_2d(q_target_next)
    best = np.argmax(q_online_next, axis=1)
    bootstrap = q_target_next[np.arange(best.size), best]
    return np.asarray(rewards, dtype=float) + gamma * (1.0 - np.asarray(terminals, dtype=float)) * bootstrap


def dueling_aggregate(values, advantages) -> np.ndarray:
    """Q = V + A - mean(A)."""
    advantages = np.atleast_2d(np.asarray(advantages, dtype=float))
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    return values + advantages - advantages.mean(axis=1, keepdims=True)


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Greedy indices, replaced by uniform ones with probability epsilon per row."""
    q_values = np.atleast_2d(q_values)
    greedy = np.argmax(q_values, axis=1)
    explore = rng.random(greedy.size) < epsilon
    uniform = rng.integers(0, q_values.shape[1], size=greedy.size)
    return np.where(explore, uniform, greedy)


class TrainedAgent:
    """Base of all agents: normalization, freezing, checkpoints.

    Args:
        spec (AgentSpec): Algorithm and hyperparameters.
        state_dim (int): Length of the flattened state.
        n_assets (int): Number of action components.
        env_config (EnvConfig): Action mode and scaling of the environment.
    """

    def __init__(self, spec: AgentSpec, state_dim: int, n_assets: int, env_config: EnvConfig):
        self.spec = spec
        self.state_dim = state_dim
        self.n_assets = n_assets
        self.env_config = env_config
        self.normalizer = RunningNormalizer(state_dim)
        self.update_count = 0
        self.total_steps = 0
        self.training_log: list[dict] = []
        self._frozen = False
        self._rng = np.random.default_rng(derive_seed(spec.seed, "updates"))

    # networks ---------------------------------------------------------------
    def networks(self) -> dict[str, MLP]:
        raise NotImplementedError

    def extra_params(self) -> dict[str, np.ndarray]:
        return {}

    def _normalize(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return self.normalizer.normalize(states) if self.spec.normalize_states else states

    def _observe(self, states: np.ndarray) -> None:
        if self.spec.normalize_states:
            self.normalizer.update(states)

    # inference ---------------------------------------------------------------
    def act(self, state: np.ndarray, mode: str = "exploit", seed: Optional[int] = None) -> np.ndarray:
        """Action in environment units for one state (D,) or a batch (n, D).

        Args:
            state (np.ndarray): Flattened state(s).
            mode (str, optional): 'exploit' for the mean or greedy action,
                'explore' for a sampled or epsilon-greedy one.
            seed (int, optional): Seed of the exploration draw.
        """
        if mode not in ("exploit", "explore"):
            raise ValueError("mode must be 'exploit' or 'explore'.")
        state = np.asarray(state, dtype=float)
        actions = self._act(np.atleast_2d(state), mode, np.random.default_rng(seed))
        return actions[0] if state.ndim == 1 else actions

    def _act(self, states: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def action_distribution(self, states: np.ndarray):
        """Action distribution on the normalized action scale, for KL comparisons."""
        raise NotImplementedError

    # training ----------------------------------------------------------------
    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "TrainedAgent":
        """Forbids further training and fixes the state statistics."""
        self._frozen = True
        self.normalizer.frozen = True
        return self

    def _check_trainable(self) -> None:
        if self._frozen:
            raise ProtocolViolationException(
                f"{self.spec.algorithm} agent is frozen; training is not allowed"
            )

    def _check_finite(self, what: str, *values) -> None:
        for value in values:
            if not np.isfinite(value).all():
                raise DivergenceException(
                    f"{self.spec.algorithm}: non-finite {what} after {self.update_count} updates"
                )

    def _step_optimizer(self, optimizer: Adam, params: np.ndarray, grad: np.ndarray) -> None:
        grad = clip_grad_norm(grad, self.spec.max_grad_norm)
        self._check_finite("gradient", grad)
        optimizer.step(params, grad)
        self._check_finite("parameters", params)

    # checkpoints -------------------------------------------------------------
    def save(self, path: Union[str, Path]) -> None:
        """Writes a JSON checkpoint; floats round-trip exactly."""
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "spec": asdict(self.spec),
            "state_dim": self.state_dim,
            "n_assets": self.n_assets,
            "env_config": asdict(self.env_config),
            "networks": {name: network.params for name, network in self.networks().items()},
            "extra": self.extra_params(),
            "normalizer": self.normalizer.state_dict(),
            "update_count": self.update_count,
            "total_steps": self.total_steps,
            "frozen": self._frozen,
            "training_log": self.training_log,
        }
        with open(path, "w") as checkpoint:
            json.dump(payload, checkpoint, cls=EnhancedJSONEncoder)
        logging.debug("TrainedAgent: saved %s checkpoint to %s", self.spec.algorithm, path)

    @staticmethod
    def load(path: Union[str, Path]) -> "TrainedAgent":
        with open(path, "r") as checkpoint:
            payload = json.load(checkpoint)
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
        agent = make_agent(
            AgentSpec.from_dict(payload["spec"]),
            payload["state_dim"],
            payload["n_assets"],
            EnvConfig.from_dict(payload["env_config"]),
        )
        for name, network in agent.networks().items():
            network.set_params(np.asarray(payload["networks"][name], dtype=float))
        for name, values in payload["extra"].items():
            agent.extra_params()[name][...] = np.asarray(values, dtype=float)
        agent.normalizer = RunningNormalizer.from_state_dict(payload["normalizer"])
        agent.update_count = payload["update_count"]
        agent.total_steps = payload["total_steps"]
        agent.training_log = payload["training_log"]
        if payload["frozen"]:
            agent.freeze()
        return agent


class PPOAgent(TrainedAgent):
    """PPO-clip with a Gaussian policy, a state-independent log-std and GAE.

    Raw actions u ~ N(mu(s), sigma) become clip(u, -1, 1) * max_shares. The
    policy may be trained against peer policies whose KL divergence from it
    is rewarded with weight kl_lambda.
    """

    def __init__(self, spec: AgentSpec, state_dim: int, n_assets: int, env_config: EnvConfig):
        super().__init__(spec, state_dim, n_assets, env_config)
        hidden = tuple(spec.hidden_sizes)
        self.actor = MLP(
            (state_dim, *hidden, n_assets), spec.activation, seed=derive_seed(spec.seed, "actor"), output_scale=0.01
        )
        self.log_std = np.zeros(n_assets)
        self.critic = MLP((state_dim, *hidden, 1), spec.activation, seed=derive_seed(spec.seed, "critic"))
        self.actor_optimizer = Adam(self.actor.n_params + n_assets, spec.learning_rate)
        self.critic_optimizer = Adam(self.critic.n_params, spec.learning_rate)

    def networks(self) -> dict[str, MLP]:
        return {"actor": self.actor, "critic": self.critic}

    def extra_params(self) -> dict[str, np.ndarray]:
        return {"log_std": self.log_std}

    @property
    def policy_params(self) -> np.ndarray:
        """θ: actor weights followed by the log-std vector."""
        return np.concatenate([self.actor.params, self.log_std])

    @policy_params.setter
    def policy_params(self, values: np.ndarray) -> None:
        self.actor.set_params(values[:self.actor.n_params])
        self.log_std[...] = values[self.actor.n_params:]

    def _split(self, params: Optional[np.ndarray]):
        if params is None:
            return None, self.log_std
        return params[:self.actor.n_params], params[self.actor.n_params:]

    def distribution(self, states: np.ndarray, params: Optional[np.ndarray] = None) -> DiagGaussian:
        actor_params, log_std = self._split(params)
        return DiagGaussian(self.actor.forward(self._normalize(states), actor_params), log_std)

    def action_distribution(self, states: np.ndarray) -> DiagGaussian:
        return self.distribution(states)

    def _to_env(self, raw: np.ndarray) -> np.ndarray:
        return np.clip(raw, -1.0, 1.0) * self.env_config.max_shares

    def _act(self, states, mode, rng):
        distribution = self.distribution(states)
        raw = distribution.mean if mode == "exploit" else distribution.sample(rng)
        return self._to_env(raw)

    # policy-gradient protocol
    def sample(self, states: np.ndarray, rng: np.random.Generator):
        distribution = self.distribution(states)
        raw = distribution.sample(rng)
        return self._to_env(raw), raw, distribution.log_prob(raw)

    def log_prob(self, states: np.ndarray, actions: np.ndarray, params: Optional[np.ndarray] = None) -> np.ndarray:
        return self.distribution(states, params).log_prob(actions)

    def score(self, states: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """sum_i w_i grad_θ log pi(a_i | s_i) over θ = policy_params."""
        mean, cache = self.actor.forward_cache(self._normalize(states))
        d_mean, d_log_std = DiagGaussian(mean, self.log_std).log_prob_grads(actions)
        weights = np.asarray(weights, dtype=float)[:, None]
        grad_actor, _ = self.actor.backward(cache, weights * d_mean)
        return np.concatenate([grad_actor, (weights * d_log_std).sum(axis=0)])

    # losses
    def policy_loss_and_grad(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        old_log_probs: np.ndarray,
        advantages: np.ndarray,
        peers: Sequence[TrainedAgent] = (),
        kl_lambda: float = 0.0,
        params: Optional[np.ndarray] = None,
    ) -> tuple[float, np.ndarray]:
        """Clipped-surrogate loss minus entropy and KL-diversity bonuses.

        Returns:
            tuple: The loss and its gradient w.r.t. policy_params.
        """
        actor_params, log_std = self._split(params)
        m = states.shape[0]
        mean, cache = self.actor.forward_cache(self._normalize(states), actor_params)
        distribution = DiagGaussian(mean, log_std)
        ratio = np.exp(distribution.log_prob(actions) - old_log_probs)
        unclipped = ratio * advantages
        clipped = np.clip(ratio, 1.0 - self.spec.clip_epsilon, 1.0 + self.spec.clip_epsilon) * advantages
        loss = -float(np.minimum(unclipped, clipped).mean())
        # only the unclipped branch depends on θ
        d_log_prob = np.where(unclipped <= clipped, -ratio * advantages, 0.0) / m
        d_mean, d_log_std = distribution.log_prob_grads(actions)
        grad_mean = d_log_prob[:, None] * d_mean
        grad_log_std = (d_log_prob[:, None] * d_log_std).sum(axis=0)

        if self.spec.entropy_coef:
            loss -= self.spec.entropy_coef * float(distribution.entropy().mean())
            grad_log_std = grad_log_std - self.spec.entropy_coef

        for peer in peers if kl_lambda else ():
            peer_distribution = peer.action_distribution(states)
            loss -= kl_lambda * float(peer_distribution.kl(distribution).mean())
            kl_mean, kl_log_std = peer_distribution.kl_grads_wrt_other(distribution)
            grad_mean = grad_mean - kl_lambda * kl_mean / m
            grad_log_std = grad_log_std - kl_lambda * kl_log_std.sum(axis=0) / m

        grad_actor, _ = self.actor.backward(cache, grad_mean)
        return loss, np.concatenate([grad_actor, grad_log_std])

    def value_loss_and_grad(
        self, states: np.ndarray, returns: np.ndarray, params: Optional[np.ndarray] = None
    ) -> tuple[float, np.ndarray]:
        """value_coef * 0.5 * mean((V(s) - R)^2) and its gradient."""
        values, cache = self.critic.forward_cache(self._normalize(states), params)
        error = values[:, 0] - returns
        loss = self.spec.value_coef * 0.5 * float(np.mean(error * error))
        grad, _ = self.critic.backward(cache, (self.spec.value_coef * error / error.size)[:, None])
        return loss, grad

    def train(
        self,
        venv,
        iterations: int,
        horizon: Optional[int] = None,
        peers: Sequence[TrainedAgent] = (),
        kl_lambda: Optional[float] = None,
    ) -> "PPOAgent":
        """Runs collect -> advantages -> clipped minibatch updates, `iterations` times.

        Args:
            venv: Vectorized continuous-action environment.
            iterations (int): Number of collect/update rounds.
            horizon (int, optional): Rollout length; defaults to one full
                episode of a trading environment, else 256.
            peers (Sequence[TrainedAgent], optional): Policies to stay different from.
            kl_lambda (float, optional): Weight of the KL-diversity bonus;
                defaults to spec.kl_lambda.
        """
        self._check_trainable()
        if venv.config.action_mode != "continuous":
            raise ValueError("PPO needs a continuous-action environment.")
        if horizon is None:
            horizon = venv.n_periods - 1 if hasattr(venv, "n_periods") else 256
        kl_lambda = self.spec.kl_lambda if kl_lambda is None else kl_lambda
        logging.debug("PPOAgent: train(iterations=%s, horizon=%s, peers=%s)", iterations, horizon, len(peers))

        for _ in range(iterations):
            iteration = len(self.training_log)
            # statistics stay fixed while collecting and updating
            self.normalizer.frozen = True
            batch = collect_trajectories(venv, self, horizon, derive_seed(self.spec.seed, f"rollout-{iteration}"))
            n_envs, steps, state_dim = batch.states.shape
            values = self.critic.forward(self._normalize(batch.states.reshape(-1, state_dim)))[:, 0]
            next_values = self.critic.forward(self._normalize(batch.next_states.reshape(-1, state_dim)))[:, 0]
            advantages, returns = generalized_advantages(
                batch.rewards,
                values.reshape(n_envs, steps),
                next_values.reshape(n_envs, steps),
                batch.dones.astype(float),
                batch.mask,
                self.spec.gamma,
                self.spec.gae_lambda,
            )
            flat = batch.mask.reshape(-1)
            states = batch.states.reshape(-1, state_dim)[flat]
            actions = batch.actions.reshape(-1, batch.actions.shape[2])[flat]
            old_log_probs = batch.log_probs.reshape(-1)[flat]
            returns = returns.reshape(-1)[flat]
            advantages = advantages.reshape(-1)[flat]
            advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

            policy_losses, value_losses = [], []
            for _ in range(self.spec.ppo_epochs):
                order = self._rng.permutation(states.shape[0])
                for start in range(0, order.size, self.spec.batch_size):
                    index = order[start:start + self.spec.batch_size]
                    policy_loss, policy_grad = self.policy_loss_and_grad(
                        states[index], actions[index], old_log_probs[index], advantages[index], peers, kl_lambda
                    )
                    value_loss, value_grad = self.value_loss_and_grad(states[index], returns[index])
                    self._check_finite("loss", policy_loss, value_loss)
                    params = self.policy_params
                    self._step_optimizer(self.actor_optimizer, params, policy_grad)
                    self.policy_params = params
                    self._step_optimizer(self.critic_optimizer, self.critic.params, value_grad)
                    self.update_count += 1
                    policy_losses.append(policy_loss)
                    value_losses.append(value_loss)

            self.normalizer.frozen = False
            self._observe(states)
            self.total_steps += int(flat.sum())
            entry = {
                "iteration": iteration,
                "mean_return": float(batch.rewards.sum(axis=1).mean()),
                "policy_loss": float(np.mean(policy_losses)),
                "value_loss": float(np.mean(value_losses)),
            }
            self.training_log.append(entry)
            logging.info("PPOAgent: iteration %s mean return %.6g", iteration, entry["mean_return"])
        return self


class OffPolicyAgent(TrainedAgent):
    """Replay-based training loop shared by DDPG, SAC and the DQN family."""

    replay_action_dim: int

    def __init__(self, spec: AgentSpec, state_dim: int, n_assets: int, env_config: EnvConfig):
        super().__init__(spec, state_dim, n_assets, env_config)
        self.buffer = ReplayBuffer(
            spec.replay_capacity, state_dim, self.replay_action_dim, seed=derive_seed(spec.seed, "replay")
        )

    def _explore(self, states: np.ndarray, rng: np.random.Generator, warm_up: bool):
        """Returns (env_actions, replay_actions) for a batch of states."""
        raise NotImplementedError

    def _update(self) -> float:
        raise NotImplementedError

    def train(self, venv, steps: int) -> "OffPolicyAgent":
        """Collects `steps` environment samples, updating from replay as it goes.

        Updates start once `learning_starts` samples were collected and run
        every `train_freq` batched steps. Truncated episode ends are stored as
        non-terminal so their value is bootstrapped.
        """
        self._check_trainable()
        logging.debug("%s: train(steps=%s)", type(self).__name__, steps)
        rng = np.random.default_rng(derive_seed(self.spec.seed, f"explore-{len(self.training_log)}"))
        states, _ = venv.reset()
        running = np.zeros(states.shape[0])
        finished: list[float] = []
        losses: list[float] = []
        collected = 0
        rounds = 0
        while collected < steps:
            warm_up = self.total_steps < self.spec.learning_starts
            env_actions, replay_actions = self._explore(states, rng, warm_up)
            next_states, rewards, terminated, truncated, _ = venv.step(env_actions)
            self._observe(states)
            self.buffer.add(states, replay_actions, rewards, next_states, terminated)
            running += rewards
            collected += states.shape[0]
            self.total_steps += states.shape[0]
            rounds += 1
            if (terminated | truncated).any():
                finished.extend(running.tolist())
                running = np.zeros(states.shape[0])
                states, _ = venv.reset()
            else:
                states = next_states
            if not warm_up and rounds % self.spec.train_freq == 0:
                losses.append(self._update())
                self.update_count += 1
        entry = {
            "iteration": len(self.training_log),
            "steps": self.total_steps,
            "mean_return": float(np.mean(finished)) if finished else float(running.mean()),
            "loss": float(np.mean(losses)) if losses else None,
        }
        self.training_log.append(entry)
        logging.info("%s: %s steps, mean return %.6g", type(self).__name__, self.total_steps, entry["mean_return"])
        return self

    def _sample_replay(self) -> dict[str, np.ndarray]:
        return self.buffer.sample(self.spec.batch_size)

    def _sync_target(self, target: MLP, online: MLP) -> None:
        interval = self.spec.target_update_interval
        if interval:
            if (self.update_count + 1) % interval == 0:
                polyak_update(target, online, 1.0)
        else:
            polyak_update(target, online, self.spec.tau)


class DDPGAgent(OffPolicyAgent):
    """Deterministic tanh actor, Q(s, a) critic, Gaussian exploration noise."""

    def __init__(self, spec: AgentSpec, state_dim: int, n_assets: int, env_config: EnvConfig):
        self.replay_action_dim = n_assets
        super().__init__(spec, state_dim, n_assets, env_config)
        hidden = tuple(spec.hidden_sizes)
        self.actor = MLP(
            (state_dim, *hidden, n_assets), spec.activation, "tanh", seed=derive_seed(spec.seed, "actor"), output_scale=0.1
        )
        self.critic = MLP((state_dim + n_assets, *hidden, 1), spec.activation, seed=derive_seed(spec.seed, "critic"))
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_optimizer = Adam(self.actor.n_params, spec.learning_rate)
        self.critic_optimizer = Adam(self.critic.n_params, spec.learning_rate)

    def networks(self) -> dict[str, MLP]:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
        }

    def _policy(self, states: np.ndarray) -> np.ndarray:
        return self.actor.forward(self._normalize(states))

    def _act(self, states, mode, rng):
        actions = self._policy(states)
        if mode == "explore":
            actions = np.clip(actions + self.spec.exploration_noise * rng.standard_normal(actions.shape), -1.0, 1.0)
        return actions * self.env_config.max_shares

    def action_distribution(self, states: np.ndarray) -> DiagGaussian:
        return DiagGaussian(self._policy(states), np.log(DETERMINISTIC_POLICY_STD))

    def _explore(self, states, rng, warm_up):
        if warm_up:
            actions = rng.uniform(-1.0, 1.0, size=(states.shape[0], self.n_assets))
        else:
            actions = self._policy(states)
            actions = np.clip(actions + self.spec.exploration_noise * rng.standard_normal(actions.shape), -1.0, 1.0)
        return actions * self.env_config.max_shares, actions

    def critic_loss_and_grad(self, batch: dict, params: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
        """0.5 * mean((Q(s, a) - y)^2) with y from the target networks."""
        states = self._normalize(batch["states"])
        next_states = self._normalize(batch["next_states"])
        next_actions = self.actor_target.forward(next_states)
        q_next = self.critic_target.forward(np.hstack([next_states, next_actions]))[:, 0]
        targets = batch["rewards"] + self.spec.gamma * (1.0 - batch["terminals"]) * q_next
        q, cache = self.critic.forward_cache(np.hstack([states, batch["actions"]]), params)
        error = q[:, 0] - targets
        grad, _ = self.critic.backward(cache, (error / error.size)[:, None])
        return 0.5 * float(np.mean(error * error)), grad

    def actor_loss_and_grad(self, states: np.ndarray, params: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
        """-mean Q(s, mu(s)); the action gradient comes from the critic's input gradient."""
        states = self._normalize(states)
        actions, actor_cache = self.actor.forward_cache(states, params)
        q, critic_cache = self.critic.forward_cache(np.hstack([states, actions]))
        m = states.shape[0]
        _, grad_input = self.critic.backward(critic_cache, np.full((m, 1), -1.0 / m))
        grad, _ = self.actor.backward(actor_cache, grad_input[:, self.state_dim:])
        return -float(q.mean()), grad

    def _update(self) -> float:
        batch = self._sample_replay()
        critic_loss, critic_grad = self.critic_loss_and_grad(batch)
        self._step_optimizer(self.critic_optimizer, self.critic.params, critic_grad)
        actor_loss, actor_grad = self.actor_loss_and_grad(batch["states"])
        self._step_optimizer(self.actor_optimizer, self.actor.params, actor_grad)
        self._check_finite("loss", critic_loss, actor_loss)
        polyak_update(self.actor_target, self.actor, self.spec.tau)
        polyak_update(self.critic_target, self.critic, self.spec.tau)
        return critic_loss


class SACAgent(OffPolicyAgent):
    """Soft actor-critic with a tanh-squashed Gaussian, twin critics and fixed temperature."""

    def __init__(self, spec: AgentSpec, state_dim: int, n_assets: int, env_config: EnvConfig):
        self.replay_action_dim = n_assets
        super().__init__(spec, state_dim, n_assets, env_config)
        hidden = tuple(spec.hidden_sizes)
        self.actor = MLP(
            (state_dim, *hidden, 2 * n_assets), spec.activation, seed=derive_seed(spec.seed, "actor"), output_scale=0.01
        )
        self.critic1 = MLP((state_dim + n_assets, *hidden, 1), spec.activation, seed=derive_seed(spec.seed, "critic1"))
        self.critic2 = MLP((state_dim + n_assets, *hidden, 1), spec.activation, seed=derive_seed(spec.seed, "critic2"))
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.actor_optimizer = Adam(self.actor.n_params, spec.learning_rate)
        self.critic_optimizer = Adam(self.critic1.n_params + self.critic2.n_params, spec.learning_rate)

    def networks(self) -> dict[str, MLP]:
        return {
            "actor": self.actor,
            "critic1": self.critic1,
            "critic2": self.critic2,
            "critic1_target": self.critic1_target,
            "critic2_target": self.critic2_target,
        }

    def _heads(self, normalized_states: np.ndarray, params: Optional[np.ndarray] = None):
        output, cache = self.actor.forward_cache(normalized_states, params)
        mean = output[:, :self.n_assets]
        raw_log_std = output[:, self.n_assets:]
        log_std = np.clip(raw_log_std, SAC_LOG_STD_MIN, SAC_LOG_STD_MAX)
        inside = (raw_log_std > SAC_LOG_STD_MIN) & (raw_log_std < SAC_LOG_STD_MAX)
        return mean, log_std, inside, cache

    @staticmethod
    def squashed_sample(mean: np.ndarray, log_std: np.ndarray, noise: np.ndarray):
        """a = tanh(mean + std * noise) and log pi(a), corrected for the squashing."""
        u = mean + np.exp(log_std) * noise
        actions = np.tanh(u)
        log_prob = (
            -0.5 * noise * noise - log_std - LOG_SQRT_2PI - np.log(1.0 - actions * actions + SAC_SQUASH_EPS)
        ).sum(axis=1)
        return actions, log_prob

    def _act(self, states, mode, rng):
        mean, log_std, _, _ = self._heads(self._normalize(states))
        if mode == "exploit":
            actions = np.tanh(mean)
        else:
            actions, _ = self.squashed_sample(mean, log_std, rng.standard_normal(mean.shape))
        return actions * self.env_config.max_shares

    def action_distribution(self, states: np.ndarray) -> DiagGaussian:
        mean, log_std, _, _ = self._heads(self._normalize(states))
        squashed = np.tanh(mean)
        # delta method: the tanh slope scales the width
        std = np.maximum(np.exp(log_std) * (1.0 - squashed * squashed), 1e-3)
        return DiagGaussian(squashed, np.log(std))

    def _explore(self, states, rng, warm_up):
        if warm_up:
            actions = rng.uniform(-1.0, 1.0, size=(states.shape[0], self.n_assets))
        else:
            mean, log_std, _, _ = self._heads(self._normalize(states))
            actions, _ = self.squashed_sample(mean, log_std, rng.standard_normal(mean.shape))
        return actions * self.env_config.max_shares, actions

    @property
    def critic_params(self) -> np.ndarray:
        return np.concatenate([self.critic1.params, self.critic2.params])

    def critic_loss_and_grad(
        self, batch: dict, next_noise: np.ndarray, params: Optional[np.ndarray] = None
    ) -> tuple[float, np.ndarray]:
        """Summed TD losses of both critics against the soft twin-target value.

        `params` is the concatenation of both critics' parameters.
        """
        alpha = self.spec.sac_alpha
        states = self._normalize(batch["states"])
        next_states = self._normalize(batch["next_states"])
        mean, log_std, _, _ = self._heads(next_states)
        next_actions, next_log_prob = self.squashed_sample(mean, log_std, next_noise)
        next_inputs = np.hstack([next_states, next_actions])
        q_next = np.minimum(
            self.critic1_target.forward(next_inputs)[:, 0], self.critic2_target.forward(next_inputs)[:, 0]
        )
        targets = batch["rewards"] + self.spec.gamma * (1.0 - batch["terminals"]) * (q_next - alpha * next_log_prob)

        inputs = np.hstack([states, batch["actions"]])
        first, second = (None, None) if params is None else np.split(params, [self.critic1.n_params])
        loss = 0.0
        grads = []
        for critic, critic_params in ((self.critic1, first), (self.critic2, second)):
            q, cache = critic.forward_cache(inputs, critic_params)
            error = q[:, 0] - targets
            loss += 0.5 * float(np.mean(error * error))
            grads.append(critic.backward(cache, (error / error.size)[:, None])[0])
        return loss, np.concatenate(grads)

    def actor_loss_and_grad(
        self, states: np.ndarray, noise: np.ndarray, params: Optional[np.ndarray] = None
    ) -> tuple[float, np.ndarray]:
        """mean(alpha log pi(a|s) - min_i Q_i(s, a)) with reparameterized a."""
        alpha = self.spec.sac_alpha
        states = self._normalize(states)
        m = states.shape[0]
        mean, log_std, inside, cache = self._heads(states, params)
        std = np.exp(log_std)
        actions, log_prob = self.squashed_sample(mean, log_std, noise)
        inputs = np.hstack([states, actions])
        q1, cache1 = self.critic1.forward_cache(inputs)
        q2, cache2 = self.critic2.forward_cache(inputs)
        use_first = (q1[:, 0] <= q2[:, 0])[:, None]
        q_min = np.where(use_first, q1, q2)[:, 0]
        loss = float(np.mean(alpha * log_prob - q_min))

        ones = np.ones((m, 1))
        grad_q1 = self.critic1.backward(cache1, ones)[1][:, self.state_dim:]
        grad_q2 = self.critic2.backward(cache2, ones)[1][:, self.state_dim:]
        grad_q = np.where(use_first, grad_q1, grad_q2)
        slope = 1.0 - actions * actions
        squash = 2.0 * actions * slope / (slope + SAC_SQUASH_EPS)
        grad_u = (alpha * squash - grad_q * slope) / m
        grad_log_std = (-alpha / m + grad_u * std * noise) * inside
        grad, _ = self.actor.backward(cache, np.hstack([grad_u, grad_log_std]))
        return loss, grad

    def _update(self) -> float:
        batch = self._sample_replay()
        next_noise = self._rng.standard_normal((batch["states"].shape[0], self.n_assets))
        critic_loss, critic_grad = self.critic_loss_and_grad(batch, next_noise)
        params = self.critic_params
        self._step_optimizer(self.critic_optimizer, params, critic_grad)
        self.critic1.set_params(params[:self.critic1.n_params])
        self.critic2.set_params(params[self.critic1.n_params:])
        noise = self._rng.standard_normal((batch["states"].shape[0], self.n_assets))
        actor_loss, actor_grad = self.actor_loss_and_grad(batch["states"], noise)
        self._step_optimizer(self.actor_optimizer, self.actor.params, actor_grad)
        self._check_finite("loss", critic_loss, actor_loss)
        polyak_update(self.critic1_target, self.critic1, self.spec.tau)
        polyak_update(self.critic2_target, self.critic2, self.spec.tau)
        return critic_loss


class DQNAgent(OffPolicyAgent):
    """DQN, Double DQN and Dueling DQN over a joint discrete action.

    Each asset takes one of L configured levels; the L^K joint actions are
    indexed in mixed radix with the first asset as the most significant digit.
    Dueling DQN also uses the Double DQN target.
    """

    def __init__(self, spec: AgentSpec, state_dim: int, n_assets: int, env_config: EnvConfig):
        self.replay_action_dim = 1
        super().__init__(spec, state_dim, n_assets, env_config)
        self.levels = env_config.level_values
        self.n_actions = len(self.levels) ** n_assets
        if self.n_actions > MAX_JOINT_ACTIONS:
            raise ValueError(
                f"{len(self.levels)} levels over {n_assets} assets give {self.n_actions} joint actions; "
                f"at most {MAX_JOINT_ACTIONS} are supported"
            )
        self.dueling = spec.algorithm == "dueling_dqn"
        self.double = spec.algorithm in ("double_dqn", "dueling_dqn")
        outputs = self.n_actions + 1 if self.dueling else self.n_actions
        self.q_network = MLP(
            (state_dim, *tuple(spec.hidden_sizes), outputs), spec.activation, seed=derive_seed(spec.seed, "q")
        )
        self.q_target = self.q_network.copy()
        self.optimizer = Adam(self.q_network.n_params, spec.learning_rate)

    def networks(self) -> dict[str, MLP]:
        return {"q": self.q_network, "q_target": self.q_target}

    def _aggregate(self, output: np.ndarray) -> np.ndarray:
        return dueling_aggregate(output[:, 0], output[:, 1:]) if self.dueling else output

    def q_values(self, states: np.ndarray, target: bool = False) -> np.ndarray:
        network = self.q_target if target else self.q_network
        return self._aggregate(network.forward(self._normalize(states)))

    def decode(self, indices: np.ndarray) -> np.ndarray:
        """Joint action indices (n,) to share amounts (n, K)."""
        indices = np.asarray(indices, dtype=int).reshape(-1)
        n_levels = len(self.levels)
        digits = np.zeros((indices.size, self.n_assets), dtype=int)
        remainder = indices.copy()
        for k in reversed(range(self.n_assets)):
            digits[:, k] = remainder % n_levels
            remainder //= n_levels
        return self.levels[digits]

    def encode(self, actions: np.ndarray) -> np.ndarray:
        """Share amounts (n, K) to joint action indices (n,)."""
        actions = np.atleast_2d(actions)
        digits = np.abs(actions[:, :, None] - self.levels[None, None, :]).argmin(axis=2)
        indices = np.zeros(actions.shape[0], dtype=int)
        for k in range(self.n_assets):
            indices = indices * len(self.levels) + digits[:, k]
        return indices

    def _act(self, states, mode, rng):
        q = self.q_values(states)
        epsilon = self.spec.epsilon if mode == "explore" else 0.0
        return self.decode(epsilon_greedy(q, epsilon, rng))

    def action_distribution(self, states: np.ndarray) -> Categorical:
        """Boltzmann distribution softmax(Q)."""
        return Categorical(self.q_values(states))

    def _explore(self, states, rng, warm_up):
        if warm_up:
            indices = rng.integers(0, self.n_actions, size=states.shape[0])
        else:
            indices = epsilon_greedy(self.q_values(states), self.spec.epsilon, rng)
        return self.decode(indices), indices[:, None].astype(float)

    def loss_and_grad(self, batch: dict, params: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
        """0.5 * mean((Q(s, a) - y)^2) with the (Double) DQN target y."""
        states = self._normalize(batch["states"])
        next_states = self._normalize(batch["next_states"])
        q_target_next = self._aggregate(self.q_target.forward(next_states))
        if self.double:
            q_online_next = self._aggregate(self.q_network.forward(next_states, params))
            targets = double_dqn_targets(batch["rewards"], batch["terminals"], q_online_next, q_target_next, self.spec.gamma)
        else:
            targets = dqn_targets(batch["rewards"], batch["terminals"], q_target_next, self.spec.gamma)

        output, cache = self.q_network.forward_cache(states, params)
        q = self._aggregate(output)
        rows = np.arange(q.shape[0])
        chosen = np.asarray(batch["actions"], dtype=int).reshape(-1)
        error = q[rows, chosen] - targets
        grad_q = np.zeros_like(q)
        grad_q[rows, chosen] = error / error.size
        if self.dueling:
            grad_output = np.hstack([grad_q.sum(axis=1, keepdims=True), grad_q - grad_q.mean(axis=1, keepdims=True)])
        else:
            grad_output = grad_q
        grad, _ = self.q_network.backward(cache, grad_output)
        return 0.5 * float(np.mean(error * error)), grad

    def _update(self) -> float:
        loss, grad = self.loss_and_grad(self._sample_replay())
        self._check_finite("loss", loss)
        self._step_optimizer(self.optimizer, self.q_network.params, grad)
        self._sync_target(self.q_target, self.q_network)
        return loss


_AGENT_TYPES = {
    "ppo": PPOAgent,
    "ddpg": DDPGAgent,
    "sac": SACAgent,
    "dqn": DQNAgent,
    "double_dqn": DQNAgent,
    "dueling_dqn": DQNAgent,
}


def make_agent(spec: AgentSpec, state_dim: int, n_assets: int, env_config: EnvConfig) -> TrainedAgent:
    """Creates an untrained agent of the AgentSpec's algorithm.

    Raises:
        ValueError: If the algorithm does not fit the environment's action mode.
    """
    expected = "discrete" if spec.is_discrete else "continuous"
    if env_config.action_mode != expected:
        raise ValueError(f"{spec.algorithm} needs a {expected}-action environment.")
    return _AGENT_TYPES[spec.algorithm](spec, state_dim, n_assets, env_config)


def train_on_policy(
    spec: AgentSpec,
    venv,
    iterations: int,
    horizon: Optional[int] = None,
    peers: Sequence[TrainedAgent] = (),
    agent: Optional[PPOAgent] = None,
) -> PPOAgent:
    """Trains a PPO agent, a new one unless `agent` is given."""
    if spec.algorithm != "ppo":
        raise ValueError(f"on-policy training supports ppo, not {spec.algorithm}.")
    agent = agent or make_agent(spec, venv.state_dim, venv.n_assets, venv.config)
    return agent.train(venv, iterations, horizon=horizon, peers=peers)


def train_off_policy(spec: AgentSpec, venv, steps: int, agent: Optional[OffPolicyAgent] = None) -> OffPolicyAgent:
    """Trains a DDPG, SAC or DQN-family agent, a new one unless `agent` is given."""
    if spec.algorithm == "ppo":
        raise ValueError("ppo is trained on-policy.")
    agent = agent or make_agent(spec, venv.state_dim, venv.n_assets, venv.config)
    return agent.train(venv, steps)


def train_agent(
    spec: AgentSpec,
    venv,
    iterations: int,
    steps: int,
    horizon: Optional[int] = None,
    peers: Iterable[TrainedAgent] = (),
) -> TrainedAgent:
    """Dispatches to on- or off-policy training by algorithm."""
    if spec.algorithm == "ppo":
        return train_on_policy(spec, venv, iterations, horizon=horizon, peers=list(peers))
    return train_off_policy(spec, venv, steps)
