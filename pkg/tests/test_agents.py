import numpy as np
import pytest

from finrl_bench.agents import (
    DDPGAgent,
    DQNAgent,
    PPOAgent,
    SACAgent,
    TrainedAgent,
    clipped_surrogate,
    double_dqn_targets,
    dqn_targets,
    dueling_aggregate,
    epsilon_greedy,
    generalized_advantages,
    make_agent,
    train_agent,
    train_off_policy,
    train_on_policy,
)
from finrl_bench.exceptions import ProtocolViolationException
from finrl_bench.model import AgentSpec, EnvConfig
from finrl_bench.network import gradient_check
from finrl_bench.vecenv import VecTradingEnv

__author__ = "finrl-bench developers"
__copyright__ = "finrl-bench developers"
__license__ = "MIT"

STATE_DIM = 4
N_ASSETS = 2
GRADIENT_TOLERANCE = 1e-4


def given_states(n=16, seed=0):
    return np.random.default_rng(seed).normal(size=(n, STATE_DIM))


def given_replay_batch(action_columns, seed=0, discrete_actions=None):
    rng = np.random.default_rng(seed)
    n = 16
    if discrete_actions is None:
        actions = rng.uniform(-0.9, 0.9, size=(n, action_columns))
    else:
        actions = rng.integers(0, discrete_actions, size=(n, 1)).astype(float)
    return {
        "states": rng.normal(size=(n, STATE_DIM)),
        "actions": actions,
        "rewards": rng.normal(size=n),
        "next_states": rng.normal(size=(n, STATE_DIM)),
        "terminals": (rng.random(n) < 0.25).astype(float),
    }


def given_spec(algorithm, **kwargs):
    defaults = {"hidden_sizes": (8,), "seed": 3, "normalize_states": False}
    defaults.update(kwargs)
    return AgentSpec(algorithm=algorithm, **defaults)


class TestTargets:
    """Tests for the pure learning-rule helpers."""

    @pytest.mark.parametrize(
        "ratio,advantage,expected",
        [(1.5, 1.0, 1.2), (0.5, 1.0, 0.5), (0.5, -1.0, -0.8), (1.5, -1.0, -1.5), (1.0, 0.0, 0.0)],
    )
    def test_clipped_surrogate(self, ratio, advantage, expected):
        assert clipped_surrogate(ratio, advantage, 0.2) == pytest.approx(expected)

    def test_dqn_targets(self):
        targets = dqn_targets([1.0, 1.0], [False, True], np.array([[2.0, 5.0], [2.0, 5.0]]), 0.9)
        np.testing.assert_allclose(targets, [5.5, 1.0])

    def test_double_dqn_uses_target_value_of_online_choice(self):
        targets = double_dqn_targets([0.0], [False], np.array([[1.0, 5.0]]), np.array([[10.0, 2.0]]), 1.0)
        assert targets[0] == pytest.approx(2.0)
        assert dqn_targets([0.0], [False], np.array([[10.0, 2.0]]), 1.0)[0] == pytest.approx(10.0)

    def test_dueling_aggregate(self):
        np.testing.assert_allclose(dueling_aggregate([3.0], [[1.0, -1.0]]), [[4.0, 2.0]])

    def test_dueling_aggregate_is_shift_invariant(self):
        np.testing.assert_allclose(dueling_aggregate([0.0], [[1.0, 2.0, 6.0]]), dueling_aggregate([0.0], [[11.0, 12.0, 16.0]]))

    def test_greedy_without_exploration(self):
        chosen = epsilon_greedy(np.array([[1.0, 3.0, 2.0]]), 0.0, np.random.default_rng(0))
        assert chosen[0] == 1

    def test_full_exploration_is_uniform(self):
        chosen = epsilon_greedy(np.tile([1.0, 3.0, 2.0], (10000, 1)), 1.0, np.random.default_rng(0))
        counts = np.bincount(chosen, minlength=3)
        expected = 10000 / 3
        chi_square = float(((counts - expected) ** 2 / expected).sum())
        assert chi_square < 13.82

    def test_generalized_advantages(self):
        advantages, returns = generalized_advantages(
            rewards=np.array([[1.0, 1.0]]),
            values=np.zeros((1, 2)),
            next_values=np.zeros((1, 2)),
            dones=np.array([[0.0, 1.0]]),
            mask=np.ones((1, 2), dtype=bool),
            gamma=0.5,
            lam=1.0,
        )
        np.testing.assert_allclose(advantages, [[1.5, 1.0]])
        np.testing.assert_allclose(returns, [[1.5, 1.0]])

    def test_advantages_do_not_cross_episodes(self):
        advantages, _ = generalized_advantages(
            rewards=np.array([[0.0, 5.0]]),
            values=np.zeros((1, 2)),
            next_values=np.array([[7.0, 7.0]]),
            dones=np.array([[1.0, 0.0]]),
            mask=np.ones((1, 2), dtype=bool),
            gamma=0.9,
            lam=0.95,
        )
        assert advantages[0, 0] == 0.0


class TestPPOAgent:
    """Tests for the PPO learner."""

    testee: PPOAgent

    def test_policy_gradient(self):
        self.given_agent(entropy_coef=0.01)
        states, actions, old_log_probs, advantages = self.__given_minibatch()
        peer = PPOAgent(given_spec("ppo", seed=9), STATE_DIM, N_ASSETS, EnvConfig())

        def loss(params):
            return self.testee.policy_loss_and_grad(states, actions, old_log_probs, advantages, [peer], 0.5, params)[0]

        _, analytic = self.testee.policy_loss_and_grad(states, actions, old_log_probs, advantages, [peer], 0.5)
        assert gradient_check(loss, self.testee.policy_params, analytic) < GRADIENT_TOLERANCE

    def test_zero_advantage_gives_zero_loss(self):
        self.given_agent()
        states, actions, old_log_probs, _ = self.__given_minibatch()
        loss, grad = self.testee.policy_loss_and_grad(states, actions, old_log_probs, np.zeros(states.shape[0]))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_kl_bonus_is_ignored_without_weight(self):
        self.given_agent()
        states, actions, old_log_probs, advantages = self.__given_minibatch()
        peer = PPOAgent(given_spec("ppo", seed=9), STATE_DIM, N_ASSETS, EnvConfig())
        alone = self.testee.policy_loss_and_grad(states, actions, old_log_probs, advantages)
        with_peer = self.testee.policy_loss_and_grad(states, actions, old_log_probs, advantages, [peer], 0.0)
        assert alone[0] == with_peer[0]
        np.testing.assert_array_equal(alone[1], with_peer[1])

    def test_value_gradient(self):
        self.given_agent()
        states = given_states()
        returns = np.random.default_rng(1).normal(size=states.shape[0])

        def loss(params):
            return self.testee.value_loss_and_grad(states, returns, params)[0]

        _, analytic = self.testee.value_loss_and_grad(states, returns)
        assert gradient_check(loss, self.testee.critic.params, analytic) < GRADIENT_TOLERANCE

    def test_exploit_is_deterministic(self):
        self.given_agent()
        state = given_states(1)[0]
        np.testing.assert_array_equal(self.testee.act(state), self.testee.act(state))
        np.testing.assert_array_equal(self.testee.act(state, "explore", seed=2), self.testee.act(state, "explore", seed=2))

    def test_actions_within_share_bounds(self):
        self.given_agent()
        actions = self.testee.act(given_states(200) * 50.0, "explore", seed=0)
        assert actions.shape == (200, N_ASSETS)
        assert np.abs(actions).max() <= 100.0

    def test_invalid_mode(self):
        self.given_agent()
        with pytest.raises(ValueError):
            self.testee.act(given_states(1)[0], "greedy")

    def test_frozen_agent_refuses_training(self, uptrend_panel):
        venv = VecTradingEnv(uptrend_panel, n_envs=2)
        self.testee = PPOAgent(given_spec("ppo"), venv.state_dim, venv.n_assets, venv.config)
        self.testee.freeze()
        with pytest.raises(ProtocolViolationException):
            self.testee.train(venv, iterations=1)
        assert self.testee.update_count == 0

    def test_training_log(self, uptrend_panel):
        venv = VecTradingEnv(uptrend_panel, n_envs=2, config=EnvConfig(max_shares=5.0))
        self.testee = PPOAgent(given_spec("ppo", batch_size=16, ppo_epochs=2), venv.state_dim, venv.n_assets, venv.config)
        self.testee.train(venv, iterations=2)
        assert [entry["iteration"] for entry in self.testee.training_log] == [0, 1]
        # 2 rows x 30 steps in minibatches of 16, twice per iteration
        assert self.testee.update_count == 2 * 2 * 4
        assert self.testee.total_steps == 120

    @pytest.mark.slow
    @pytest.mark.parametrize(
        "close",
        [
            np.linspace(100.0, 130.0, 31),
            np.column_stack([np.linspace(100.0, 130.0, 31), np.linspace(50.0, 60.0, 31)]),
        ],
        ids=["one_asset", "two_assets"],
    )
    def test_learns_to_buy_in_an_uptrend(self, panel_builder, close):
        config = EnvConfig(cost_rate=0.0, max_shares=10.0, reward_scaling=0.01)
        data = panel_builder(close)
        improved = 0
        for seed in range(5):
            venv = VecTradingEnv(data, n_envs=8, config=config)
            spec = AgentSpec(algorithm="ppo", hidden_sizes=(16,), learning_rate=3e-3, seed=seed)
            agent = train_agent(spec, venv, iterations=15, steps=0)
            returns = [entry["mean_return"] for entry in agent.training_log]
            improved += returns[-1] > returns[0]
        assert improved >= 4

    # GIVEN
    def given_agent(self, **kwargs):
        self.testee = PPOAgent(given_spec("ppo", **kwargs), STATE_DIM, N_ASSETS, EnvConfig())

    def __given_minibatch(self):
        rng = np.random.default_rng(4)
        states = given_states()
        distribution = self.testee.distribution(states)
        actions = distribution.sample(rng)
        # ratios stay well inside the clip range
        old_log_probs = distribution.log_prob(actions) + rng.normal(scale=0.01, size=states.shape[0])
        advantages = rng.normal(size=states.shape[0])
        return states, actions, old_log_probs, advantages


class TestDDPGAgent:
    """Tests for the DDPG learner."""

    testee: DDPGAgent

    def test_critic_gradient(self):
        self.given_agent()
        batch = given_replay_batch(N_ASSETS)

        def loss(params):
            return self.testee.critic_loss_and_grad(batch, params)[0]

        _, analytic = self.testee.critic_loss_and_grad(batch)
        assert gradient_check(loss, self.testee.critic.params, analytic) < GRADIENT_TOLERANCE

    def test_actor_gradient(self):
        self.given_agent()
        states = given_states()

        def loss(params):
            return self.testee.actor_loss_and_grad(states, params)[0]

        _, analytic = self.testee.actor_loss_and_grad(states)
        assert gradient_check(loss, self.testee.actor.params, analytic) < GRADIENT_TOLERANCE

    def test_exploit_has_no_noise(self):
        self.given_agent()
        state = given_states(1)[0]
        np.testing.assert_array_equal(self.testee.act(state, seed=1), self.testee.act(state, seed=2))

    # GIVEN
    def given_agent(self):
        self.testee = DDPGAgent(given_spec("ddpg"), STATE_DIM, N_ASSETS, EnvConfig())


class TestSACAgent:
    """Tests for the SAC learner."""

    testee: SACAgent

    def test_critic_gradient(self):
        self.given_agent()
        batch = given_replay_batch(N_ASSETS)
        noise = np.random.default_rng(2).standard_normal((16, N_ASSETS))

        def loss(params):
            return self.testee.critic_loss_and_grad(batch, noise, params)[0]

        _, analytic = self.testee.critic_loss_and_grad(batch, noise)
        assert gradient_check(loss, self.testee.critic_params, analytic) < GRADIENT_TOLERANCE

    def test_actor_gradient(self):
        self.given_agent()
        states = given_states()
        noise = np.random.default_rng(3).standard_normal((16, N_ASSETS))

        def loss(params):
            return self.testee.actor_loss_and_grad(states, noise, params)[0]

        _, analytic = self.testee.actor_loss_and_grad(states, noise)
        assert gradient_check(loss, self.testee.actor.params, analytic) < GRADIENT_TOLERANCE

    def test_squashed_actions_bounded(self):
        actions, log_prob = SACAgent.squashed_sample(np.zeros((3, 2)), np.zeros((3, 2)), np.array([[0.0, 50.0]] * 3))
        assert np.abs(actions).max() <= 1.0
        assert np.isfinite(log_prob).all()

    # GIVEN
    def given_agent(self):
        self.testee = SACAgent(given_spec("sac"), STATE_DIM, N_ASSETS, EnvConfig())


class TestDQNAgent:
    """Tests for DQN, Double DQN and Dueling DQN."""

    testee: DQNAgent

    @pytest.mark.parametrize("algorithm", ["dqn", "double_dqn", "dueling_dqn"])
    def test_gradient(self, algorithm):
        self.given_agent(algorithm)
        batch = given_replay_batch(1, discrete_actions=self.testee.n_actions)

        def loss(params):
            return self.testee.loss_and_grad(batch, params)[0]

        _, analytic = self.testee.loss_and_grad(batch)
        assert gradient_check(loss, self.testee.q_network.params, analytic) < GRADIENT_TOLERANCE

    def test_variant_flags(self):
        self.given_agent("dueling_dqn")
        assert self.testee.dueling and self.testee.double
        assert self.testee.q_network.output_size == self.testee.n_actions + 1
        self.given_agent("dqn")
        assert not self.testee.dueling and not self.testee.double

    def test_joint_action_indexing(self):
        self.given_agent("dqn")
        assert self.testee.n_actions == 9
        decoded = self.testee.decode(np.array([0, 4, 5, 8]))
        np.testing.assert_array_equal(decoded, [[-1.0, -1.0], [0.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        np.testing.assert_array_equal(self.testee.encode(decoded), [0, 4, 5, 8])

    def test_exploit_is_greedy(self):
        self.given_agent("dqn")
        states = given_states(5)
        greedy = self.testee.decode(self.testee.q_values(states).argmax(axis=1))
        np.testing.assert_array_equal(self.testee.act(states, seed=0), greedy)

    def test_too_many_joint_actions(self):
        with pytest.raises(ValueError):
            DQNAgent(given_spec("dqn"), 23, 11, EnvConfig(action_mode="discrete"))

    def test_hard_target_updates(self, chain_env_factory):
        venv = chain_env_factory(n_envs=4)
        spec = given_spec("dqn", learning_starts=0, batch_size=8, target_update_interval=3, gamma=0.9)
        self.testee = make_agent(spec, venv.state_dim, venv.n_assets, venv.config)
        self.testee.train(venv, steps=12)
        assert self.testee.update_count == 3
        np.testing.assert_array_equal(self.testee.q_target.params, self.testee.q_network.params)
        self.testee.train(venv, steps=4)
        assert not np.array_equal(self.testee.q_target.params, self.testee.q_network.params)
        assert len(self.testee.training_log) == 2

    @pytest.mark.slow
    @pytest.mark.parametrize("algorithm", ["dqn", "double_dqn", "dueling_dqn"])
    def test_learns_optimal_chain_policy(self, chain_env_factory, algorithm):
        venv = chain_env_factory(n_envs=8, gamma=0.9, seed=1)
        spec = AgentSpec(
            algorithm=algorithm,
            hidden_sizes=(32,),
            learning_rate=1e-3,
            batch_size=64,
            gamma=0.9,
            epsilon=0.3,
            replay_capacity=10000,
            target_update_interval=200,
            learning_starts=200,
            normalize_states=False,
            seed=5,
        )
        agent = make_agent(spec, venv.state_dim, venv.n_assets, venv.config)
        agent.train(venv, steps=16000)
        greedy = agent.q_values(np.eye(2)).argmax(axis=1)
        np.testing.assert_array_equal(greedy, self.__value_iteration_policy(chain_env_factory, 2, (0, 1), gamma=0.9))

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("algorithm", ["dqn", "double_dqn", "dueling_dqn"])
    def test_learns_optimal_line_policy(self, line_env_factory, algorithm, seed):
        # GIVEN
        venv = line_env_factory(n_envs=8, gamma=0.9, seed=seed)
        spec = AgentSpec(
            algorithm=algorithm,
            hidden_sizes=(32,),
            learning_rate=1e-3,
            batch_size=64,
            gamma=0.9,
            epsilon=0.3,
            replay_capacity=10000,
            target_update_interval=200,
            learning_starts=200,
            normalize_states=False,
            seed=seed,
        )
        expected = self.__value_iteration_policy(line_env_factory, 4, line_env_factory.levels, gamma=0.9)
        # buy up to the last position, then hold
        np.testing.assert_array_equal(expected, [2, 2, 2, 1])

        # WHEN
        agent = make_agent(spec, venv.state_dim, venv.n_assets, venv.config)
        agent.train(venv, steps=40000)

        # THEN
        np.testing.assert_array_equal(agent.q_values(np.eye(4)).argmax(axis=1), expected)

    # GIVEN
    def given_agent(self, algorithm):
        config = EnvConfig(action_mode="discrete", discrete_levels=(-1, 0, 1))
        self.testee = DQNAgent(given_spec(algorithm), STATE_DIM, N_ASSETS, config)

    # THEN
    @staticmethod
    def __value_iteration_policy(env, n_states, levels, gamma):
        q = np.zeros((n_states, len(levels)))
        for _ in range(500):
            v = q.max(axis=1)
            q = np.array(
                [[env.reward(s, a) + gamma * v[env.next_state(s, a)] for a in levels] for s in range(n_states)]
            )
        return q.argmax(axis=1)


class TestCheckpoints:
    """Tests for saving and restoring agents."""

    @pytest.mark.parametrize("algorithm", ["ppo", "ddpg", "sac", "dueling_dqn"])
    def test_restored_agent_acts_identically(self, tmp_path, algorithm):
        spec = AgentSpec(algorithm=algorithm, hidden_sizes=(8,), seed=4)
        mode = "discrete" if spec.is_discrete else "continuous"
        agent = make_agent(spec, STATE_DIM, N_ASSETS, EnvConfig(action_mode=mode, max_shares=7.0))
        agent.normalizer.update(given_states(50, seed=8) * 3.0)
        agent.update_count = 17
        agent.freeze()

        agent.save(tmp_path / "agent.json")
        restored = TrainedAgent.load(tmp_path / "agent.json")

        assert type(restored) is type(agent)
        assert restored.frozen
        assert restored.update_count == 17
        assert restored.spec == agent.spec
        assert restored.env_config.max_shares == 7.0
        states = given_states(10, seed=9)
        np.testing.assert_array_equal(restored.act(states), agent.act(states))

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "agent.json"
        path.write_text('{"format_version": 99}')
        with pytest.raises(ValueError):
            TrainedAgent.load(path)


class TestMakeAgent:
    """Tests for the agent factory."""

    @pytest.mark.parametrize(
        "algorithm,action_mode,expected",
        [("ppo", "continuous", PPOAgent), ("sac", "continuous", SACAgent), ("double_dqn", "discrete", DQNAgent)],
    )
    def test_types(self, algorithm, action_mode, expected):
        agent = make_agent(given_spec(algorithm), STATE_DIM, N_ASSETS, EnvConfig(action_mode=action_mode))
        assert isinstance(agent, expected)

    @pytest.mark.parametrize("algorithm,action_mode", [("dqn", "continuous"), ("ppo", "discrete")])
    def test_action_mode_mismatch(self, algorithm, action_mode):
        with pytest.raises(ValueError):
            make_agent(given_spec(algorithm), STATE_DIM, N_ASSETS, EnvConfig(action_mode=action_mode))

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            AgentSpec(algorithm="a3c")


class TestTrainingEntryPoints:
    """Tests for the on- and off-policy training functions."""

    def test_on_policy_needs_ppo(self, uptrend_panel):
        venv = VecTradingEnv(uptrend_panel, n_envs=2)
        with pytest.raises(ValueError):
            train_on_policy(given_spec("sac"), venv, iterations=1)

    def test_off_policy_rejects_ppo(self, uptrend_panel):
        venv = VecTradingEnv(uptrend_panel, n_envs=2)
        with pytest.raises(ValueError):
            train_off_policy(given_spec("ppo"), venv, steps=4)

    def test_dispatch_to_on_policy(self, uptrend_panel):
        venv = VecTradingEnv(uptrend_panel, n_envs=2, config=EnvConfig(max_shares=5.0))
        agent = train_agent(given_spec("ppo", batch_size=16, ppo_epochs=1), venv, iterations=1, steps=1000, horizon=5)
        assert isinstance(agent, PPOAgent)
        assert agent.total_steps == 10

    def test_off_policy_continues_a_given_agent(self, uptrend_panel):
        venv = VecTradingEnv(uptrend_panel, n_envs=2, config=EnvConfig(max_shares=5.0), timeouts=True)
        spec = given_spec("ddpg", batch_size=8, learning_starts=0)
        agent = train_off_policy(spec, venv, steps=10)
        same = train_off_policy(spec, venv, steps=10, agent=agent)
        assert same is agent
        assert agent.total_steps == 20
        assert len(agent.training_log) == 2
        assert agent.update_count == 10
