import math

import numpy as np

from physics_worker.envs import REGISTRY, PlanarCrawlerEnv, StubEnv, crawler_volume

PARAMS = {"l1": 0.4, "l2": 0.3, "l3": 0.4, "r1": 0.04, "r2": 0.05, "r3": 0.04}


class TestStubEnv:
    def test_never_moves(self):
        env = StubEnv({})
        env.reset()
        done = False
        while not done:
            _, done = env.step(np.ones(env.action_dim))
        assert env.fitness() == 0.0

    def test_state_dict_matches_observation_names(self):
        env = StubEnv({})
        env.reset()
        assert set(env.state_dict()) == set(env.observation_names)


class TestPlanarCrawler:
    def test_idle_body_stays_put(self):
        env = PlanarCrawlerEnv(PARAMS)
        env.reset()
        for _ in range(100):
            env.step(np.zeros(3))
        assert env.fitness() == 0.0

    def test_scripted_gait_moves_the_body(self):
        env = PlanarCrawlerEnv(PARAMS)
        env.reset()
        done = False
        k = 0
        while not done:
            t = k * env.DT
            action = np.array([
                math.sin(2 * math.pi * 1.5 * t),
                math.sin(2 * math.pi * 1.5 * t + 2.0),
                math.sin(2 * math.pi * 1.5 * t + 1.0),
            ])
            _, done = env.step(action)
            k += 1
        assert abs(env.fitness()) > 0.05

    def test_deterministic_given_actions(self):
        def run():
            env = PlanarCrawlerEnv(PARAMS)
            env.reset()
            trace = []
            for k in range(80):
                obs, _ = env.step(np.array([math.sin(k * 0.1), -0.4, 0.8]))
                trace.append(obs.copy())
            return np.array(trace)

        assert np.array_equal(run(), run())

    def test_state_dict_matches_observation_names(self):
        env = PlanarCrawlerEnv(PARAMS)
        env.reset()
        assert set(env.state_dict()) == set(env.observation_names)

    def test_actions_clipped(self):
        env = PlanarCrawlerEnv(PARAMS)
        env.reset()
        obs, _ = env.step(np.array([99.0, -99.0, 99.0]))
        assert np.all(np.isfinite(obs))


class TestVolume:
    def test_crawler_volume_formula(self):
        expected = sum(
            math.pi * PARAMS[f"r{i}"] ** 2 * PARAMS[f"l{i}"] for i in (1, 2, 3)
        )
        assert crawler_volume(PARAMS) == expected

    def test_registry_volumes_positive(self):
        assert REGISTRY["crawler"].volume(PARAMS) > 0
        assert REGISTRY["stub"].volume({}) > 0
