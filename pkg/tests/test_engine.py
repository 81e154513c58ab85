import json
from pathlib import Path

import pytest

from helpers import FakeEvaluator, build_fixture, morph_response, reward_response
from codesign.crawler import CRAWLER_SCHEMA, default_task_context
from codesign.engine import (
    Engine,
    NoViableCandidates,
    RunAborted,
    derive_seed,
    rank_results,
    select_top_k,
)
from codesign.llm import MockProvider, RecordingProvider
from codesign.model import (
    CemSettings,
    EvaluatorSpec,
    ProviderSpec,
    RunConfig,
    make_result,
)
from codesign.store import RunStore, serialize_state

CTX = default_task_context()
SYM = {"l1": 0.5, "l2": 0.5, "l3": 0.5, "r1": 0.05, "r2": 0.05, "r3": 0.05}
SLIM = {"l1": 0.5, "l2": 0.5, "l3": 0.5, "r1": 0.01, "r2": 0.01, "r3": 0.01}


def cfg_for(fixture_path, n_m=2, n_r=1, fine_iters=2, seed=5, k=0.5, retries=1):
    return RunConfig(
        n_morphologies=n_m,
        n_rewards=n_r,
        top_k_fraction=k,
        fine_max_iterations=fine_iters,
        seed=seed,
        evaluator=EvaluatorSpec(cem=CemSettings(population=4, elites=1, iterations=1)),
        llm=ProviderSpec(kind="scripted_mock", fixture_path=str(fixture_path)),
        max_retries=retries,
    )


def write_fixture(path, **tags):
    doc = {k: list(v) for k, v in tags.items()}
    Path(path).write_text(json.dumps(doc))
    return path


def start_engine(tmp_path, cfg, record=False, evaluator=None, name="run"):
    provider = MockProvider(cfg.llm.fixture_path)
    if record:
        provider = RecordingProvider(provider)
    engine = Engine.start(
        tmp_path / name, cfg, CRAWLER_SCHEMA, CTX,
        provider=provider,
        evaluator=evaluator if evaluator is not None else FakeEvaluator(),
    )
    return engine, provider


class TestSelectTopK:
    def grid(self, effs):
        out = {}
        for i, eff in enumerate(effs):
            pair = (f"m{i}", "r1")
            if eff is None:
                out[pair] = make_result(*pair, "timeout")
            else:
                out[pair] = make_result(*pair, "ok", fitness=eff, volume=1.0)
        return out

    def test_hand_sorted_half(self):
        grid = self.grid([5.0, 3.0, 9.0, 1.0])
        assert select_top_k(grid, 0.5) == [("m2", "r1"), ("m0", "r1")]

    def test_all_failed(self):
        with pytest.raises(NoViableCandidates):
            select_top_k(self.grid([None, None]), 0.5)

    def test_single_ok_small_fraction_keeps_one(self):
        grid = self.grid([2.0])
        assert select_top_k(grid, 0.01) == [("m0", "r1")]

    def test_floor_rule_125_cells(self):
        grid = self.grid([float(i) for i in range(125)])
        assert len(select_top_k(grid, 0.05)) == 6

    def test_deterministic_tie_break(self):
        grid = {
            ("m2", "r1"): make_result("m2", "r1", "ok", fitness=1.0, volume=1.0),
            ("m1", "r1"): make_result("m1", "r1", "ok", fitness=1.0, volume=1.0),
        }
        assert select_top_k(grid, 1.0) == [("m1", "r1"), ("m2", "r1")]

    def test_non_ok_excluded_from_count(self):
        grid = self.grid([5.0, None, 1.0, None])
        assert select_top_k(grid, 0.5) == [("m0", "r1")]


class TestDeriveSeed:
    def test_stable_and_distinct(self):
        a = derive_seed(1, "grid", "m1", "r1")
        assert a == derive_seed(1, "grid", "m1", "r1")
        assert a != derive_seed(1, "grid", "m1", "r2")
        assert a != derive_seed(2, "grid", "m1", "r1")
        assert 0 <= a < 2**63


class TestCoarse:
    def test_grid_cardinality_and_selection(self, tmp_path):
        fixture = tmp_path / "f.json"
        build_fixture(fixture, 3, 2, seed=1)
        cfg = cfg_for(fixture, n_m=3, n_r=2, k=0.34, fine_iters=0)
        engine, _ = start_engine(tmp_path, cfg)
        outcome = engine.coarse_search()
        assert len(outcome.results) == 6
        # floor(0.34 * 6 ok) = 2 selected
        assert len(outcome.selected) == 2
        assert outcome.selected == outcome.ranking[:2]

    def test_proposal_causality_under_prompt_capture(self, tmp_path):
        fixture = tmp_path / "f.json"
        build_fixture(fixture, 4, 1, seed=2)
        cfg = cfg_for(fixture, n_m=4, n_r=1, fine_iters=0)
        engine, provider = start_engine(tmp_path, cfg, record=True)
        engine.coarse_search()
        prompts = [r.user_prompt for r in provider.captured if r.tag == "morph_propose"]
        assert len(prompts) == 4
        bodies = [
            engine.state.morphologies[i].values for i in range(4)
        ]
        from codesign.llm import render_params_block

        for i, prompt in enumerate(prompts):
            assert prompt.count("### prior sample") == i
            rendered = [render_params_block(v, CRAWLER_SCHEMA) for v in bodies[:i]]
            pos = -1
            for block in rendered:
                assert block in prompt
                assert prompt.index(block) > pos
                pos = prompt.index(block)

    def test_reward_admission_requires_parse(self, tmp_path):
        fixture = write_fixture(
            tmp_path / "f.json",
            morph_propose=[morph_response(SYM)],
            reward_propose=[reward_response("v +/ 2"), reward_response("v")],
        )
        cfg = cfg_for(fixture, n_m=1, n_r=1, retries=1)
        engine, provider = start_engine(tmp_path, cfg, record=True)
        engine.propose_morphologies()
        engine.propose_rewards()
        assert engine.state.rewards[0].source == "v"
        retry = [r for r in provider.captured if r.tag == "reward_propose"][1]
        assert "could not be used" in retry.user_prompt

    def test_out_of_bounds_proposals_clamped_and_recorded(self, tmp_path):
        bad = dict(SYM, l1=5.0)
        fixture = write_fixture(
            tmp_path / "f.json",
            morph_propose=[morph_response(bad)],
            reward_propose=[reward_response("v")],
        )
        cfg = cfg_for(fixture, n_m=1, n_r=1)
        engine, _ = start_engine(tmp_path, cfg)
        engine.propose_morphologies()
        m = engine.state.morphologies[0]
        assert m.values["l1"] == 1.0
        assert m.clamped == ("l1",)

    def test_refill_then_abort_after_limit(self, tmp_path):
        fixture = write_fixture(
            tmp_path / "f.json",
            morph_propose=["no params here"] * 4,
            reward_propose=[],
        )
        cfg = cfg_for(fixture, n_m=1, n_r=1, retries=0)
        engine, _ = start_engine(tmp_path, cfg)
        with pytest.raises(RunAborted):
            engine.run()
        assert engine.store.status == "aborted"

    def test_refill_recovers_from_single_bad_attempt(self, tmp_path):
        fixture = write_fixture(
            tmp_path / "f.json",
            morph_propose=["nope", morph_response(SYM)],
            reward_propose=[reward_response("v")],
        )
        cfg = cfg_for(fixture, n_m=1, n_r=1, retries=0)
        engine, _ = start_engine(tmp_path, cfg)
        engine.propose_morphologies()
        assert len(engine.state.morphologies) == 1

    def test_empty_fixture_aborts_with_persisted_status(self, tmp_path):
        fixture = write_fixture(tmp_path / "f.json")
        cfg = cfg_for(fixture, n_m=1, n_r=1)
        engine, _ = start_engine(tmp_path, cfg)
        with pytest.raises(RunAborted):
            engine.run()
        reopened = RunStore.open(engine.store.dir)
        assert reopened.status == "aborted"
        state_doc = json.loads((engine.store.dir / "state.json").read_text())
        assert state_doc["status"] == "aborted"

    def test_grid_ranking_commutes_with_schedule(self, tmp_path):
        fixture = tmp_path / "f.json"
        build_fixture(fixture, 3, 2, seed=4)

        class ReversingEvaluator(FakeEvaluator):
            def evaluate_many(self, jobs, on_result):
                super().evaluate_many(list(reversed(list(jobs))), on_result)

        cfg = cfg_for(fixture, n_m=3, n_r=2, fine_iters=0)
        eng_a, _ = start_engine(tmp_path, cfg, name="a")
        eng_b, _ = start_engine(tmp_path, cfg, evaluator=ReversingEvaluator(), name="b")
        assert eng_a.coarse_search().ranking == eng_b.coarse_search().ranking


class TestFine:
    def scripted(self, tmp_path, morph_refines, reward_refines, fine_iters=3, name="run"):
        fixture = write_fixture(
            tmp_path / f"{name}.json",
            morph_propose=[morph_response(SYM)],
            reward_propose=[reward_response("v")],
            morph_refine=morph_refines,
            reward_refine=reward_refines,
        )
        cfg = cfg_for(fixture, n_m=1, n_r=1, fine_iters=fine_iters)
        return start_engine(tmp_path, cfg, name=name)

    def test_incumbent_verbatim_terminates_after_one_iteration(self, tmp_path):
        engine, _ = self.scripted(
            tmp_path,
            [morph_response(SYM)] * 3,
            [reward_response("v")] * 3,
        )
        report = engine.run()
        steps = engine.state.fine_trajectories[("m1", "r1")]
        assert [(s.iteration, s.phase) for s in steps] == [
            (1, "morphology"), (1, "reward"),
        ]
        assert not any(s.accepted for s in steps)
        assert report.best_efficiency == report.coarse_best_efficiency

    def test_single_improvement_accepted_exactly_once(self, tmp_path):
        engine, _ = self.scripted(
            tmp_path,
            [morph_response(SLIM), morph_response(SLIM)],
            [reward_response("v"), reward_response("v")],
        )
        report = engine.run()
        steps = engine.state.fine_trajectories[("m1", "r1")]
        accepted = [s for s in steps if s.accepted]
        assert len(accepted) == 1
        assert accepted[0].phase == "morphology" and accepted[0].iteration == 1
        assert report.best_efficiency == accepted[0].result.efficiency
        assert report.best_pair == ("m2", "r1")

    def test_zero_fine_iterations_returns_input_pair(self, tmp_path):
        engine, _ = self.scripted(tmp_path, [], [], fine_iters=0)
        report = engine.run()
        assert engine.state.fine_trajectories.get(("m1", "r1"), []) == []
        assert report.best_efficiency == report.coarse_best_efficiency
        assert report.best_pair == ("m1", "r1")

    def test_fixture_exhaustion_aborts_pair_preserving_incumbent(self, tmp_path):
        engine, _ = self.scripted(tmp_path, [], [], fine_iters=2)
        report = engine.run()
        assert report.status == "done"
        assert report.best_efficiency == report.coarse_best_efficiency

    def test_unusable_refinement_counts_as_non_improvement(self, tmp_path):
        engine, _ = self.scripted(
            tmp_path,
            ["garbled" and "no params"] * 2,  # unusable every time
            [reward_response("v")] * 2,
        )
        report = engine.run()
        steps = engine.state.fine_trajectories[("m1", "r1")]
        # morphology phases were skipped; reward phase recorded, not accepted
        assert [(s.iteration, s.phase) for s in steps] == [(1, "reward")]
        assert report.status == "done"

    def test_monotone_incumbent_series(self, tmp_path):
        engine, _ = self.scripted(
            tmp_path,
            [morph_response(SLIM), morph_response(SYM), morph_response(SLIM)],
            [reward_response("v"), reward_response("dist"), reward_response("v")],
        )
        engine.run()
        for pair, steps in engine.state.fine_trajectories.items():
            best = engine.state.grid[pair].efficiency
            for step in steps:
                if step.accepted:
                    assert step.result.efficiency > best
                    best = step.result.efficiency
                else:
                    assert not step.result.ok or step.result.efficiency <= best


class TestNoViable:
    def test_all_failed_grid_completes_without_best(self, tmp_path):
        fixture = write_fixture(
            tmp_path / "f.json",
            morph_propose=[morph_response(SYM)],
            reward_propose=[reward_response("v - v")],
        )
        cfg = cfg_for(fixture, n_m=1, n_r=1)
        engine, _ = start_engine(tmp_path, cfg)
        report = engine.run()
        assert report.best_pair is None
        assert report.status == "done"
        assert "No viable pair" in (engine.store.dir / "report" / "report.md").read_text()


class TestDeterminismAndResume:
    def run_once(self, tmp_path, name, evaluator=None, fine_iters=2):
        fixture = tmp_path / "shared.json"
        if not fixture.exists():
            build_fixture(fixture, 3, 2, seed=9, morph_refine=4, reward_refine=4)
        cfg = cfg_for(fixture, n_m=3, n_r=2, k=0.2, fine_iters=fine_iters)
        engine, _ = start_engine(tmp_path, cfg, evaluator=evaluator, name=name)
        engine.run()
        return (tmp_path / name / "state.json").read_bytes()

    def test_two_runs_byte_identical(self, tmp_path):
        a = self.run_once(tmp_path, "a")
        b = self.run_once(tmp_path, "b")
        assert a == b

    def test_interrupted_grid_resumes_to_identical_state(self, tmp_path):
        reference = self.run_once(tmp_path, "ref")

        class InterruptingEvaluator(FakeEvaluator):
            def __init__(self, stop_after):
                super().__init__()
                self.stop_after = stop_after
                self.count = 0

            def evaluate_many(self, jobs, on_result):
                def cb(result):
                    on_result(result)
                    self.count += 1
                    if self.count >= self.stop_after:
                        raise KeyboardInterrupt
                super().evaluate_many(jobs, cb)

        fixture = tmp_path / "shared.json"
        cfg = cfg_for(fixture, n_m=3, n_r=2, k=0.2, fine_iters=2)
        engine, _ = start_engine(tmp_path, cfg, evaluator=InterruptingEvaluator(3), name="cut")
        with pytest.raises(KeyboardInterrupt):
            engine.run()

        resumed = Engine.resume(
            tmp_path / "cut",
            provider=MockProvider(str(fixture)),
            evaluator=FakeEvaluator(),
        )
        resumed.run()
        assert (tmp_path / "cut" / "state.json").read_bytes() == reference

    def test_interrupted_fine_resumes_to_identical_state(self, tmp_path):
        reference = self.run_once(tmp_path, "ref2")

        class FineCutEvaluator(FakeEvaluator):
            def __init__(self, stop_after):
                super().__init__()
                self.stop_after = stop_after
                self.single_calls = 0

            def evaluate(self, morphology, reward, seed):
                result = super().evaluate(morphology, reward, seed)
                self.single_calls += 1
                if self.single_calls > self.stop_after:
                    raise KeyboardInterrupt
                return result

        fixture = tmp_path / "shared.json"
        cfg = cfg_for(fixture, n_m=3, n_r=2, k=0.2, fine_iters=2)
        engine, _ = start_engine(tmp_path, cfg, evaluator=FineCutEvaluator(1), name="cut2")
        with pytest.raises(KeyboardInterrupt):
            engine.run()

        resumed = Engine.resume(
            tmp_path / "cut2",
            provider=MockProvider(str(fixture)),
            evaluator=FakeEvaluator(),
        )
        resumed.run()
        assert (tmp_path / "cut2" / "state.json").read_bytes() == reference

    def test_resume_of_finished_run_is_idempotent(self, tmp_path):
        reference = self.run_once(tmp_path, "full")
        resumed = Engine.resume(
            tmp_path / "full",
            provider=MockProvider(str(tmp_path / "shared.json")),
            evaluator=FakeEvaluator(),
        )
        resumed.run()
        assert (tmp_path / "full" / "state.json").read_bytes() == reference


class TestFinalNeverWorse:
    def test_report_efficiency_at_least_coarse_best(self, tmp_path):
        fixture = tmp_path / "f.json"
        build_fixture(fixture, 3, 2, seed=13, morph_refine=5, reward_refine=5)
        cfg = cfg_for(fixture, n_m=3, n_r=2, k=0.4, fine_iters=2)
        engine, _ = start_engine(tmp_path, cfg)
        report = engine.run()
        assert report.best_efficiency >= report.coarse_best_efficiency


class TestEvaluatorFailureAborts:
    def test_unrecoverable_worker_aborts_run_with_persisted_status(self, tmp_path, monkeypatch):
        import sys as _sys
        from pathlib import Path as _Path

        from codesign.bridge import BridgeEvaluator

        monkeypatch.setenv("STUB_STATE", str(tmp_path / "spawned.flag"))
        stub = str(_Path(__file__).parent / "stub_worker.py")
        fixture = tmp_path / "f.json"
        build_fixture(fixture, 1, 1, seed=2)
        cfg = cfg_for(fixture, n_m=1, n_r=1)
        evaluator = BridgeEvaluator(
            [_sys.executable, stub, "hello-once-then-die"],
            CRAWLER_SCHEMA, workers=1, timeout=10.0, training_budget=0,
        )
        engine, _ = start_engine(tmp_path, cfg, evaluator=evaluator)
        with pytest.raises(RunAborted):
            engine.run()
        assert RunStore.open(engine.store.dir).status == "aborted"


class TestParallelBuiltinDeterminism:
    def test_worker_count_does_not_change_state(self, tmp_path):
        from codesign.crawler import BuiltinEvaluator

        fixture = tmp_path / "f.json"
        build_fixture(fixture, 2, 2, seed=6)
        blobs = []
        for name, workers in (("w1", 1), ("w2", 2)):
            cfg = cfg_for(fixture, n_m=2, n_r=2, k=0.3, fine_iters=0)
            evaluator = BuiltinEvaluator(cem=CemSettings(population=4, elites=1, iterations=1),
                                         workers=workers)
            engine, _ = start_engine(tmp_path, cfg, evaluator=evaluator, name=name)
            engine.run()
            blobs.append((tmp_path / name / "state.json").read_bytes())
        assert blobs[0] == blobs[1]
