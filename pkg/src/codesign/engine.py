"""The co-design loop: sequential diversity-reflecting proposal of
morphologies and rewards, full grid evaluation, top-k selection, then
per-pair alternating refinement with strict-improvement acceptance.

Proposal calls are inherently sequential (each diversity prompt conditions
on all prior samples); grid evaluations may run concurrently through the
evaluator pool; all state writes funnel through the run store.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import llm as llm_mod
from .bridge import BridgeEvaluator, WorkerUnrecoverable
from .crawler import BuiltinEvaluator
from .errors import CodesignError, NonFiniteValue
from .llm import (
    FixtureExhausted,
    LlmRequest,
    MockProvider,
    ParseError,
    ProviderError,
    extract_code_block,
    extract_params_block,
    make_provider,
    render_code_block,
    render_params_block,
)
from .model import (
    EvaluationResult,
    FineStep,
    MorphologyCandidate,
    MorphologySchema,
    RewardCandidate,
    RunConfig,
    RunState,
    validate_morphology,
)
from .prompts import (
    ArchiveEntry,
    PromptTemplates,
    TaskContext,
    build_proposal_prompt,
    build_refine_prompt,
    default_templates,
    validate_task_context,
)
from .rewardlang import RewardLangError, free_vars, parse
from .store import RunStore, fine_key, grid_key

log = logging.getLogger(__name__)

# Number of scored samples shown in refinement prompts.
RANKED_CONTEXT_SIZE = 5
# Fresh proposal attempts allowed after the first one fails its retries.
REFILL_LIMIT = 3


class RunAborted(CodesignError):
    pass


class NoViableCandidates(CodesignError):
    pass


class _ProposalFailed(CodesignError):
    """One proposal attempt (with its corrective re-prompts) produced
    nothing usable."""


@dataclass(frozen=True)
class GridOutcome:
    results: dict[tuple[str, str], EvaluationResult]
    ranking: list[tuple[str, str]]
    selected: list[tuple[str, str]]


@dataclass(frozen=True)
class RunReport:
    status: str
    best_pair: Optional[tuple[str, str]]
    best_efficiency: Optional[float]
    best_fitness: Optional[float]
    coarse_best_efficiency: Optional[float]
    n_evaluations: int
    run_dir: str


def derive_seed(run_seed: int, *parts) -> int:
    """Stable 63-bit seed from the run seed and a context path."""
    text = "|".join([str(run_seed), *[str(p) for p in parts]])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rank_results(results: dict[tuple[str, str], EvaluationResult]) -> list[tuple[str, str]]:
    """All ok pairs, best efficiency first, ties broken lexicographically."""
    ok = [(pair, res) for pair, res in results.items() if res.ok]
    ok.sort(key=lambda pr: (-pr[1].efficiency, pr[0]))
    return [pair for pair, _ in ok]


def select_top_k(
    results: dict[tuple[str, str], EvaluationResult], fraction: float
) -> list[tuple[str, str]]:
    """The max(1, floor(fraction * ok_count)) best ok pairs."""
    ranking = rank_results(results)
    if not ranking:
        raise NoViableCandidates("every grid evaluation failed")
    count = max(1, math.floor(fraction * len(ranking)))
    return ranking[:count]


def _max_id_suffix(ids, prefix: str) -> int:
    best = 0
    for cid in ids:
        if cid.startswith(prefix):
            try:
                best = max(best, int(cid[len(prefix):]))
            except ValueError:
                continue
    return best


class Engine:
    """Drives one run end to end; resumable at any point."""

    def __init__(
        self,
        store: RunStore,
        state: RunState,
        provider=None,
        evaluator=None,
        templates: Optional[PromptTemplates] = None,
    ):
        self.store = store
        self.state = state
        self.cfg = state.config
        self.schema = state.schema
        self.ctx = store.task_context()
        validate_task_context(self.ctx, self.schema)
        self.templates = templates or default_templates()
        self.provider = provider if provider is not None else make_provider(self.cfg.llm)
        if isinstance(self.provider, MockProvider) or getattr(self.provider, "kind", "") == "scripted_mock":
            self.provider.set_cursors(store.llm_cursor())
        self.evaluator = evaluator if evaluator is not None else self._build_evaluator()
        all_ids = state.all_candidate_ids()
        self._next_m = _max_id_suffix(all_ids, "m") + 1
        self._next_r = _max_id_suffix(all_ids, "r") + 1

    # -- construction -----------------------------------------------------

    @classmethod
    def start(
        cls,
        directory: str | Path,
        cfg: RunConfig,
        schema: MorphologySchema,
        task_context: TaskContext,
        provider=None,
        evaluator=None,
        templates: Optional[PromptTemplates] = None,
    ) -> "Engine":
        store = RunStore.init_run(directory, cfg, schema, task_context)
        state = RunState(config=cfg, schema=schema)
        return cls(store, state, provider, evaluator, templates)

    @classmethod
    def resume(
        cls,
        directory: str | Path,
        provider=None,
        evaluator=None,
        templates: Optional[PromptTemplates] = None,
    ) -> "Engine":
        store = RunStore.open(directory)
        state, _pending = store.resume()
        return cls(store, state, provider, evaluator, templates)

    def _build_evaluator(self):
        spec = self.cfg.evaluator
        if spec.kind == "builtin":
            return BuiltinEvaluator(cem=spec.cem, workers=spec.workers)
        return BridgeEvaluator(
            list(spec.argv),
            self.schema,
            workers=spec.workers,
            timeout=spec.timeout,
            training_budget=self.cfg.training_budget,
        )

    # -- proposals ---------------------------------------------------------

    def _cursor(self) -> dict[str, int]:
        return dict(getattr(self.provider, "cursors", {}) or {})

    def _complete(self, tag: str, system: str, user: str, temperature: float) -> str:
        request = LlmRequest(
            system_prompt=system,
            user_prompt=user,
            temperature=temperature,
            max_retries=self.cfg.max_retries,
            tag=tag,
        )
        return llm_mod.complete(self.provider, request)

    def _ask_until_parsed(self, tag, system, user, temperature, parse_fn):
        """One proposal attempt: up to max_retries corrective re-prompts.
        Provider failures propagate; parse failures become _ProposalFailed."""
        prompt = user
        last = None
        for _ in range(self.cfg.max_retries + 1):
            response = self._complete(tag, system, prompt, temperature)
            try:
                return parse_fn(response)
            except (ParseError, RewardLangError, NonFiniteValue) as exc:
                last = exc
                log.info("unusable %s response (%s); re-prompting", tag, exc)
                prompt = (
                    user
                    + f"\n\nYour previous reply could not be used ({exc}). "
                    "Reply again and follow the output format exactly."
                )
        raise _ProposalFailed(str(last))

    def _propose(self, tag, system, user, temperature, parse_fn):
        """Proposal with refills: after a failed attempt the slot is refilled
        by a fresh attempt, up to REFILL_LIMIT; then the run aborts."""
        failures = 0
        while True:
            try:
                return self._ask_until_parsed(tag, system, user, temperature, parse_fn)
            except _ProposalFailed as exc:
                failures += 1
                if failures > REFILL_LIMIT:
                    raise RunAborted(
                        f"{tag} failed {failures} proposal attempts: {exc}"
                    ) from None
                log.warning("refilling %s slot after failed attempt (%d)", tag, failures)

    def _morph_archive(self) -> list[ArchiveEntry]:
        return [
            ArchiveEntry(body=render_params_block(m.values, self.schema))
            for m in self.state.morphologies
        ]

    def _reward_archive(self) -> list[ArchiveEntry]:
        return [ArchiveEntry(body=render_code_block(r.source)) for r in self.state.rewards]

    def _parse_morph_values(self, response: str) -> dict[str, float]:
        raw = extract_params_block(response, self.schema)
        clamped, violations = validate_morphology(self.schema, raw)
        for v in violations:
            log.info("admission: %s", v)
        return {"values": clamped, "clamped": tuple(
            v.split()[1].rstrip(":") for v in violations
        )}

    def _parse_reward_source(self, response: str) -> str:
        source = extract_code_block(response)
        if self.evaluator.reward_dialect == "builtin_dsl":
            ast = parse(source)
            unknown = free_vars(ast) - set(self._state_vars())
            if unknown:
                raise ParseError(f"unknown state variables: {sorted(unknown)}")
        return source

    def _state_vars(self) -> tuple[str, ...]:
        from .crawler import STATE_VARS

        return STATE_VARS

    def propose_morphologies(self) -> None:
        while len(self.state.morphologies) < self.cfg.n_morphologies:
            system, user = build_proposal_prompt(
                "morphology",
                self.ctx,
                self._morph_archive(),
                self.schema,
                self.templates,
                self.cfg.context_budget,
            )
            parsed = self._propose(
                "morph_propose", system, user, self.cfg.proposal_temperature,
                self._parse_morph_values,
            )
            candidate = MorphologyCandidate(
                id=f"m{self._next_m}",
                values=parsed["values"],
                provenance="llm_proposal",
                clamped=parsed["clamped"],
            )
            self._next_m += 1
            self.store.record_candidate(candidate, self._cursor())
            self.state.morphologies.append(candidate)
            log.info("admitted morphology %s", candidate.id)

    def propose_rewards(self) -> None:
        dialect = self.evaluator.reward_dialect
        while len(self.state.rewards) < self.cfg.n_rewards:
            system, user = build_proposal_prompt(
                "reward",
                self.ctx,
                self._reward_archive(),
                self.schema,
                self.templates,
                self.cfg.context_budget,
            )
            source = self._propose(
                "reward_propose", system, user, self.cfg.proposal_temperature,
                self._parse_reward_source,
            )
            candidate = RewardCandidate(
                id=f"r{self._next_r}", source=source, dialect=dialect,
                provenance="llm_proposal",
            )
            self._next_r += 1
            self.store.record_candidate(candidate, self._cursor())
            self.state.rewards.append(candidate)
            log.info("admitted reward %s", candidate.id)

    # -- coarse stage -------------------------------------------------------

    def coarse_search(self) -> GridOutcome:
        """Propose all candidates, evaluate the full grid, select top-k."""
        self.propose_morphologies()
        self.propose_rewards()

        jobs = []
        for m in self.state.morphologies:
            for r in self.state.rewards:
                if (m.id, r.id) not in self.state.grid:
                    jobs.append((m, r, derive_seed(self.cfg.seed, "grid", m.id, r.id)))

        def on_result(result: EvaluationResult) -> None:
            mid, rid = result.pair
            self.store.record(grid_key(mid, rid), result)
            self.state.grid[(mid, rid)] = result
            log.info("grid %s/%s: %s", mid, rid, result.status)

        if jobs:
            self.evaluator.evaluate_many(jobs, on_result)
        ranking = rank_results(self.state.grid)
        selected = select_top_k(self.state.grid, self.cfg.top_k_fraction)
        return GridOutcome(results=dict(self.state.grid), ranking=ranking, selected=selected)

    # -- fine stage ----------------------------------------------------------

    def _ranked_entries(
        self, pair_history: list[tuple[MorphologyCandidate, RewardCandidate, EvaluationResult]],
        kind: str,
    ) -> list[ArchiveEntry]:
        triples = []
        for (mid, rid), res in self.state.grid.items():
            if res.ok:
                triples.append((self.state.candidate(mid), self.state.candidate(rid), res))
        triples.extend(t for t in pair_history if t[2].ok)
        triples.sort(key=lambda t: (-t[2].efficiency, (t[0].id, t[1].id)))
        top = triples[:RANKED_CONTEXT_SIZE]
        entries = []
        for m, r, res in top:
            if kind == "morphology":
                body = render_params_block(m.values, self.schema)
            else:
                body = render_code_block(r.source)
            entries.append(ArchiveEntry(body=body, efficiency=res.efficiency))
        return entries

    def _refine_candidate(self, kind, current_m, current_r, best_eff, ranked):
        """Ask for a refined candidate; returns None when the response is
        unusable after retries (a non-improvement, not an error)."""
        tag = "morph_refine" if kind == "morphology" else "reward_refine"
        system, user = build_refine_prompt(
            kind,
            render_params_block(current_m.values, self.schema),
            render_code_block(current_r.source),
            best_eff,
            ranked,
            self.ctx,
            self.templates,
            self.cfg.context_budget,
        )
        parse_fn = (
            self._parse_morph_values if kind == "morphology" else self._parse_reward_source
        )
        try:
            return self._ask_until_parsed(
                tag, system, user, self.cfg.refine_temperature, parse_fn
            )
        except _ProposalFailed as exc:
            log.info("%s refinement unusable, counts as non-improvement: %s", tag, exc)
            return None

    def fine_optimize(self, pair: tuple[str, str], grid: GridOutcome):
        """Alternating refinement for one selected pair. The incumbent starts
        at the pair's grid result and only strictly better ok evaluations
        replace it; an iteration that accepts neither phase ends the stage."""
        mid0, rid0 = pair
        if pair not in grid.results or not grid.results[pair].ok:
            raise CodesignError(f"pair {pair} is not a selected ok pair")
        pair_key = f"{mid0}_{rid0}"
        incumbent_m = self.state.candidate(mid0)
        incumbent_r = self.state.candidate(rid0)
        best = grid.results[pair]
        history: list[tuple[MorphologyCandidate, RewardCandidate, EvaluationResult]] = []
        steps = self.state.fine_trajectories.setdefault(pair, [])
        recorded = {(s.iteration, s.phase): s for s in steps}

        # Replay persisted steps so resume continues mid-pair.
        for step in steps:
            cand = self.state.fine_candidates[step.candidate_id]
            if step.phase == "morphology":
                history.append((cand, incumbent_r, step.result))
                if step.accepted:
                    incumbent_m, best = cand, step.result
            else:
                history.append((incumbent_m, cand, step.result))
                if step.accepted:
                    incumbent_r, best = cand, step.result

        progress = self.store.fine_progress(pair_key) or {}
        if progress.get("done"):
            return incumbent_m, incumbent_r, best
        _order = {"morphology": 0, "reward": 1}

        def already_ran(iteration: int, phase: str) -> bool:
            if not progress:
                return False
            return (iteration, _order[phase]) <= (
                progress["iteration"], _order.get(progress["phase"], 1)
            )

        for iteration in range(1, self.cfg.fine_max_iterations + 1):
            improved = False
            for phase in ("morphology", "reward"):
                existing = recorded.get((iteration, phase))
                if existing is not None:
                    improved = improved or existing.accepted
                    continue
                if already_ran(iteration, phase):
                    continue  # ran before a crash and left no step: a skip
                try:
                    outcome = self._run_fine_phase(
                        pair, iteration, phase, incumbent_m, incumbent_r, best, history
                    )
                except (FixtureExhausted, ProviderError) as exc:
                    log.warning("fine stage for %s aborted: %s", pair, exc)
                    self.store.mark_fine_done(pair_key, self._cursor())
                    return incumbent_m, incumbent_r, best
                if outcome is None:
                    # unusable refinement response: a non-improvement
                    self.store.mark_fine_phase(pair_key, iteration, phase, self._cursor())
                    continue
                step, candidate = outcome
                steps.append(step)
                recorded[(iteration, phase)] = step
                self.state.fine_candidates[candidate.id] = candidate
                if phase == "morphology":
                    history.append((candidate, incumbent_r, step.result))
                    if step.accepted:
                        incumbent_m, best = candidate, step.result
                else:
                    history.append((incumbent_m, candidate, step.result))
                    if step.accepted:
                        incumbent_r, best = candidate, step.result
                improved = improved or step.accepted
            if not improved:
                break
        self.store.mark_fine_done(pair_key, self._cursor())
        return incumbent_m, incumbent_r, best

    def _run_fine_phase(self, pair, iteration, phase, incumbent_m, incumbent_r, best, history):
        ranked = self._ranked_entries(history, phase)
        parsed = self._refine_candidate(phase, incumbent_m, incumbent_r, best.efficiency, ranked)
        if parsed is None:
            return None
        seed = derive_seed(self.cfg.seed, "fine", pair[0], pair[1], iteration, phase)
        if phase == "morphology":
            candidate = MorphologyCandidate(
                id=f"m{self._next_m}",
                values=parsed["values"],
                provenance="llm_refinement",
                parent_id=incumbent_m.id,
                clamped=parsed["clamped"],
            )
            self._next_m += 1
            result = self.evaluator.evaluate(candidate, incumbent_r, seed)
        else:
            candidate = RewardCandidate(
                id=f"r{self._next_r}",
                source=parsed,
                dialect=self.evaluator.reward_dialect,
                provenance="llm_refinement",
                parent_id=incumbent_r.id,
            )
            self._next_r += 1
            result = self.evaluator.evaluate(incumbent_m, candidate, seed)
        accepted = result.ok and result.efficiency > best.efficiency
        step = FineStep(
            iteration=iteration,
            phase=phase,
            candidate_id=candidate.id,
            result=result,
            accepted=accepted,
        )
        self.store.record(
            fine_key(pair[0], pair[1], iteration, phase),
            result,
            llm_cursor=self._cursor(),
            fine_step=step,
            fine_candidate=candidate,
        )
        log.info(
            "fine %s iter %d %s: %s%s",
            pair, iteration, phase, result.status, " accepted" if accepted else "",
        )
        return step, candidate

    # -- top level -----------------------------------------------------------

    def run(self) -> RunReport:
        """Execute (or continue) the whole pipeline and persist everything."""
        try:
            try:
                outcome = self.coarse_search()
            except NoViableCandidates:
                log.warning("no viable coarse candidates; finishing without a best pair")
                self.state.selected = []
                self.state.with_status("done")
                self.store.set_status("done")
                return self._finish(None)
            self.state.selected = list(outcome.selected)
            if self.store.status == "coarse":
                self.store.set_status("fine")
            self.state.with_status("fine")

            finals = {}
            for pair in outcome.selected:
                finals[pair] = self.fine_optimize(pair, outcome)

            self.state.with_status("done")
            self.store.set_status("done")
            best_pair, best_final = None, None
            for pair in outcome.selected:
                m, r, res = finals[pair]
                key = (-res.efficiency, (m.id, r.id))
                if best_final is None or key < best_final[0]:
                    best_final = (key, (m.id, r.id), res)
                    best_pair = pair
            return self._finish(best_final)
        except (FixtureExhausted, ProviderError, WorkerUnrecoverable, RunAborted) as exc:
            self.state.with_status("aborted")
            self.store.set_status("aborted")
            self.store.save_state(self.state)
            if isinstance(exc, RunAborted):
                raise
            kind = "evaluator" if isinstance(exc, WorkerUnrecoverable) else "provider"
            raise RunAborted(f"{kind} failure: {exc}") from exc
        finally:
            try:
                self.evaluator.close()
            except Exception:
                pass

    def _finish(self, best_final) -> RunReport:
        coarse_best = None
        ranking = rank_results(self.state.grid)
        if ranking:
            coarse_best = self.state.grid[ranking[0]].efficiency
        self.store.write_report(self.state, "md")
        self.store.write_report(self.state, "csv")
        self.store.save_state(self.state)
        if best_final is None:
            return RunReport(
                status=self.state.status,
                best_pair=None,
                best_efficiency=None,
                best_fitness=None,
                coarse_best_efficiency=coarse_best,
                n_evaluations=len(self.state.grid),
                run_dir=str(self.store.dir),
            )
        _key, ids, res = best_final
        return RunReport(
            status=self.state.status,
            best_pair=ids,
            best_efficiency=res.efficiency,
            best_fitness=res.fitness,
            coarse_best_efficiency=coarse_best,
            n_evaluations=len(self.state.grid),
            run_dir=str(self.store.dir),
        )
