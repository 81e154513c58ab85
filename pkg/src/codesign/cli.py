"""Operator entry point: run, resume, inspect and debug subcommands.

Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import crawler, diversity, rewardlang
from .engine import Engine, RunReport, rank_results, select_top_k, NoViableCandidates
from .errors import CodesignError
from .model import (
    CemSettings,
    EvaluatorSpec,
    MorphologyCandidate,
    MorphologySchema,
    ProviderSpec,
    RewardCandidate,
    RunConfig,
    validate_morphology,
)
from .prompts import PromptTemplates, TaskContext, load_templates
from .store import RunStore, schema_from_dict

log = logging.getLogger(__name__)


class ConfigError(CodesignError):
    pass


@dataclass
class LoadedConfig:
    cfg: RunConfig
    schema: MorphologySchema
    task_context: TaskContext
    out_dir: Optional[Path]
    templates: Optional[PromptTemplates]


_RUN_KEYS = {
    "n_morphologies", "n_rewards", "top_k_fraction", "fine_max_iterations",
    "seed", "training_budget", "retrain_budget", "proposal_temperature",
    "refine_temperature", "max_retries", "context_budget",
}
_TOP_KEYS = {"run", "schema", "task", "evaluator", "llm", "out_dir", "templates_dir"}
_EVAL_KEYS = {"kind", "workers", "cem", "argv", "timeout"}
_CEM_KEYS = {"population", "elites", "iterations"}
_LLM_KEYS = {"kind", "fixture", "endpoint", "model", "api_key_env"}
_TASK_KEYS = {"description", "environment_source", "environment_source_path",
              "output_format", "structure_template"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def load_config_file(path: str | Path) -> LoadedConfig:
    """Parse a run config file; all relative paths resolve against the
    config file's directory; unknown keys are rejected."""
    path = Path(path)
    base = path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")

    run_section = doc.get("run", {})
    _reject_unknown(run_section, _RUN_KEYS, "run")

    eval_section = dict(doc.get("evaluator", {"kind": "builtin"}))
    _reject_unknown(eval_section, _EVAL_KEYS, "evaluator")
    cem_section = dict(eval_section.pop("cem", {}))
    _reject_unknown(cem_section, _CEM_KEYS, "evaluator.cem")
    if eval_section.get("kind") == "subprocess":
        eval_section.setdefault("workers", 2)
    evaluator = EvaluatorSpec(cem=CemSettings(**cem_section), **{
        **eval_section, "argv": tuple(eval_section.get("argv", ())),
    })

    llm_section = dict(doc.get("llm", {}))
    if not llm_section:
        raise ConfigError("config requires an llm section")
    _reject_unknown(llm_section, _LLM_KEYS, "llm")
    fixture = llm_section.pop("fixture", None)
    if fixture is not None:
        llm_section["fixture_path"] = str((base / fixture).resolve())
    provider = ProviderSpec(**llm_section)

    cfg = RunConfig(evaluator=evaluator, llm=provider, **run_section)

    schema_sel = doc.get("schema", "crawler")
    if schema_sel == "crawler":
        schema = crawler.CRAWLER_SCHEMA
        task_ctx = crawler.default_task_context()
    elif isinstance(schema_sel, dict) and "path" in schema_sel:
        schema_doc = json.loads((base / schema_sel["path"]).read_text())
        schema = schema_from_dict(schema_doc)
        task_ctx = None
    else:
        raise ConfigError(f"schema must be 'crawler' or {{'path': ...}}, got {schema_sel!r}")

    task_section = doc.get("task")
    if task_section is not None:
        _reject_unknown(task_section, _TASK_KEYS, "task")
        env_source = task_section.get("environment_source", "")
        if "environment_source_path" in task_section:
            env_source = (base / task_section["environment_source_path"]).read_text()
        task_ctx = TaskContext(
            task_description=task_section.get("description", ""),
            environment_source=env_source,
            structure_template=task_section.get(
                "structure_template", schema.structure_template
            ),
            output_format=task_section.get("output_format", crawler.output_format(schema)),
        )
    if task_ctx is None:
        raise ConfigError("external schemas require a task section")

    out_dir = doc.get("out_dir")
    templates = None
    if doc.get("templates_dir"):
        templates = load_templates(base / doc["templates_dir"])
    return LoadedConfig(
        cfg=cfg,
        schema=schema,
        task_context=task_ctx,
        out_dir=(base / out_dir).resolve() if out_dir else None,
        templates=templates,
    )


def _print_report(report: RunReport) -> None:
    print(f"status: {report.status}")
    print(f"evaluations: {report.n_evaluations}")
    if report.best_pair is None:
        print("best pair: none (all evaluations failed)")
    else:
        print(f"best pair: {report.best_pair[0]} + {report.best_pair[1]}")
        print(f"best efficiency: {report.best_efficiency!r}")
        print(f"best fitness: {report.best_fitness!r}")
    print(f"run dir: {report.run_dir}")


def cmd_run(args) -> int:
    loaded = load_config_file(args.config)
    out_dir = Path(args.out) if args.out else loaded.out_dir
    if out_dir is None:
        print("error: no output directory (use --out or out_dir)", file=sys.stderr)
        return 2
    engine = Engine.start(
        out_dir, loaded.cfg, loaded.schema, loaded.task_context,
        templates=loaded.templates,
    )
    _print_report(engine.run())
    return 0


def cmd_resume(args) -> int:
    engine = Engine.resume(args.dir)
    _print_report(engine.run())
    return 0


def _load_state_with_selection(directory):
    store = RunStore.open(directory)
    state = store.load_state()
    cfg = state.config
    complete = len(state.grid) >= cfg.n_morphologies * cfg.n_rewards
    if complete and not state.selected:
        try:
            state.selected = select_top_k(state.grid, cfg.top_k_fraction)
        except NoViableCandidates:
            state.selected = []
    state.status = store.status
    return store, state


def cmd_report(args) -> int:
    store, state = _load_state_with_selection(args.dir)
    path = store.write_report(state, args.format)
    print(path)
    return 0


def cmd_diversity(args) -> int:
    store, state = _load_state_with_selection(args.dir)
    rep = diversity.report(
        [m.values for m in state.morphologies],
        [r.source for r in state.rewards],
        state.schema,
    )
    print("Morphology Diversity (Coefficient of Variation)")
    for name, cv in rep.per_param_cv.items():
        shown = "undefined" if cv is None else repr(cv)
        print(f"  {name}: {shown}")
    print(f"  aggregate: {rep.aggregate_cv!r}")
    bleu = "undefined" if rep.self_bleu is None else repr(rep.self_bleu)
    print(f"Reward Diversity (Self-BLEU): {bleu}")
    print(f"Samples: {rep.sample_count} morphologies, {len(state.rewards)} rewards")
    return 0


def cmd_eval_once(args) -> int:
    doc = json.loads(Path(args.morphology).read_text())
    values = doc.get("values", doc)
    clamped, violations = validate_morphology(crawler.CRAWLER_SCHEMA, values)
    for v in violations:
        log.warning("%s", v)
    source = Path(args.reward).read_text()
    morphology = MorphologyCandidate(id="m1", values=clamped, provenance="fixture")
    reward = RewardCandidate(
        id="r1", source=source, dialect="builtin_dsl", provenance="fixture"
    )
    result = crawler.evaluate_builtin(
        morphology, reward, crawler.CemConfig(seed=args.seed)
    )
    from .store import result_to_dict

    print(json.dumps(result_to_dict(result), indent=2, sort_keys=True))
    return 0 if result.ok else 1


def cmd_validate_reward(args) -> int:
    source = Path(args.file).read_text()
    ast = rewardlang.parse(source)
    names = sorted(rewardlang.free_vars(ast))
    print("ok")
    print(f"free variables: {{{', '.join(names)}}}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codesign",
        description="Joint morphology/reward optimization runs",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="start a new run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("dir")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="write a report for a run directory")
    p.add_argument("dir")
    p.add_argument("--format", choices=["csv", "md"], default="md")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("diversity", help="diversity metrics for a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("eval-once", help="evaluate one morphology/reward pair")
    p.add_argument("--morphology", required=True, help="JSON file of parameter values")
    p.add_argument("--reward", required=True, help="reward expression file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_once)

    p = sub.add_parser("validate-reward", help="parse a reward file and list variables")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate_reward)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CodesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
