"""Prompt assembly for every pipeline stage: masking of structure templates,
coarse proposal prompts with a diversity section over all prior samples, and
fine-stage refinement prompts carrying ranked scored context.

Prompts are pure functions of their inputs: no timestamps, no randomness.
Templates use ``string.Template`` placeholders and can be overridden from a
directory of plain-text files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from string import Template
from typing import Optional

from .errors import CodesignError
from .model import MorphologySchema

DEFAULT_CONTEXT_BUDGET = 24_000

# Markers whose presence in environment_source indicates a leftover reward
# definition. Configurable because external environments differ.
DEFAULT_FORBIDDEN_MARKERS = ("def reward", "reward =", "return reward")

MASK_FORMAT = "<MASKED:{}>"


class MaskMiss(CodesignError):
    """A parameter slated for masking never occurs in the template."""


class ContextOverflow(CodesignError):
    """Even a single archive entry cannot fit in the context budget."""


class TaskContextError(CodesignError):
    pass


@dataclass(frozen=True)
class TaskContext:
    """Everything task-specific a prompt needs. ``environment_source`` must
    contain no reward definition; ``output_format`` must list every design
    parameter."""

    task_description: str
    environment_source: str
    structure_template: str
    output_format: str


def validate_task_context(
    ctx: TaskContext,
    schema: MorphologySchema,
    forbidden_markers: tuple[str, ...] = DEFAULT_FORBIDDEN_MARKERS,
) -> None:
    for marker in forbidden_markers:
        if marker in ctx.environment_source:
            raise TaskContextError(f"environment source contains forbidden marker {marker!r}")
    for name in schema.param_names:
        if name not in ctx.output_format:
            raise TaskContextError(f"output format does not mention parameter {name!r}")


def mask_structure(template: str, parameter_names: list[str]) -> str:
    """Replace every occurrence of each parameter (placeholder or bare
    token) with ``<MASKED:name>``. Idempotent; raises MaskMiss for a
    parameter with zero occurrences."""
    out = template
    for name in parameter_names:
        mask = MASK_FORMAT.format(name)
        placeholder = "{%s}" % name
        hits = out.count(placeholder)
        out = out.replace(placeholder, mask)
        out, bare_hits = re.subn(
            rf"(?<!MASKED:)\b{re.escape(name)}\b", lambda _m: mask, out
        )
        if hits + bare_hits == 0 and mask not in out:
            raise MaskMiss(name)
    return out


# ------------------------------------------------------------- templates

PROMPT_KINDS = ("morph_propose", "reward_propose", "morph_refine", "reward_refine")

DEFAULT_TEMPLATES: dict[str, str] = {
    "morph_propose.system": (
        "You are a robot design assistant. You propose numeric design "
        "parameters for a robot body so that it performs a given task well. "
        "Follow the output format exactly."
    ),
    "morph_propose.user": (
        "Task:\n$task_description\n\n"
        "Robot structure file with every design parameter masked:\n"
        "$masked_structure\n\n"
        "$output_format\n"
        "$diversity_section"
    ),
    "reward_propose.system": (
        "You are a reward design assistant. You write the training objective "
        "used to teach a robot a task. Follow the output format exactly."
    ),
    "reward_propose.user": (
        "Task:\n$task_description\n\n"
        "Environment source (any pre-existing reward removed):\n"
        "$environment_source\n\n"
        "$reward_output_format\n"
        "$diversity_section"
    ),
    "morph_refine.system": (
        "You are a robot design assistant improving an existing design. "
        "Change only what is asked; follow the output format exactly."
    ),
    "morph_refine.user": (
        "Task:\n$task_description\n\n"
        "Current best design and its training objective:\n"
        "$current_section\n"
        "Best scored samples so far, best first:\n"
        "$ranked_section\n"
        "Propose improved design parameters for the robot body. Keep the "
        "training objective exactly as it is; change only the parameters. "
        "Aim to beat the current best efficiency.\n\n"
        "$output_format"
    ),
    "reward_refine.system": (
        "You are a reward design assistant improving an existing training "
        "objective. Change only what is asked; follow the output format "
        "exactly."
    ),
    "reward_refine.user": (
        "Task:\n$task_description\n\n"
        "Current best design and its training objective:\n"
        "$current_section\n"
        "Best scored samples so far, best first:\n"
        "$ranked_section\n"
        "Propose an improved training objective for this exact robot body. "
        "Keep the body parameters fixed; change only the objective. Aim to "
        "beat the current best efficiency.\n\n"
        "$reward_output_format"
    ),
    "diversity.header": (
        "Samples already generated, oldest first:\n"
    ),
    "diversity.instruction": (
        "\nPropose one new sample now. Make it as different as possible from "
        "every sample listed above (not a repeat and not a small tweak of "
        "one) while still promising strong task performance."
    ),
    "reward_output_format": (
        "Reply with exactly one fenced code block containing a single reward "
        "expression over the environment's state variables."
    ),
}

_ENTRY_HEADER = "### prior sample {index}{score}\n"


@dataclass(frozen=True)
class PromptTemplates:
    table: dict[str, str]

    def get(self, key: str) -> Template:
        return Template(self.table[key])

    def raw(self, key: str) -> str:
        return self.table[key]


def default_templates() -> PromptTemplates:
    return PromptTemplates(dict(DEFAULT_TEMPLATES))


def load_templates(directory: str | Path) -> PromptTemplates:
    """Override built-in templates with ``<key>.txt`` files from a directory."""
    table = dict(DEFAULT_TEMPLATES)
    directory = Path(directory)
    for path in sorted(directory.glob("*.txt")):
        key = path.stem
        if key not in table:
            raise TaskContextError(f"unknown template file {path.name!r}")
        table[key] = path.read_text()
    return PromptTemplates(table)


@dataclass(frozen=True)
class ArchiveEntry:
    """One prior sample shown to the model: a pre-rendered body plus its
    efficiency when it has been evaluated."""

    body: str
    efficiency: Optional[float] = None


def _render_entry(index: int, entry: ArchiveEntry) -> str:
    score = f" (efficiency: {entry.efficiency!r})" if entry.efficiency is not None else ""
    return _ENTRY_HEADER.format(index=index, score=score) + entry.body.rstrip() + "\n"


def _diversity_section(
    entries: list[ArchiveEntry], templates: PromptTemplates
) -> str:
    parts = [templates.raw("diversity.header")]
    for i, entry in enumerate(entries, start=1):
        parts.append(_render_entry(i, entry))
    parts.append(templates.raw("diversity.instruction"))
    return "".join(parts)


def build_proposal_prompt(
    kind: str,
    ctx: TaskContext,
    archive: list[ArchiveEntry],
    schema: MorphologySchema,
    templates: PromptTemplates | None = None,
    context_budget: int = DEFAULT_CONTEXT_BUDGET,
) -> tuple[str, str]:
    """Build the coarse-stage proposal prompt for ``kind`` in
    {"morphology", "reward"}.

    With an empty archive the prompt is the base prompt alone; otherwise a
    diversity section lists all prior samples of that kind in archive order.
    Oldest entries are dropped first if the rendered prompt exceeds the
    context budget; ContextOverflow means not even the newest entry fits.
    """
    if kind not in ("morphology", "reward"):
        raise ValueError(f"unknown proposal kind {kind!r}")
    templates = templates or default_templates()
    tag = "morph_propose" if kind == "morphology" else "reward_propose"
    mapping = {
        "task_description": ctx.task_description,
        "masked_structure": mask_structure(ctx.structure_template, list(schema.param_names)),
        "environment_source": ctx.environment_source,
        "output_format": ctx.output_format,
        "reward_output_format": templates.raw("reward_output_format"),
    }

    def render(entries: list[ArchiveEntry]) -> str:
        section = _diversity_section(entries, templates) if entries else ""
        return templates.get(f"{tag}.user").substitute(mapping, diversity_section=section)

    keep = list(archive)
    user = render(keep)
    while keep and len(user) > context_budget:
        keep = keep[1:]
        user = render(keep)
    if archive and not keep:
        raise ContextOverflow("no archive entry fits in the context budget")
    system = templates.get(f"{tag}.system").substitute(mapping, diversity_section="")
    return system, user


def build_refine_prompt(
    kind: str,
    current_morphology: str,
    current_reward: str,
    current_efficiency: float,
    ranked: list[ArchiveEntry],
    ctx: TaskContext,
    templates: PromptTemplates | None = None,
    context_budget: int = DEFAULT_CONTEXT_BUDGET,
) -> tuple[str, str]:
    """Build the fine-stage refinement prompt for ``kind``.

    ``ranked`` must be non-empty and sorted by efficiency descending; the
    lowest-ranked entries are dropped first on overflow.
    """
    if kind not in ("morphology", "reward"):
        raise ValueError(f"unknown refine kind {kind!r}")
    if not ranked:
        raise ValueError("ranked context must be non-empty")
    templates = templates or default_templates()
    tag = "morph_refine" if kind == "morphology" else "reward_refine"
    current_section = (
        "Body parameters:\n"
        + current_morphology.rstrip()
        + "\nTraining objective:\n"
        + current_reward.rstrip()
        + f"\nCurrent best efficiency: {current_efficiency!r}\n"
    )
    mapping = {
        "task_description": ctx.task_description,
        "current_section": current_section,
        "output_format": ctx.output_format,
        "reward_output_format": templates.raw("reward_output_format"),
    }

    def render(entries: list[ArchiveEntry]) -> str:
        section = "".join(_render_entry(i, e) for i, e in enumerate(entries, start=1))
        return templates.get(f"{tag}.user").substitute(mapping, ranked_section=section)

    keep = list(ranked)
    user = render(keep)
    while len(keep) > 1 and len(user) > context_budget:
        keep = keep[:-1]
        user = render(keep)
    if len(user) > context_budget and len(keep) == 1:
        raise ContextOverflow("no ranked entry fits in the context budget")
    system = templates.get(f"{tag}.system").substitute(mapping, ranked_section="")
    return system, user
