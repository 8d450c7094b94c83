"""Default prompt templates for the actor, critic and annotator roles.

Templates are plain text files with ``{name}`` placeholders.  Substitution is
literal, so templates may contain other braces (JSON examples and the like).
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

TEMPLATE_NAMES = ("actor", "refine", "critic", "annotator")


@dataclass(frozen=True)
class PromptTemplates:
    actor: str
    refine: str
    critic: str
    annotator: str


def render(template: str, **values: str) -> str:
    out = template
    for name, value in values.items():
        out = out.replace("{" + name + "}", value)
    return out


def load_templates(directory: str | Path | None = None) -> PromptTemplates:
    """Load templates from ``directory``; files missing there fall back to the
    packaged defaults."""
    texts = {}
    packaged = resources.files("stepcritic.gateway") / "templates"
    for name in TEMPLATE_NAMES:
        candidate = Path(directory) / f"{name}.txt" if directory else None
        if candidate is not None and candidate.exists():
            texts[name] = candidate.read_text(encoding="utf-8")
        else:
            texts[name] = (packaged / f"{name}.txt").read_text(encoding="utf-8")
    return PromptTemplates(**texts)
