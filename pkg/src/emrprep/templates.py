"""Prompt templates and document inputs.

Templates are plain-text files under ``prompts/``; each ``{Name}`` token is a
binding. Template ids are derived from the path: ``prompts/cfsa/foo.txt`` is
``cfsa_foo`` and ``prompts/integration.txt`` is ``integration``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

PLACEHOLDER = re.compile(r"\{([A-Za-z][A-Za-z0-9_]*)\}")


class TemplateError(KeyError):
    """Unknown template id or incomplete binding set."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    @property
    def required_bindings(self) -> frozenset[str]:
        return frozenset(PLACEHOLDER.findall(self.body))

    def render(self, bindings: Mapping[str, str]) -> str:
        missing = sorted(self.required_bindings - set(bindings))
        if missing:
            raise TemplateError(
                f"template {self.template_id!r} is missing bindings: {', '.join(missing)}"
            )
        # single pass: bound text is never re-scanned for placeholders
        return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), self.body)


class TemplateLibrary:
    """A set of templates keyed by id. Immutable once loaded."""

    def __init__(self, templates: Mapping[str, PromptTemplate]):
        self._templates = dict(templates)

    @classmethod
    def from_directory(cls, root: str | Path) -> "TemplateLibrary":
        root = Path(root)
        found = {}
        for path in sorted(root.rglob("*.txt")):
            rel = path.relative_to(root).with_suffix("")
            template_id = "_".join(rel.parts)
            found[template_id] = PromptTemplate(template_id, _read_text(path))
        return cls(found)

    @classmethod
    def builtin(cls) -> "TemplateLibrary":
        root = resources.files("emrprep") / "prompts"
        with resources.as_file(root) as path:
            return cls.from_directory(path)

    def __contains__(self, template_id: str) -> bool:
        return template_id in self._templates

    def ids(self) -> list[str]:
        return sorted(self._templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise TemplateError(f"unknown template id {template_id!r}") from None

    def required_bindings(self, template_id: str) -> frozenset[str]:
        return self.get(template_id).required_bindings

    def render(self, template_id: str, bindings: Mapping[str, str]) -> str:
        return self.get(template_id).render(bindings)


_BUILTIN: TemplateLibrary | None = None


def builtin_library() -> TemplateLibrary:
    global _BUILTIN
    if _BUILTIN is None:
        _BUILTIN = TemplateLibrary.builtin()
    return _BUILTIN


def render(template_id: str, bindings: Mapping[str, str]) -> str:
    return builtin_library().render(template_id, bindings)


def required_bindings(template_id: str) -> frozenset[str]:
    return builtin_library().required_bindings(template_id)


@dataclass(frozen=True)
class DocumentBundle:
    """Database manual and evaluation memo handed to every linking prompt.

    Either text may be empty; that is how the no-documents ablation runs.
    """

    database_manual: str = ""
    evaluation_memo: str = ""


def _read_text(path: str | Path) -> str:
    # newline="" keeps CR bytes so normalization below is explicit
    with open(path, encoding="utf-8", newline="") as fh:
        return normalize_newlines(fh.read())


def normalize_newlines(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def load_documents(
    manual_source: str | Path | None, memo_source: str | Path | None
) -> DocumentBundle:
    """Read the manual and memo files; ``None`` means empty (ablation mode)."""
    manual = _read_text(manual_source) if manual_source is not None else ""
    memo = _read_text(memo_source) if memo_source is not None else ""
    return DocumentBundle(database_manual=manual, evaluation_memo=memo)
