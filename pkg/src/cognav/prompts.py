"""Role prompt templates stored as text assets next to this module.

Templates use ``str.format`` syntax, with doubled braces for literal JSON.
"""

from __future__ import annotations

import hashlib
import json
import string
from functools import lru_cache
from importlib import resources

ROLES = (
    "instruction_parser",
    "subgoal_extractor",
    "attention",
    "perception",
    "imagination",
    "subgoal_judger",
    "step_memory",
    "subgoal_memory",
    "decision",
)

MANIFEST = "checksums.json"


class TemplateError(KeyError):
    pass


@lru_cache(maxsize=None)
def load_template(role: str) -> str:
    if role not in ROLES:
        raise TemplateError(f"unknown role {role!r}")
    return resources.files(__package__).joinpath("prompts", f"{role}.txt").read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def placeholders(role: str) -> tuple[str, ...]:
    names = []
    for _, field_name, _, _ in string.Formatter().parse(load_template(role)):
        if field_name is not None and field_name not in names:
            names.append(field_name)
    return tuple(names)


def assemble(role: str, **fields: str) -> str:
    """Fill a role template; every placeholder must be supplied and nothing else."""
    expected = set(placeholders(role))
    missing = expected - fields.keys()
    unknown = fields.keys() - expected
    if missing or unknown:
        raise TemplateError(
            f"{role}: missing fields {sorted(missing)}, unknown fields {sorted(unknown)}")
    return load_template(role).format(**{k: str(v) for k, v in fields.items()})


def template_checksums() -> dict[str, str]:
    return {
        role: hashlib.sha256(load_template(role).encode("utf-8")).hexdigest() for role in ROLES
    }


def manifest() -> dict[str, str]:
    text = resources.files(__package__).joinpath("prompts", MANIFEST).read_text(encoding="utf-8")
    return json.loads(text)


def verify_manifest() -> list[str]:
    """Roles whose template no longer matches the recorded checksum."""
    recorded = manifest()
    return [role for role, digest in template_checksums().items() if recorded.get(role) != digest]
