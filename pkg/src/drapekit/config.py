"""JSON configuration documents and their shipped schemas."""

from __future__ import annotations

import json
import os
from dataclasses import fields
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ValidationError

SEED_ENV = "DRAPEKIT_SEED"


@lru_cache(maxsize=None)
def schema(name):
    """Parsed ``schemas/<name>.schema.json``."""
    text = (resources.files("drapekit") / "schemas" / f"{name}.schema.json").read_text()
    return json.loads(text)


def schema_names():
    return sorted(p.name.split(".")[0] for p in (resources.files("drapekit") / "schemas").iterdir()
                  if p.name.endswith(".schema.json"))


def validate(doc, name, where="config"):
    """Raise :class:`ValidationError` unless `doc` satisfies schema `name`."""
    v = jsonschema.Draft202012Validator(schema(name))
    errors = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"{where}: {loc}: {e.message}")
    return doc


def load(path, name):
    """Read and validate a JSON document."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: no such file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return validate(doc, name, str(path))


def build(cls, doc, **nested):
    """Dataclass `cls` from a validated dict; `nested` maps field names to
    converters for sub-documents."""
    kw = {}
    names = {f.name for f in fields(cls)}
    for k, v in (doc or {}).items():
        if k not in names:
            raise ValidationError(f"{cls.__name__} has no field {k!r}")
        kw[k] = nested[k](v) if k in nested else v
    return cls(**kw)


def resolve_seed(seed):
    """The environment variable wins over the configured seed."""
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return int(seed)
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {env!r}") from None
