"""Round-trip dataclasses through plain dicts (tuples restored by field type)."""

from __future__ import annotations

import dataclasses
import typing


class UnknownKeyError(Exception):
    pass


def dataclass_to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def dataclass_from_dict(cls, data: dict):
    """Build cls from a dict, coercing sequences to tuples where the field
    type asks for one. Unknown keys are hard errors."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise UnknownKeyError(f"{cls.__name__}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        if typing.get_origin(hints.get(name)) is tuple and isinstance(value, (list, tuple)):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)
