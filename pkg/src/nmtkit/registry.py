"""Name registries for problems, models and hparams sets."""
from __future__ import annotations

from typing import Any, Callable


class RegistryError(KeyError):
    pass


class Registry:
    def __init__(self, kind: str):
        self.kind = kind
        self._items: dict[str, Any] = {}

    def register(self, name: str | None = None) -> Callable:
        def deco(obj):
            key = name or getattr(obj, "name", None) or obj.__name__
            if key in self._items and self._items[key] is not obj:
                raise RegistryError(f"{self.kind} {key!r} already registered")
            self._items[key] = obj
            return obj
        return deco

    def add(self, name: str, obj: Any) -> None:
        self.register(name)(obj)

    def get(self, name: str) -> Any:
        try:
            return self._items[name]
        except KeyError:
            raise RegistryError(
                f"unknown {self.kind} {name!r}; known: {', '.join(self.names()) or '(none)'}"
            ) from None

    def names(self) -> list[str]:
        return sorted(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._items


_KINDS: dict[str, Registry] = {}


def registry(kind: str, *, create: bool = False) -> Registry:
    if kind not in _KINDS:
        if not create:
            raise RegistryError(f"unknown registry kind {kind!r}; known: {', '.join(sorted(_KINDS))}")
        _KINDS[kind] = Registry(kind)
    return _KINDS[kind]


def list_registry(kind: str) -> list[str]:
    return registry(kind).names()


problems = registry("problems", create=True)
models = registry("models", create=True)
# hparams sets live in nmtkit.hparams (versioned, so not a plain Registry)
