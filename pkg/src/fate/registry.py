"""Corpus-wide mapping between canonical feature names and dense integer IDs.

The IDs index rows of the learned feature-encoding table, so they must stay
stable across save/load and may only ever grow by appending.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping

import numpy as np


class RegistryError(ValueError):
    pass


class EmptyName(RegistryError):
    pass


class UnknownFeatureWhenFrozen(RegistryError):
    pass


class DuplicateFeature(RegistryError):
    pass


def _fold(raw_name: str) -> str:
    return raw_name.strip().upper()


def canonicalize(raw_name: str, aliases: Mapping[str, str] | None = None) -> str:
    """Trim and upper-case ``raw_name``, then resolve it through ``aliases``.

    Alias keys are compared after the same folding, so ``{"hla dr": "HLA-DR"}``
    matches ``" HLA DR"``.
    """
    name = _fold(raw_name)
    if not name:
        raise EmptyName(f"feature name {raw_name!r} is empty after trimming")
    if aliases:
        folded = {_fold(k): _fold(v) for k, v in aliases.items()}
        name = folded.get(name, name)
    return name


class FeatureRegistry:
    """Ordered list of canonical feature names; position is the feature ID."""

    def __init__(
        self,
        names: Iterable[str] = (),
        aliases: Mapping[str, str] | None = None,
        frozen: bool = False,
    ):
        self.aliases = {_fold(k): _fold(v) for k, v in (aliases or {}).items()}
        self.names: list[str] = []
        self._index: dict[str, int] = {}
        self.frozen = False
        for name in names:
            canon = canonicalize(name, self.aliases)
            if canon in self._index:
                raise DuplicateFeature(f"feature {canon!r} listed twice")
            self._index[canon] = len(self.names)
            self.names.append(canon)
        self.frozen = frozen

    @property
    def M(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return canonicalize(name, self.aliases) in self._index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureRegistry):
            return NotImplemented
        return (
            self.names == other.names
            and self.aliases == other.aliases
            and self.frozen == other.frozen
        )

    def canonicalize(self, raw_name: str) -> str:
        return canonicalize(raw_name, self.aliases)

    def id_of(self, name: str) -> int:
        canon = self.canonicalize(name)
        try:
            return self._index[canon]
        except KeyError:
            raise UnknownFeatureWhenFrozen(
                f"feature {canon!r} is not in the registry"
            ) from None

    def register(self, names: Iterable[str]) -> np.ndarray:
        """Return the panel (array of IDs) for ``names``, in the given order.

        Unseen names get the next free ID unless the registry is frozen, in
        which case they raise :class:`UnknownFeatureWhenFrozen`.
        """
        canon = [self.canonicalize(n) for n in names]
        if len(set(canon)) != len(canon):
            dupes = sorted({c for c in canon if canon.count(c) > 1})
            raise DuplicateFeature(f"panel lists {dupes} more than once")
        if not canon:
            raise RegistryError("a panel needs at least one feature")
        unknown = [c for c in canon if c not in self._index]
        if unknown and self.frozen:
            raise UnknownFeatureWhenFrozen(
                f"features {unknown} are absent from the frozen registry"
            )
        for c in unknown:
            self._index[c] = len(self.names)
            self.names.append(c)
        return np.array([self._index[c] for c in canon], dtype=np.int64)

    def freeze(self) -> FeatureRegistry:
        self.frozen = True
        return self

    def unfreeze(self) -> FeatureRegistry:
        self.frozen = False
        return self

    def to_dict(self) -> dict:
        return {"names": list(self.names), "aliases": dict(self.aliases), "frozen": self.frozen}

    @classmethod
    def from_dict(cls, doc: Mapping) -> FeatureRegistry:
        return cls(doc["names"], doc.get("aliases"), bool(doc.get("frozen", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> FeatureRegistry:
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "open"
        return f"FeatureRegistry(M={self.M}, {state})"
