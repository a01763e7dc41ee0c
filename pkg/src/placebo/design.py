"""Model design specifications and design-matrix construction.

A design is a sum of terms; each term is a product of factors drawn from the
sample indicator ``S``, the treatment ``A`` and named covariates. The text form
is ``"1 + X1 + X2:X3 + S + A + S:A"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from placebo.data import MISSING_COLUMN, DataError, Dataset

LINKS = ("identity", "logit")
_FACTOR = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class Term:
    factors: tuple[str, ...]

    @property
    def key(self) -> frozenset:
        return frozenset(self.factors)

    def __str__(self) -> str:
        return ":".join(self.factors) if self.factors else "1"

    def has(self, factor: str) -> bool:
        return factor in self.factors

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(f for f in self.factors if f not in ("S", "A"))


@dataclass(frozen=True)
class DesignSpec:
    terms: tuple[Term, ...]
    link: str = "identity"

    def __post_init__(self):
        if self.link not in LINKS:
            raise DesignError(f"unknown link {self.link!r}")
        if not self.terms:
            raise DesignError("design needs at least one term")
        seen = set()
        for t in self.terms:
            if len(set(t.factors)) != len(t.factors):
                raise DesignError(f"term {t} repeats a factor")
            if t.key in seen:
                raise DesignError(f"duplicate term {t}")
            seen.add(t.key)

    @classmethod
    def parse(cls, text: str, link: str = "identity") -> "DesignSpec":
        terms = []
        for chunk in text.split("+"):
            chunk = chunk.strip()
            if not chunk:
                raise DesignError(f"empty term in {text!r}")
            if chunk == "1":
                terms.append(Term(()))
                continue
            factors = tuple(f.strip() for f in chunk.split(":"))
            for f in factors:
                if not _FACTOR.match(f):
                    raise DesignError(f"bad factor {f!r} in {text!r}")
            terms.append(Term(factors))
        return cls(tuple(terms), link)

    @classmethod
    def from_terms(cls, terms, link: str = "identity") -> "DesignSpec":
        return cls(tuple(Term(tuple(t)) for t in terms), link)

    def __str__(self) -> str:
        return self.text

    @cached_property
    def text(self) -> str:
        return " + ".join(str(t) for t in self.terms)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(str(t) for t in self.terms)

    def uses(self, factor: str) -> bool:
        return any(t.has(factor) for t in self.terms)

    def index(self, *factors: str) -> int:
        key = frozenset(factors)
        for j, t in enumerate(self.terms):
            if t.key == key:
                return j
        raise KeyError(":".join(factors) or "1")

    def without(self, *covariates: str) -> "DesignSpec":
        """Drop every term whose factors include all of ``covariates``."""
        kept = tuple(t for t in self.terms if not set(covariates) <= set(t.factors))
        return DesignSpec(kept, self.link)

    def check_role(self, role: str) -> None:
        """Enforce factor restrictions: ``pi_s`` may not use S or A, ``pi_a`` may not use A."""
        if role == "pi_s" and (self.uses("S") or self.uses("A")):
            raise DesignError(f"P(S=1|X) design may not reference S or A: {self}")
        if role == "pi_a" and self.uses("A"):
            raise DesignError(f"P(A=1|X,S) design may not reference A: {self}")
        if role in ("pi_s", "pi_a") and self.link != "logit":
            raise DesignError("propensity designs use the logit link")
        if role == "mu" and self.link != "identity":
            raise DesignError("outcome designs use the identity link")


def build_matrix(spec: DesignSpec, x: np.ndarray, names, s, a) -> np.ndarray:
    """Evaluate ``spec`` on covariate matrix ``x``; ``s`` and ``a`` are arrays or scalars."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    names = list(names)
    out = np.empty((n, len(spec.terms)))
    for j, term in enumerate(spec.terms):
        col = np.ones(n)
        for f in term.factors:
            if f == "S":
                col = col * s
            elif f == "A":
                col = col * a
            else:
                try:
                    col = col * x[:, names.index(f)]
                except ValueError:
                    raise DataError(MISSING_COLUMN, f"design term {term} names unknown covariate {f!r}",
                                    column=f) from None
        out[:, j] = col
    return out


def design_matrix(spec: DesignSpec, d: Dataset, s: int | None = None, a: int | None = None) -> np.ndarray:
    """Design matrix for ``d`` with S and/or A optionally overridden by a constant.

    Results are cached on the dataset; the returned array is read-only.
    """
    key = ("design", str(spec), s, a)
    cached = d._cache.get(key)
    if cached is not None:
        return cached
    mat = build_matrix(spec, d.x, d.covariate_names,
                       d.s if s is None else float(s), d.a if a is None else float(a))
    mat = np.ascontiguousarray(mat)
    mat.setflags(write=False)
    d._cache[key] = mat
    return mat
