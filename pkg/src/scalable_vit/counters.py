"""Per-invocation MAC counters.

Kernels call :func:`record` unconditionally; it is a no-op unless a
:func:`counting` context is active in the current thread/context.  Counts are
keyed by the module path set with :func:`scope` and by an operation tag set
with :func:`tag` (``"proj"`` by default, ``"attn"`` for the similarity and
aggregation products, ``"lim"`` for local-interaction convolutions).
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict
from dataclasses import dataclass, field

_counter: contextvars.ContextVar["MacCounter | None"] = contextvars.ContextVar("mac_counter", default=None)
_path: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar("mac_path", default=())
_tag: contextvars.ContextVar[str] = contextvars.ContextVar("mac_tag", default="proj")


@dataclass
class MacCounter:
    macs: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    tagged: dict[tuple[str, str], int] = field(default_factory=lambda: defaultdict(int))
    aux: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def by_tag(self, tag: str) -> int:
        return sum(v for (_, t), v in self.tagged.items() if t == tag)


def current_path() -> str:
    return ".".join(_path.get())


def record(macs: int) -> None:
    c = _counter.get()
    if c is None:
        return
    p = current_path()
    c.macs[p] += int(macs)
    c.tagged[(p, _tag.get())] += int(macs)


def record_aux(ops: int) -> None:
    """Elementwise work (softmax, norms, activations); kept out of MAC totals."""
    c = _counter.get()
    if c is not None:
        c.aux[current_path()] += int(ops)


@contextlib.contextmanager
def counting():
    c = MacCounter()
    token = _counter.set(c)
    try:
        yield c
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def scope(*names: str):
    token = _path.set(_path.get() + tuple(n for n in names if n))
    try:
        yield
    finally:
        _path.reset(token)


@contextlib.contextmanager
def root_scope(path: str):
    """Replace (rather than extend) the current path."""
    token = _path.set(tuple(path.split(".")) if path else ())
    try:
        yield
    finally:
        _path.reset(token)


@contextlib.contextmanager
def tag(name: str):
    token = _tag.set(name)
    try:
        yield
    finally:
        _tag.reset(token)
