"""Registry mapping backend ids to captioner / generator factories.

Swapping a desk-scale oracle run to real external models is a one-line
config change: ``backend: oracle`` -> ``backend: external-http``.
"""

from __future__ import annotations

from typing import Callable

from .captioning import Captioner, OracleCaptioner
from .generation import Generator, OracleShapeGenerator

CaptionerFactory = Callable[..., Captioner]
GeneratorFactory = Callable[..., Generator]

_CAPTIONERS: dict[str, CaptionerFactory] = {}
_GENERATORS: dict[str, GeneratorFactory] = {}


def register_captioner(backend_id: str, factory: CaptionerFactory) -> None:
    _CAPTIONERS[backend_id] = factory


def register_generator(backend_id: str, factory: GeneratorFactory) -> None:
    _GENERATORS[backend_id] = factory


def captioner_ids() -> list[str]:
    return sorted(_CAPTIONERS)


def generator_ids() -> list[str]:
    return sorted(_GENERATORS)


def make_captioner(backend_id: str, **kwargs) -> Captioner:
    if backend_id not in _CAPTIONERS:
        raise KeyError(f"unregistered captioner backend {backend_id!r}; known: {captioner_ids()}")
    return _CAPTIONERS[backend_id](**kwargs)


def make_generator(backend_id: str, **kwargs) -> Generator:
    if backend_id not in _GENERATORS:
        raise KeyError(f"unregistered generator backend {backend_id!r}; known: {generator_ids()}")
    return _GENERATORS[backend_id](**kwargs)


def _http_captioner(**kwargs):
    from .adapters import HttpCaptioner

    return HttpCaptioner(**kwargs)


def _http_generator(**kwargs):
    from .adapters import HttpGenerator

    return HttpGenerator(**kwargs)


register_captioner("oracle", lambda **kw: OracleCaptioner())
register_captioner("external-http", _http_captioner)
register_generator("oracle", lambda **kw: OracleShapeGenerator())
register_generator("external-http", _http_generator)
