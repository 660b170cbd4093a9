"""Utilities for loading Denoiser subclasses.
"""

import importlib.util
import inspect
import logging
import sys
from pathlib import Path
from types import ModuleType
from typing import Optional, Type

from . import backbones
from .backbone import Denoiser

__all__ = ['load_module_from_path', 'find_backbones', 'load_backbone']

_log = logging.getLogger(__name__)


# cache: {Path: loaded_module}
_module_cache: dict[Path, ModuleType] = {}


def load_module_from_path(module_path: Path,
                          package: Optional[str] = None) -> ModuleType:
    """Load a Python module directly from a file path.

    Avoid touching sys.path. A module already imported under its package
    name is reused so classes keep a single identity.

    Args:
        module_path: The `.py` file to load.
        package: Dotted package name the module belongs to, if any.
    """
    module_path = Path(module_path).resolve()
    if module_path in _module_cache:
        return _module_cache[module_path]
    module_name = (f'{package}.{module_path.stem}' if package
                   else module_path.stem)
    if module_name in sys.modules:
        module = sys.modules[module_name]
    else:
        spec = importlib.util.spec_from_file_location(module_name, module_path)
        if spec is None or spec.loader is None:
            raise ImportError(f'Cannot load module from {module_path}')
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
    _module_cache[module_path] = module
    return module


def find_backbones(pymodule: ModuleType = backbones) -> dict[str, Type[Denoiser]]:
    """Get every Denoiser subclass in a package, keyed by its `_name`."""
    found: dict[str, Type[Denoiser]] = {}
    backbones_path = Path(pymodule.__path__[0])
    for file_path in sorted(backbones_path.glob('*.py')):
        if file_path.name == '__init__.py':
            continue
        try:
            submodule = load_module_from_path(file_path, pymodule.__name__)
        except Exception as e:
            _log.exception('Failed to load module %s: %s', file_path, e)
            continue
        for _, cls in inspect.getmembers(submodule, inspect.isclass):
            if (issubclass(cls, Denoiser) and cls is not Denoiser and
                    getattr(cls, '_name', '')):
                found.setdefault(cls._name, cls)
                _log.debug('Found backbone %s in %s', cls._name, file_path.name)
    return found


def load_backbone(name: str, **kwargs) -> Type[Denoiser]:
    """Get the Denoiser subclass registered under `name`.

    Args:
        name (str): The backbone name, e.g. `simulator`.
        **module (module): The package to search, defaults to `backbones`.

    Returns:
        Subclass of Denoiser.

    Raises:
        ModuleNotFoundError if no subclass has the name.
    """
    pymodule = kwargs.get('module', backbones)
    available = find_backbones(pymodule)
    if name not in available:
        raise ModuleNotFoundError(f'No backbone named {name}'
                                  f' (available: {sorted(available)})')
    return available[name]
