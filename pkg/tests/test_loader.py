import logging
import types

import pytest

from pynoiselayout.backbone import Denoiser
from pynoiselayout.backbones.simulator import SimulatedDenoiser
from pynoiselayout.loader import find_backbones, load_backbone, load_module_from_path

logger = logging.getLogger()

CUSTOM = '''
from pynoiselayout.backbone import Denoiser


class TinyDenoiser(Denoiser):
    _name = 'tiny'
'''


@pytest.fixture
def plugin_package(tmp_path):
    (tmp_path / 'tiny.py').write_text(CUSTOM)
    (tmp_path / 'broken.py').write_text('raise RuntimeError("boom")\n')
    package = types.ModuleType('plugin_backbones')
    package.__path__ = [str(tmp_path)]
    return package


def test_find_builtin_backbones():
    found = find_backbones()
    assert found['simulator'] is SimulatedDenoiser
    for name, subcls in found.items():
        assert issubclass(subcls, Denoiser)
        assert subcls._name == name


def test_load_backbone():
    assert load_backbone('simulator') is SimulatedDenoiser
    with pytest.raises(ModuleNotFoundError):
        load_backbone('unet')


def test_load_plugin_package(plugin_package):
    found = find_backbones(plugin_package)
    assert list(found) == ['tiny']
    subcls = load_backbone('tiny', module=plugin_package)
    assert subcls.__name__ == 'TinyDenoiser'
    assert issubclass(subcls, Denoiser)


def test_module_cache(plugin_package, tmp_path):
    a = load_module_from_path(tmp_path / 'tiny.py', 'plugin_backbones')
    b = load_module_from_path(tmp_path / 'tiny.py', 'plugin_backbones')
    assert a is b
