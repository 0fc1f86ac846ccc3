import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crownlabel.labelset import InstanceMask  # noqa: E402
from crownlabel.raster import Geotransform, Raster  # noqa: E402


def raster(values, cell=0.5, origin=(1000.0, 2000.0), nodata=-9999.0) -> Raster:
    v = np.asarray(values, dtype=float)
    if v.ndim == 2:
        v = v[None]
    return Raster(v, Geotransform(origin[0], origin[1], cell), nodata=nodata)


def box_mask(x, y, w, h, id, shape=None, **kw) -> InstanceMask:
    return InstanceMask.from_array(np.ones((h, w), dtype=bool), id, (x, y), **kw)


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    """The bundled synthetic scene, written once per session."""
    from crownlabel.synth import make_scene
    d = tmp_path_factory.mktemp("scene")
    make_scene(d)
    return d


@pytest.fixture(scope="session")
def run_all_dir(scene_dir, tmp_path_factory):
    from crownlabel.pipeline import run_all
    out = tmp_path_factory.mktemp("runs") / "a"
    run_all(scene_dir / "pipeline.json", out)
    return out


_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records the PASS/FAIL line for the test's criterion and asserts ``ok``.

    A test that errors before reaching its verdict is recorded as FAIL.
    """
    n, title = request.node.get_closest_marker("criterion").args
    lines = request.config.stash.setdefault(_VERDICTS, {})

    def record(ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        lines[n] = line
        assert ok, line

    yield record
    lines.setdefault(n, f"FAIL criterion {n:>2}: {title} (error before verdict)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
