import pytest
import torch

from tempera.phantom import generate_dataset
from tempera.pipeline import preprocess_case, training_cases
from tempera.roi import RoiConfig

torch.set_num_threads(1)

# coarse working grid used wherever a test needs many phantoms through the network
SMALL_ROI = RoiConfig(inplane_spacing=2.0, radius_range=(5, 37), sa_extent=(64, 64, 10), la_extent=(64, 64, 1))


def phantom_inputs(case):
    images = {f"{v}_{p}": getattr(case.phase(p), v) for v in ("sa", "la") for p in ("ed", "es")}
    masks = {f"{v}_{p}": getattr(case.phase(p), f"{v}_mask") for v in ("sa", "la") for p in ("ed", "es")}
    return images, masks


@pytest.fixture(scope="session")
def phantom_training_set():
    """20 preprocessed phantoms (ED only) with their exact SA->LA transforms."""
    items = []
    for i, case in enumerate(generate_dataset(20, seed=7)):
        views = preprocess_case(f"case_{i:03d}", *phantom_inputs(case), SMALL_ROI)
        items += training_cases(views, case.ed.transform, phases=("ed",))
    return items


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(name, passed, detail)``."""

    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
