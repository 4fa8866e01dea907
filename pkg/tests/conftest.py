from dataclasses import dataclass

import pytest

from prefdistill.numcore import make_rng
from prefdistill.pipeline import (AnnotationSpec, RewardSpec, build_and_train_reward,
                                  generate_dataset, heldout_accuracy, subsample,
                                  utility_spearman)
from prefdistill.reward import RewardTrainConfig, pair_arrays
from prefdistill.world import ItemSpec, WorldSpec, build_world


@dataclass
class Trained:
    world: object
    net: object
    heldout_accuracy: float
    spearman: float


@pytest.fixture(scope="session")
def trained():
    """Default-sized reward net on seed 0, shared by the slower tests."""
    world = build_world(WorldSpec(), make_rng(0, "world"))
    train = generate_dataset(world, ItemSpec(), AnnotationSpec(), make_rng(0, "train"))
    held = generate_dataset(world, ItemSpec(sets_per_prompt=10), AnnotationSpec(),
                            make_rng(0, "held"), start_id=10 ** 6)
    chosen = subsample(train.pairs, 2000, make_rng(0, "sub"))
    spec = RewardSpec(RewardTrainConfig(lr=1e-3, epochs=30))
    net = build_and_train_reward(world, pair_arrays(chosen, train.images), spec, 0).net
    acc = heldout_accuracy(net, world, held.pairs, held.images, 500, make_rng(0, "acc"))
    pool = {i: x for i, x in held.images.items() if held.item_prompt[i] == 0}
    rho = utility_spearman(net, world, 0, pool, 50, make_rng(0, "rho"))
    return Trained(world, net, acc, rho)


# ---------------------------------------------------------------- acceptance report

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    failed = call.excinfo is not None
    if call.when == "call" or failed:
        prev = _CRITERIA.get(n, (True, item.name))
        _CRITERIA[n] = (prev[0] and not failed, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, name = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({name})")
