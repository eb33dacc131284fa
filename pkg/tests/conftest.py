import pytest

from opend import bench, scene


@pytest.fixture(scope="session")
def full_dataset():
    """The default benchmark dataset (Table-III-sized quotas)."""
    return bench.build_dataset(0)


@pytest.fixture(scope="session")
def mini_dataset():
    quota = bench.DatasetQuota(cabinets_train=4, cabinets_test=3, drawers_train=5,
                               drawers_test=4, doors_train=4, doors_test=3)
    return bench.build_dataset(11, quota)


@pytest.fixture()
def drawer_cabinet():
    return scene.generate_cabinet(1, scene.GenerationConstraints.single(scene.DRAWER))


@pytest.fixture()
def door_cabinet():
    return scene.generate_cabinet(1, scene.GenerationConstraints.single(scene.DOOR))
