import pytest

from fsad.synthetic import (generate_dataset, generate_registration_dataset)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    generate_dataset(root, seed=7)
    return root


@pytest.fixture(scope="session")
def aug_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset_augs")
    generate_dataset(root, seed=8, include_augs=True)
    return root


@pytest.fixture(scope="session")
def rotation_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset_rotation")
    generate_registration_dataset(root, seed=3, angle_degrees=10.0)
    return root
