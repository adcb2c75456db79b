import numpy as np
import pytest
import torch

from fret.data import load_dataset
from fret.desk import ensure_desk_assets, ensure_desk_dataset, load_desk_model
from fret.model_adapter import split

ASSET_DIR = "assets"


@pytest.fixture(scope="session")
def desk_checkpoint():
    checkpoint, _ = ensure_desk_assets(ASSET_DIR)
    return checkpoint


@pytest.fixture(scope="session")
def desk_dataset_dir(desk_checkpoint):
    return ensure_desk_dataset(f"{ASSET_DIR}/desk10")


@pytest.fixture(scope="session")
def desk_testset(desk_dataset_dir):
    return load_dataset(desk_dataset_dir)


@pytest.fixture()
def desk_model(desk_checkpoint):
    return split(load_desk_model(desk_checkpoint), "head")


def finite_diff_grad(fn, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of a scalar function, in double precision."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = float(fn(x))
            flat[i] = orig - h
            f_minus = float(fn(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def max_rel_error(analytic: torch.Tensor, reference: torch.Tensor) -> float:
    scale = float(reference.abs().max())
    return float((analytic - reference).abs().max()) / max(scale, 1e-12)


def stream_accuracy(records) -> float:
    return records[-1].cumulative_accuracy


def as_batch_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images.transpose(0, 3, 1, 2)).contiguous()
