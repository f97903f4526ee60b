import numpy as np
import pytest

from lagrangian_da.dataset import Dataset, GenerationConfig, generate
from lagrangian_da.model import SurrogateConfig

TINY_DATA = dict(grid_n=16, n_tracers=12, warmup_steps=50, n_train=60, n_val=20, n_test=40, chunk_records=32,
                 dt_obs=0.02, seed=3)


def tiny_model_config(**kw):
    base = dict(grid_n=16, latent_hw=4, n_c=2, conv_channels=(4, 8), K=2, rank=4, f_hidden=(8,), g_hidden=(16,),
                N_s=1, N_l=6, N_b=2, n_tracers=6, stage1_epochs=1, stage1_iters=2, stage1_batch=3,
                stage2_epochs=1, stage2_iters=1, stage2_batch=2, unc_hidden=(8,), unc_epochs=1, unc_iters=2,
                unc_batch=4, unc_spinup=2, seed=1)
    base.update(kw)
    return SurrogateConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Dataset:
    path = tmp_path_factory.mktemp("tiny_data")
    return generate(GenerationConfig(**TINY_DATA), path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_weights(tmp_path_factory, tiny_dataset):
    """Stem of a briefly trained tiny model saved to disk."""
    from lagrangian_da.model import LaCGKN, Trajectories, train_stage1

    model = LaCGKN(tiny_model_config())
    train_stage1(model, Trajectories.from_window(tiny_dataset.load_split("train")))
    stem = tmp_path_factory.mktemp("tiny_weights") / "lacgkn"
    model.save(stem)
    return stem
