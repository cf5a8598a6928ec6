import numpy as np
import pytest
from hypothesis import settings

from fewshot_sbir.episodes import GeneratorSpec, synth_generate
from fewshot_sbir.metatrain import TrainConfig, meta_train, pretrain_baseline
from fewshot_sbir.model import ModelConfig

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

SMALL = dict(n_categories=6, n_train=4, photos_per_category=12, sketches_per_photo=1, n_users=4,
             dim=8, semantic_dim=16, subspace_rank=3, finetune_photos=5, seed=3)

SMALL_MODEL = dict(input_dim=8, encoder_hidden=16, latent_dim=8, embed_dim=4, semantic_dim=16,
                   semantic_hidden=8, disc_hidden=4, style_hidden=4, style_dim=4, gru_hidden=2,
                   alpha_init=0.5)
QUICK = dict(K=3, meta_batch=2, steps_per_epoch=2, meta_epochs=2, pretrain_epochs=2,
             pretrain_lr=1e-3, outer_lr=1e-3)


@pytest.fixture(scope="session")
def small_world():
    return synth_generate(GeneratorSpec(**SMALL))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def baseline(small_world):
    data, _, split = small_world
    return pretrain_baseline(data, split, TrainConfig(**QUICK), ModelConfig(**SMALL_MODEL))


@pytest.fixture(scope="session")
def meta_checkpoint(small_world, baseline):
    data, semantic, split = small_world
    return meta_train(data, split, TrainConfig(**QUICK), baseline, semantic)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
