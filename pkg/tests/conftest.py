import pytest

from rlbioaug.pipeline import ExperimentConfig

TINY = dict(
    synth=dict(task="LocalPattern", n_subjects=6, epochs_per_subject=40, L=64, C=3),
    encoder=dict(n_blocks=2, channels=(4, 8), embedding_dim=8, projection_dim=4, kernel_size=5),
    policy=dict(history_len=4, token_dim=8, n_heads=2, ff_dim=16),
    k_neighbors=3, labeled_frac=0.3, phase1_steps=6, phase2_steps=6, batch_size=12, seed=0,
)


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig.from_dict(dict(TINY))
