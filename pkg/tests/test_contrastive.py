import math

import numpy as np
import pytest

from rlbioaug import autodiff as ad
from rlbioaug.contrastive import info_nce, info_nce_per_anchor, make_views, ssl_step
from rlbioaug.model import EncoderConfig, init_encoder, init_projector

from _fd import check

CFG = EncoderConfig(input_len=32, n_blocks=2, channels=(4, 8), embedding_dim=8, projection_dim=4, kernel_size=3)


def brute_info_nce(weak, strong, tau):
    """Loop-by-loop cross-entropy of each of the 2N rows against its partner."""
    rows = [np.asarray(r, float) for r in list(weak) + list(strong)]
    n = len(weak)
    unit = [r / math.sqrt(sum(v * v for v in r)) for r in rows]
    total = 0.0
    for i in range(2 * n):
        partner = i + n if i < n else i - n
        denom = 0.0
        for k in range(2 * n):
            if k != i:
                denom += math.exp(sum(a * b for a, b in zip(unit[i], unit[k])) / tau)
        pos = math.exp(sum(a * b for a, b in zip(unit[i], unit[partner])) / tau)
        total += -math.log(pos / denom)
    return total / (2 * n)


def test_uniform_similarity_gives_log_2n_minus_1():
    # all 2N rows identical: every logit equal
    for n in (2, 3, 8):
        z = np.ones((n, 3))
        assert info_nce(z, z, 0.5).item() == pytest.approx(math.log(2 * n - 1), abs=1e-12)


def test_orthonormal_n2_oracle():
    weak = np.eye(4)[:2]
    strong = np.eye(4)[2:]
    assert abs(info_nce(weak, strong, 0.5).item() - brute_info_nce(weak, strong, 0.5)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_random_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    weak, strong = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    tau = float(rng.uniform(0.1, 1.0))
    assert abs(info_nce(weak, strong, tau).item() - brute_info_nce(weak, strong, tau)) < 1e-9


def test_positive_similarity_monotone():
    strong = np.array([[1.0, 0.0], [0.0, 1.0]])
    losses = []
    for angle in (1.2, 0.8, 0.4, 0.0):
        weak = np.array([[math.cos(angle), math.sin(angle)], [0.0, 1.0]])
        losses.append(info_nce(weak, strong, 0.5).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_rotation_and_swap_invariance():
    rng = np.random.default_rng(1)
    weak, strong = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    base = info_nce(weak, strong, 0.5).item()
    assert info_nce(weak @ q, strong @ q, 0.5).item() == pytest.approx(base, abs=1e-12)
    assert info_nce(strong, weak, 0.5).item() == pytest.approx(base, abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 5))
        worst = max(worst, check(lambda w, s: info_nce(w, s, 0.5), [rng.normal(size=(n, 3)), rng.normal(size=(n, 3))]))
    assert worst <= 1e-4


def test_errors():
    with pytest.raises(ValueError, match="N >= 2"):
        info_nce(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(ValueError, match="tau"):
        info_nce(np.ones((2, 3)), np.ones((2, 3)), 0.0)
    with pytest.raises(ad.ShapeError):
        info_nce(np.ones((2, 3)), np.ones((3, 3)))


def test_per_anchor_shape():
    assert info_nce_per_anchor(np.eye(3), np.eye(3)).shape == (6,)


def _setup(seed=0, n=8):
    X = np.random.default_rng(seed).normal(size=(n, CFG.input_len))
    return X, init_encoder(CFG, seed), init_projector(CFG, seed)


def test_lr_zero_leaves_params():
    X, enc, proj = _setup()
    before = {k: v.data.copy() for k, v in {**enc, **proj}.items()}
    res = ssl_step(X, [0, 1, 2, 3, 4, 0, 1, 2], enc, proj, CFG, 0.0)
    assert np.isfinite(res.loss)
    for k, v in {**enc, **proj}.items():
        assert v.data.tobytes() == before[k].tobytes()


def test_overfits_fixed_batch():
    X, enc, proj = _setup(1)
    actions = [3] * 8
    losses = [ssl_step(X, actions, enc, proj, CFG, 0.05, seeds=[(0, i) for i in range(8)]).loss
              for _ in range(50)]
    assert losses[-1] < losses[0] - 0.1


def test_step_is_deterministic():
    out = []
    for _ in range(2):
        X, enc, proj = _setup(2)
        res = ssl_step(X, [2] * 8, enc, proj, CFG, 0.1, seeds=[(5, i) for i in range(8)])
        out.append((res.loss, res.strong_embeddings.tobytes(), b"".join(v.data.tobytes() for v in enc.values())))
    assert out[0] == out[1]


def test_momentum_needs_velocity():
    X, enc, proj = _setup()
    with pytest.raises(ValueError, match="velocity"):
        ssl_step(X, [0] * 8, enc, proj, CFG, 0.1, momentum=0.9)


def test_make_views_pairs_rows():
    X = np.random.default_rng(3).normal(size=(4, 32))
    weak, strong = make_views(X, [3, 3, 3, 3], [0, 1, 2, 3])
    np.testing.assert_array_equal(strong, X[:, ::-1])
    assert np.max(np.abs(weak - X)) < 0.2
