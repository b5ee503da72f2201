import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES, least_squares_minimum, random_code
from ganedit.core import (
    ConfigurationError,
    ExtendedLatentCode,
    InversionConfig,
    LossWeights,
    ShapeError,
    ValidationError,
)
from ganedit.inversion import (
    InversionDivergedError,
    LayerSubsets,
    PrototypeBank,
    build_prototype_bank,
    init_from_encoder,
    init_from_mean,
    inject_medium_subset,
    run_inversion,
    run_inversion_batch,
    select_prototype,
)
from ganedit.losses import Objective

QUADRATIC = LossWeights(lambda_clip=0, lambda_pose=0, lambda_reg=1, lambda_im=30, lambda_head=0)


# -- initialisation -------------------------------------------------------------


def test_encoder_init_reconstructs(stack):
    w = random_code(stack, 0)
    img = stack.generator.synthesize(w)
    code = init_from_encoder(img, stack)
    np.testing.assert_allclose(stack.generator.synthesize(code).numpy(), img.numpy(), atol=1e-4)
    assert torch.equal(code.rows, init_from_encoder(img.clone(), stack).rows)
    assert init_from_encoder(img, stack, vanilla=True).is_vanilla()


def test_mean_init(stack):
    a, b = init_from_mean(stack), init_from_mean(stack)
    assert torch.equal(a.rows, stack.generator.mean_code.rows)
    assert torch.equal(a.rows, b.rows)
    assert a.layer_count == stack.generator.layer_count


# -- subsets and injection --------------------------------------------------------


def test_reference_layer_split():
    s = LayerSubsets.for_layers(14)
    assert s.coarse == (1, 2, 3, 4) and s.medium == (5, 6, 7, 8) and s.fine == tuple(range(9, 15))


@pytest.mark.parametrize("n", range(3, 20))
def test_layer_split_partitions(n):
    s = LayerSubsets.for_layers(n)
    assert sorted(s.coarse + s.medium + s.fine) == list(range(1, n + 1))
    assert s.coarse and s.medium and s.fine


def test_bad_subsets():
    with pytest.raises(ConfigurationError):
        LayerSubsets((1, 2), (2, 3), (4,))
    with pytest.raises(ConfigurationError):
        LayerSubsets((1,), (3,), (4,))


def _codes(seed, n=14, d=5):
    rng = np.random.default_rng(seed)
    return (ExtendedLatentCode(torch.from_numpy(rng.normal(size=(n, d)))),
            ExtendedLatentCode(torch.from_numpy(rng.normal(size=(n, d)))))


def test_injection_provenance_l14():
    base, proto = _codes(0)
    s = LayerSubsets.for_layers(14)
    out = inject_medium_subset(base, proto, s).rows
    for layer in range(1, 15):
        src = proto if 5 <= layer <= 8 else base
        assert torch.equal(out[layer - 1], src.rows[layer - 1])


def test_injection_idempotent_and_reversible():
    base, proto = _codes(1)
    s = LayerSubsets.for_layers(14)
    assert torch.equal(inject_medium_subset(base, base, s).rows, base.rows)
    mixed = inject_medium_subset(base, proto, s)
    assert torch.equal(inject_medium_subset(mixed, base, s).rows, base.rows)


def test_injection_shape_mismatch():
    base, _ = _codes(2)
    with pytest.raises(ShapeError):
        inject_medium_subset(base, ExtendedLatentCode(torch.zeros(14, 4)), LayerSubsets.for_layers(14))


# -- prototype bank -----------------------------------------------------------------


def test_bank_fixture(stack):
    bank = build_prototype_bank(stack, count=3, seed=7)
    ref = np.load(FIXTURES / "bank_n3_seed7.npz")
    np.testing.assert_array_equal(bank.codes, ref["codes"])
    np.testing.assert_array_equal(bank.embeddings, ref["embeddings"])
    np.testing.assert_allclose(np.linalg.norm(bank.embeddings, axis=1), 1.0, atol=1e-5)
    for i in range(3):
        assert bank.code(i).is_vanilla()


def test_bank_defaults_and_errors(stack):
    import inspect

    assert inspect.signature(build_prototype_bank).parameters["count"].default == 100_000
    with pytest.raises(ConfigurationError):
        build_prototype_bank(stack, count=0)


def test_bank_truncation_pulls_to_mean(stack):
    full = build_prototype_bank(stack, count=50, seed=1)
    half = build_prototype_bank(stack, count=50, seed=1, truncation=0.5)
    mean = stack.generator.mean_code.numpy().astype(np.float32)
    np.testing.assert_allclose(half.codes - mean, 0.5 * (full.codes - mean), atol=1e-6)


def test_select_self_match():
    e = np.eye(3, dtype=np.float32)
    bank = PrototypeBank(np.zeros((3, 2, 2)), e)
    idx, _ = select_prototype(bank, e[1])
    assert idx == 1


def test_select_ties_lowest_index():
    e = np.array([[0, 1], [1, 0], [1, 0]], dtype=np.float32)
    idx, _ = select_prototype(PrototypeBank(np.zeros((3, 2, 2)), e), np.array([1.0, 0.0]))
    assert idx == 1


def brute_force_argmax(embeddings, text):
    best, best_i = -np.inf, -1
    tn = np.sqrt(sum(float(v) * float(v) for v in text))
    for i, row in enumerate(embeddings.astype(np.float64)):
        s = float(np.dot(row, text)) / (float(np.sqrt(np.dot(row, row))) * tn)
        if s > best:
            best, best_i = s, i
    return best_i


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_select_matches_scan_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(100, 8))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    bank = PrototypeBank(np.zeros((100, 2, 3)), emb)
    text = rng.normal(size=8)
    idx, code = select_prototype(bank, text)
    assert idx == brute_force_argmax(bank.embeddings, text)
    assert select_prototype(bank, scale * text)[0] == idx
    assert code.rows.shape == (2, 3)


def test_bank_round_trip(tmp_path, stack):
    bank = build_prototype_bank(stack, count=20, seed=3, truncation=0.7)
    path = tmp_path / "bank.pbnk"
    bank.save(path)
    raw = path.read_bytes()
    assert raw[:5] == b"PBNK1"
    back = PrototypeBank.load(path, stack)
    assert back.codes.tobytes() == bank.codes.tobytes()
    assert back.embeddings.tobytes() == bank.embeddings.tobytes()
    assert (back.seed, back.truncation) == (3, 0.7)
    back.save(tmp_path / "again.pbnk")
    assert (tmp_path / "again.pbnk").read_bytes() == raw


def test_bank_load_checks(tmp_path, stack):
    PrototypeBank(np.zeros((2, 3, 4)), np.ones((2, 8)) / np.sqrt(8)).save(tmp_path / "b.pbnk")
    with pytest.raises(ShapeError):
        PrototypeBank.load(tmp_path / "b.pbnk", stack)
    (tmp_path / "bad.pbnk").write_bytes(b"NOPE!" + bytes(48))
    with pytest.raises(ValidationError):
        PrototypeBank.load(tmp_path / "bad.pbnk")


# -- optimisation ---------------------------------------------------------------------


@pytest.mark.parametrize("init", ["encoder", "mean"])
def test_quadratic_objective_reaches_least_squares_minimum(stack, image, init):
    result = run_inversion(image, "", QUADRATIC, InversionConfig(init_strategy=init), stack)
    oracle, _ = least_squares_minimum(stack, image, 30.0, 1.0)
    final = Objective(image, None, QUADRATIC, stack)(result.optimized_code).total
    assert abs(final - oracle) < 1e-3
    assert abs(result.trajectory[-1].total - oracle) < 1e-3
    assert result.trajectory[-1].total <= result.trajectory[0].total


def test_step_count_contract(stack, image):
    with pytest.raises(ValidationError):
        InversionConfig(steps=0)
    result = run_inversion(image, "top", LossWeights(), InversionConfig(steps=1), stack)
    assert len(result.trajectory) == 1
    cfg = InversionConfig()
    assert (cfg.steps, cfg.learning_rate) == (500, 5e-2)


def test_result_fields(stack, image):
    cfg = InversionConfig(steps=7, seed=4)
    result = run_inversion(image, "navy polo", LossWeights(), cfg, stack)
    assert result.config_echo is cfg
    assert torch.equal(result.final_image, stack.generator.synthesize(result.optimized_code))
    assert torch.equal(result.init_code.rows, init_from_encoder(image, stack).rows)


def test_determinism(stack, image):
    cfg = InversionConfig(steps=25)
    a = run_inversion(image, "yellow striped bandeau", LossWeights(), cfg, stack)
    b = run_inversion(image, "yellow striped bandeau", LossWeights(), cfg, stack)
    assert torch.equal(a.optimized_code.rows, b.optimized_code.rows)
    assert torch.equal(a.final_image, b.final_image)
    assert a.trajectory == b.trajectory


def test_vanilla_mode_stays_vanilla(stack, image):
    cfg = InversionConfig(steps=30, latent_space="vanilla")
    result = run_inversion(image, "green camo camisole", LossWeights(lambda_reg=0), cfg, stack)
    assert result.optimized_code.is_vanilla()
    assert result.init_code.is_vanilla()
    assert all(bd.reg == 0.0 for bd in result.trajectory)


def test_injection_init(stack, image):
    bank = build_prototype_bank(stack, count=200, seed=0)
    cfg = InversionConfig(steps=2, init_strategy="injection")
    result = run_inversion(image, "red shirt", LossWeights(), cfg, stack, bank=bank)
    subsets = LayerSubsets.for_layers(stack.generator.layer_count)
    idx, proto = select_prototype(bank, stack.semantic.embed_text("red shirt"))
    assert result.prototype_index == idx
    expected = inject_medium_subset(init_from_encoder(image, stack), proto, subsets)
    assert torch.equal(result.init_code.rows, expected.rows)
    with pytest.raises(ConfigurationError):
        run_inversion(image, "red shirt", LossWeights(), cfg, stack)


def test_non_finite_loss_reports_step(stack, image):
    huge = LossWeights(lambda_im=1e308, lambda_clip=0, lambda_pose=0, lambda_head=0, lambda_reg=0)
    far = image.clone()
    far[0] = -far[0]
    with pytest.raises(InversionDivergedError) as err:
        run_inversion(far, "", huge, InversionConfig(steps=3, init_strategy="mean"), stack)
    assert err.value.step == 0
    assert not np.isfinite(err.value.breakdown.total)


def test_batch_matches_individual_runs(stack, image, other_image):
    cfg = InversionConfig(steps=15)
    batch = run_inversion_batch(torch.stack([image, other_image]), "wool cardigan", LossWeights(), cfg, stack)
    for img, res in zip([image, other_image], batch):
        single = run_inversion(img, "wool cardigan", LossWeights(), cfg, stack)
        np.testing.assert_allclose(res.optimized_code.numpy(), single.optimized_code.numpy(), atol=1e-10)
        assert len(res.trajectory) == 15


def test_prompt_over_limit_rejected(stack, image):
    with pytest.raises(ValidationError):
        run_inversion(image, " ".join(["word"] * 80), LossWeights(), InversionConfig(steps=1), stack)
