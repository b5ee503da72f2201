import hashlib

import numpy as np
import pytest
import torch

from conftest import FIXTURES, analytic_gradient, central_difference, random_code, relative_error
from ganedit.core import ExtendedLatentCode, ShapeError, ValidationError
from ganedit.models import (
    ChecksumError,
    ExternalSegmenter,
    ExternalSemanticModel,
    ToyFaceEmbedder,
    ToySemanticModel,
    verify_checkpoint,
)


def test_synthesize_matches_matrix_product(stack):
    g = stack.generator
    w = random_code(stack, 0)
    expected = (g.weight.numpy() @ w.numpy().reshape(-1) + g.bias.numpy()).reshape(3, 16, 16)
    np.testing.assert_allclose(g.synthesize(w).numpy(), expected, rtol=0, atol=1e-13)


def test_mean_code_gives_average_image(stack):
    g = stack.generator
    mean = g.mean_code
    assert mean.is_vanilla()
    expected = g.weight.numpy() @ mean.numpy().reshape(-1) + g.bias.numpy()
    np.testing.assert_allclose(g.synthesize(mean).numpy().reshape(-1), expected, atol=1e-13)


def test_synthesize_is_pure(stack):
    w = random_code(stack, 1)
    assert torch.equal(stack.generator.synthesize(w), stack.generator.synthesize(w.clone()))


def test_synthesize_rejects_wrong_shape(stack):
    with pytest.raises(ShapeError):
        stack.generator.synthesize(torch.zeros(7, 16, dtype=torch.float64))


def test_generated_images_mostly_in_range(stack):
    codes = stack.generator.sample_codes(64, seed=3)
    imgs = stack.generator.synthesize(codes)
    # the linear toy generator is unbounded; prior samples should rarely leave [-1, 1]
    assert float((imgs.abs() > 1).double().mean()) < 0.01


# -- semantic model ---------------------------------------------------------


def _hand_embed(model, x):
    flat = x.reshape(-1)
    v = []
    for k in range(model.embed_dim):
        acc = float(model.bias[k])
        for i in range(flat.numel()):
            acc += float(model.projection[k, i]) * float(flat[i])
        v.append(acc)
    v = np.array(v)
    return v / np.sqrt(np.sum(v * v))


def test_embed_image_hand_computed_4x4():
    model = ToySemanticModel(seed=5, embed_dim=8, input_side=4)
    x = torch.linspace(-1, 1, 48, dtype=torch.float64).reshape(3, 4, 4)
    np.testing.assert_allclose(model.embed_image(x).numpy(), _hand_embed(model, x), atol=1e-14)


def test_zero_image_maps_to_normalised_bias():
    model = ToySemanticModel(seed=5, embed_dim=8, input_side=4)
    out = model.embed_image(torch.zeros(3, 4, 4, dtype=torch.float64)).numpy()
    bias = model.bias.numpy()
    np.testing.assert_allclose(out, bias / np.linalg.norm(bias), atol=1e-15)


def test_embeddings_are_unit_norm(stack, rng):
    imgs = torch.from_numpy(rng.uniform(-1, 1, size=(32, 3, 16, 16)))
    norms = stack.semantic.embed_image(imgs).norm(dim=-1)
    assert torch.all((norms - 1).abs() < 1e-5)
    for text in ["", "red shirt", "a b c d e"]:
        assert abs(float(stack.semantic.embed_text(text).norm()) - 1) < 1e-5


def test_cosine_scale_invariance(stack, image):
    v = stack.semantic.embed_image(image)
    u = stack.semantic.embed_text("blue blouse")
    cos = lambda a, b: float((a * b).sum() / (a.norm() * b.norm()))
    assert cos(3.7 * v, u) == pytest.approx(cos(v, u), abs=1e-15)


def test_embed_text_is_deterministic(stack):
    a = stack.semantic.embed_text("")
    assert torch.equal(a, stack.semantic.embed_text(""))
    assert torch.equal(stack.semantic.embed_text("short sleeve polo in navy"),
                       stack.semantic.embed_text("short sleeve polo in navy"))
    assert not torch.equal(a, stack.semantic.embed_text("navy"))


def test_embed_text_token_limit(stack):
    stack.semantic.embed_text(" ".join(["x"] * 76))
    with pytest.raises(ValidationError, match="76"):
        stack.semantic.embed_text(" ".join(["x"] * 77))


def test_semantic_model_resizes_larger_inputs(stack, rng):
    big = torch.from_numpy(rng.uniform(-1, 1, size=(3, 32, 32)))
    assert stack.semantic.embed_image(big).shape == (8,)


# -- parsers ----------------------------------------------------------------


def test_pose_parse_fixture_and_purity(stack, image):
    ref = np.load(FIXTURES / "toy_parsers.npz")
    np.testing.assert_array_equal(ref["image"], image.numpy())
    a = stack.pose.parse(image)
    b = stack.pose.parse(image.clone())
    assert torch.equal(a.masks, b.masks)
    assert a.masks.min() >= 0 and a.masks.max() <= 1
    np.testing.assert_allclose(a.masks.numpy(), ref["pose"], rtol=0, atol=1e-12)


def test_pose_part_subset():
    from ganedit.models import ToyPoseParser

    full = ToyPoseParser(part_count=4)
    sub = ToyPoseParser(part_count=4, part_indices=[1, 3])
    x = torch.zeros(3, 16, 16, dtype=torch.float64)
    assert sub.parse(x).part_indices == (1, 3)
    assert torch.equal(sub.parse(x).masks, full.parse(x).masks[[1, 3]])


def test_segmentation_fixture_sums_and_purity(stack, image, rng):
    ref = np.load(FIXTURES / "toy_parsers.npz")
    seg = stack.segmenter.parse(image)
    for name in ("bg", "body", "head"):
        np.testing.assert_allclose(getattr(seg, name).numpy(), ref[name], rtol=0, atol=1e-12)
    assert torch.equal(seg.head, stack.segmenter.parse(image.clone()).head)
    imgs = torch.from_numpy(rng.uniform(-1, 1, size=(10, 3, 16, 16)))
    s = stack.segmenter.parse(imgs)
    total = s.bg + s.body + s.head
    assert float((total - 1).abs().max()) < 1e-5
    assert float(s.head.min()) >= 0 and float(s.head.max()) <= 1


# -- encoder ----------------------------------------------------------------


def test_encoder_inverts_generator(stack):
    for seed in range(5):
        w = random_code(stack, seed)
        code = stack.encoder.invert(stack.generator.synthesize(w))
        assert isinstance(code, ExtendedLatentCode)
        np.testing.assert_allclose(code.numpy(), w.numpy(), atol=1e-4)


def test_encoder_purity_and_vanilla_variant(stack, image):
    a = stack.encoder.invert(image)
    assert torch.equal(a.rows, stack.encoder.invert(image.clone()).rows)
    v = stack.vanilla_encoder.invert(image)
    assert v.is_vanilla()
    row = torch.from_numpy(np.random.default_rng(0).normal(size=16))
    code = ExtendedLatentCode.broadcast(row, 6)
    back = stack.vanilla_encoder.invert(stack.generator.synthesize(code))
    np.testing.assert_allclose(back.numpy(), code.numpy(), atol=1e-4)


def test_encoder_shape_error(stack):
    with pytest.raises(ShapeError):
        stack.encoder.invert(torch.zeros(3, 8, 8, dtype=torch.float64))


# -- face embedder ----------------------------------------------------------


def test_face_embed_hand_computed_4x4():
    face = ToyFaceEmbedder(seed=2, side=4, embed_dim=8)
    x = torch.linspace(-1, 1, 48, dtype=torch.float64).reshape(3, 4, 4)
    region = x[:, :1, :].numpy()  # top quarter of a 4-row image is row 0
    v = np.array([sum(face.projection[k, i] * region.reshape(-1)[i] for i in range(12)) for k in range(8)])
    np.testing.assert_allclose(face.embed(x), v / np.linalg.norm(v), atol=1e-14)


def test_face_identical_and_blank(stack, image):
    e = stack.face.embed(image)
    assert float(np.dot(e, stack.face.embed(image.clone()))) == pytest.approx(1.0, abs=1e-12)
    assert abs(np.linalg.norm(e) - 1) < 1e-5
    assert stack.face.embed(torch.zeros(3, 16, 16, dtype=torch.float64)) is None


# -- differentiability --------------------------------------------------------


@pytest.mark.parametrize("op", ["synthesize", "embed_image", "pose", "segment"])
@pytest.mark.parametrize("seed", range(3))
def test_model_gradients_match_finite_differences(stack, op, seed):
    rng = np.random.default_rng(seed)
    if op == "synthesize":
        x = random_code(stack, seed)
        f = stack.generator.synthesize
    else:
        x = torch.from_numpy(rng.uniform(-0.8, 0.8, size=(3, 16, 16)))
        f = {
            "embed_image": stack.semantic.embed_image,
            "pose": lambda im: stack.pose.parse(im).masks,
            "segment": lambda im: torch.stack(list(vars(stack.segmenter.parse(im)).values())),
        }[op]
    probe = torch.from_numpy(rng.normal(size=tuple(f(x).shape)))
    fn = lambda z: (f(z) * probe).sum()
    assert relative_error(analytic_gradient(fn, x), central_difference(fn, x)) < 1e-4


# -- checkpoints and adapters --------------------------------------------------


def test_verify_checkpoint(tmp_path):
    path = tmp_path / "w.bin"
    path.write_bytes(b"weights")
    digest = hashlib.sha256(b"weights").hexdigest()
    assert verify_checkpoint(path, digest) == path
    with pytest.raises(ChecksumError):
        verify_checkpoint(path, "0" * 64)


def test_checkpoint_resolves_against_cache_dir(tmp_path, monkeypatch):
    (tmp_path / "g.bin").write_bytes(b"abc")
    monkeypatch.setenv("GANEDIT_MODEL_CACHE", str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    assert verify_checkpoint("g.bin", hashlib.sha256(b"abc").hexdigest()) == tmp_path / "g.bin"


def test_external_adapters_convert_at_boundary():
    seen = {}

    def image_fn(x):
        seen["image"] = x
        return x.reshape(*x.shape[:-3], -1)[..., :4] + 2.0

    sem = ExternalSemanticModel(image_fn, lambda t: np.ones(4), embed_dim=4, input_side=8, input_range=(0.0, 1.0))
    img = torch.zeros(3, 16, 16, dtype=torch.float64)
    e = sem.embed_image(img)
    assert seen["image"].shape == (3, 8, 8)
    assert torch.all(seen["image"] == 0.5)
    assert abs(float(e.norm()) - 1) < 1e-12

    seg = ExternalSegmenter(lambda x: torch.zeros(3, *x.shape[-2:], dtype=x.dtype), input_side=4)
    triple = seg.parse(img)
    assert triple.head.shape == (4, 4)
    assert torch.allclose(triple.bg + triple.body + triple.head, torch.ones(4, 4, dtype=torch.float64))
