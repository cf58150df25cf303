import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from modprompt.data import Image
from modprompt.prompts import (
    STATIC_KINDS,
    StaticPrompt,
    Translator,
    apply_static,
    compose,
    count_parameters,
    init_prompt,
    init_translator,
    translate,
)
from modprompt.train import gradient_check

SHAPE = (3, 96, 96)


def rand_batch(n=2, seed=0):
    return torch.rand(n, *SHAPE, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("kind", STATIC_KINDS)
def test_static_identity_at_init(kind):
    p = init_prompt(kind, 12, SHAPE, seed=3)
    x = rand_batch()
    assert torch.equal(p(x), x)
    assert torch.equal(p(x, p.placements(2, 5)), x)
    img = Image(x[0].permute(1, 2, 0).numpy(), "rgb")
    assert np.array_equal(apply_static(img, p, "train", 1).pixels, img.pixels)


def test_weight_map_v2_starts_at_affine_identity():
    p = init_prompt("weight_map_v2", 1, SHAPE)
    assert torch.equal(p.scale, torch.ones(SHAPE)) and torch.equal(p.shift, torch.zeros(SHAPE))


def test_fixed_patch_pixel_count():
    p = init_prompt("fixed", 30, SHAPE)
    with torch.no_grad():
        p.values.fill_(1.0)
    out = apply_static(Image(np.zeros((96, 96, 3), np.float32), "rgb"), p).pixels
    assert int((out == 1.0).sum()) == 30 * 30 * 3
    assert (out[:30, :30] == 1.0).all() and (out == 0.0).sum() == out.size - 30 * 30 * 3


def test_random_patch_train_vs_eval():
    p = init_prompt("random", 10, SHAPE, seed=7)
    with torch.no_grad():
        p.values.fill_(1.0)
    img = Image(np.zeros((96, 96, 3), np.float32), "rgb")
    ev = apply_static(img, p, "eval").pixels
    assert (ev[:10, :10] == 1.0).all() and ev.sum() == 300
    places = [tuple(p.placements(1, s)[0]) for s in range(20)]
    assert len(set(places)) > 1
    assert all(0 <= r <= 86 and 0 <= c <= 86 for r, c in places)
    np.testing.assert_array_equal(p.placements(4, 3), p.placements(4, 3))
    tr = apply_static(img, p, "train", 3).pixels
    r, c = p.placements(1, 3)[0]
    assert (tr[r:r + 10, c:c + 10] == 1.0).all() and tr.sum() == 300


def test_padding_frame():
    p = init_prompt("padding", 5, SHAPE)
    with torch.no_grad():
        p.values.fill_(0.5)
    out = p(torch.zeros(1, *SHAPE))[0]
    assert (out[:, :5] == 0.5).all() and (out[:, :, -5:] == 0.5).all()
    assert (out[:, 5:-5, 5:-5] == 0.0).all()


def test_prompt_errors():
    with pytest.raises(ValueError):
        init_prompt("fixed", 97, SHAPE)
    with pytest.raises(ValueError):
        init_prompt("mosaic", 4, SHAPE)
    with pytest.raises(ValueError):
        init_translator("VGG")
    with pytest.raises(ValueError):
        apply_static(Image(np.zeros((96, 96, 3), np.float32), "rgb"), init_prompt("fixed", 4, SHAPE), "test")


def test_compose_examples():
    x = rand_batch(1)
    assert torch.equal(compose(x, torch.zeros_like(x)), x)
    assert (compose(x, torch.full_like(x, 10.0)) == 1.0).all()
    img = torch.full((1, 3, 8, 8), 0.5)
    sign = torch.tensor([[(-1.0) ** (i + j) for j in range(8)] for i in range(8)])
    out = compose(img, 0.25 * sign.expand_as(img))
    expected = torch.where(sign > 0, torch.tensor(0.75), torch.tensor(0.25))
    assert torch.equal(out, expected.expand_as(img))
    with pytest.raises(ValueError):
        compose(x, torch.zeros(1, 3, 8, 8))


def test_clamp_gradient_rule():
    v = torch.tensor([-0.5, 0.5, 1.5, -0.5, 1.5], requires_grad=True)
    out = compose(v, torch.zeros(5))
    # upstream gradients: positive on 0 and 2, negative on 3 and 4
    out.backward(torch.tensor([1.0, 1.0, 1.0, -1.0, -1.0]))
    # descent moves x by -grad: index 0 (below range, pushed further down) and 4 (above, pushed up) are blocked
    assert v.grad.tolist() == [0.0, 1.0, 1.0, -1.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(STATIC_KINDS), st.floats(0.1, 5.0))
def test_range_safety(seed, kind, scale):
    p = init_prompt(kind, 12, SHAPE, seed=seed)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for prm in p.parameters():
            prm.add_(scale * torch.randn(prm.shape, generator=g))
    out = p(rand_batch(2, seed), p.placements(2, seed))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_translator_zero_at_init_and_shapes():
    for variant in ("MB", "RES"):
        t = init_translator(variant, seed=1)
        a, b = rand_batch(1, 0), rand_batch(1, 1)
        ra, rb = translate(a, t), translate(b, t)
        assert ra.shape == a.shape and not ra.any() and not rb.any()
        assert translate(a[0], t).shape == a[0].shape
        odd = torch.rand(1, 3, 50, 70)
        assert translate(odd, t).shape == odd.shape


def test_translator_seeded_and_rng_neutral():
    torch.manual_seed(123)
    state = torch.random.get_rng_state()
    a = init_translator("MB", seed=4)
    assert torch.equal(torch.random.get_rng_state(), state)
    b = init_translator("MB", seed=4)
    c = init_translator("MB", seed=5)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_mb_lighter_than_res():
    mb, res = count_parameters(init_translator("MB")), count_parameters(init_translator("RES"))
    assert mb < res


def test_residual_nonzero_after_one_step_and_input_dependent():
    t = init_translator("MB", seed=0)
    x = rand_batch(2)
    target = torch.rand_like(x)
    opt = torch.optim.SGD(t.parameters(), lr=0.1)
    loss = ((compose(x, translate(x, t)) - target) ** 2).mean()
    loss.backward()
    opt.step()
    with torch.no_grad():
        r = translate(x, t)
    assert r.abs().max() > 0
    assert (r[0] - r[1]).abs().max() > 0


def test_prompt_gradient_check():
    torch.manual_seed(0)
    x = (0.2 + 0.6 * torch.rand(2, *SHAPE, dtype=torch.float64))
    w = torch.rand(2, *SHAPE, dtype=torch.float64)
    for kind in STATIC_KINDS:
        p = init_prompt(kind, 12, SHAPE).double()
        with torch.no_grad():
            for prm in p.parameters():
                prm.add_(0.05 * torch.randn_like(prm))
        fn = lambda: (w * p(x) ** 2).sum()
        assert gradient_check(fn, list(p.parameters()), n_samples=20, eps=1e-4, seed=1) < 1e-3, kind
