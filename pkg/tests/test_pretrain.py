import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mcswinu.errors import ValidationError
from mcswinu.model import ModelConfig, init_model, save_checkpoint
from mcswinu.pretrain import (
    PretrainConfig, PretrainHeads, cutout_mask, info_nce, inpainting_loss, make_pretext_batch, pretext_losses,
    pretrain, rotate, rotation_loss,
)
from mcswinu.train import load_pretrained_encoder
from mcswinu.volumes import Volume

SMALL = ModelConfig(embed_dim=6, depths=(1, 1), num_heads=(1, 2), window_size=2, input_shape=(8, 8, 8))


def _volumes(n=3, shape=(12, 12, 12)):
    rng = np.random.default_rng(0)
    return [Volume(rng.standard_normal(shape).astype(np.float32)) for _ in range(n)]


def _cfg(**kw):
    base = dict(iterations=4, batch_size=2, sub_shape=(8, 8, 8), warmup=1, projection_dim=8)
    base.update(kw)
    return PretrainConfig(**base)


# ------------------------------------------------------------------ rotations and masks

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2), st.integers(0, 2 ** 31))
def test_rotations_form_a_cyclic_group(k1, k2, axis, seed):
    x = np.random.default_rng(seed).standard_normal((4, 4, 4))
    assert np.array_equal(rotate(rotate(x, k1, axis), k2, axis), rotate(x, (k1 + k2) % 4, axis))
    assert np.array_equal(rotate(x, 4, axis), x)
    assert np.array_equal(rotate(x, 0, axis), x)
    assert rotate(x, k1, axis).shape == x.shape


def test_cutout_fraction_is_near_target():
    fractions = [cutout_mask((32, 32, 32), 0.25, np.random.default_rng(s)).mean() for s in range(100)]
    assert 0.2 <= min(fractions) and max(fractions) <= 0.3


def test_pretext_batch_layout_and_determinism():
    cfg = _cfg(batch_size=3)
    a = make_pretext_batch(_volumes(), cfg, 7)
    b = make_pretext_batch(_volumes(), cfg, 7)
    for name in ("originals", "views", "targets", "rotations", "axes", "masks", "provenance"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.views.shape == (6, 8, 8, 8)
    assert a.provenance.tolist() == [0, 1, 2, 0, 1, 2]
    for i in range(6):
        expected = rotate(a.originals[a.provenance[i]], a.rotations[i], a.axes[i])
        assert np.array_equal(a.targets[i], expected)
        assert np.array_equal(a.views[i][~a.masks[i]], expected[~a.masks[i]])
        assert np.all(a.views[i][a.masks[i]] == cfg.cutout_fill)


def test_config_rejects_bad_values():
    with pytest.raises(ValidationError):
        PretrainConfig(batch_size=1)
    with pytest.raises(ValidationError):
        PretrainConfig(sub_shape=(16, 16, 32))
    with pytest.raises(ValidationError):
        PretrainConfig(cutout_fraction=0.6)


# ------------------------------------------------------------------ losses

def test_uniform_rotation_logits_give_ln4():
    assert rotation_loss(torch.zeros(5, 4), torch.tensor([0, 1, 2, 3, 1])).item() == pytest.approx(math.log(4))


def test_inpainting_loss_only_sees_the_mask():
    target = torch.randn(2, 4, 4, 4, generator=torch.Generator().manual_seed(0))
    mask = torch.zeros(2, 4, 4, 4, dtype=torch.bool)
    mask[:, :2] = True
    assert inpainting_loss(target.clone(), target, mask).item() == 0.0
    recon = target.clone()
    recon[~mask] += 100.0
    assert inpainting_loss(recon, target, mask).item() == 0.0
    recon = target.clone()
    recon[mask] += 0.5
    assert inpainting_loss(recon, target, mask).item() == pytest.approx(0.5)


def brute_info_nce(z, prov, tau):
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = len(z)
    total = 0.0
    for i in range(n):
        sims = {j: float(z[i] @ z[j]) / tau for j in range(n) if j != i}
        denom = math.log(sum(math.exp(s) for s in sims.values()))
        pos = [j for j in sims if prov[j] == prov[i]]
        total += -sum(sims[j] - denom for j in pos) / len(pos)
    return total / n


def test_info_nce_matches_brute_force():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((6, 5))
    prov = [0, 1, 2, 0, 1, 2]
    got = info_nce(torch.from_numpy(z), prov, 0.1).item()
    assert got == pytest.approx(brute_info_nce(z, prov, 0.1), rel=1e-10)


def test_info_nce_orthogonal_negatives():
    # 2 sub-volumes, 4 views: positives identical, negatives orthogonal
    z = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    got = info_nce(z, [0, 1, 0, 1], 0.1).item()
    expected = -math.log(math.exp(10.0) / (math.exp(10.0) + 2 * math.exp(0.0)))
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(brute_info_nce(z.numpy(), [0, 1, 0, 1], 0.1), rel=1e-12)


def test_info_nce_falls_as_positives_align():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((3, 8))
    noise = rng.standard_normal((3, 8))
    prov = [0, 1, 2, 0, 1, 2]
    values = []
    for scale in (2.0, 1.0, 0.5, 0.1, 0.0):
        z = np.concatenate([base, base + scale * noise])
        values.append(info_nce(torch.from_numpy(z), prov, 0.1).item())
    assert all(a > b for a, b in zip(values, values[1:]))


def test_info_nce_needs_two_sources():
    with pytest.raises(ValidationError):
        info_nce(torch.randn(2, 4), [0, 0], 0.1)


def test_pretext_losses_are_finite_and_shaped():
    cfg = _cfg()
    model = init_model(SMALL, 0)
    heads = PretrainHeads(SMALL, cfg.projection_dim)
    out = pretext_losses(make_pretext_batch(_volumes(), cfg, 0), model, heads, cfg)
    assert out["rot_logits"].shape == (4, 4)
    assert out["embeddings"].shape == (4, 8)
    assert out["reconstruction"].shape == (4, 8, 8, 8)
    assert all(torch.isfinite(out[k]) for k in ("rot", "inpaint", "contrast", "total"))
    expected = out["rot"] + out["inpaint"] + out["contrast"]
    assert out["total"].item() == pytest.approx(expected.item())


# ------------------------------------------------------------------ optimization

def test_pretrain_is_deterministic_and_learns(tmp_path):
    cfg = _cfg(iterations=40, batch_size=2, learning_rate=2e-3, warmup=5)
    a = pretrain(_volumes(), SMALL, cfg)
    b = pretrain(_volumes(), SMALL, cfg)
    assert [r["total"] for r in a.history] == [r["total"] for r in b.history]
    for (n, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y), n
    first = np.mean([r["total"] for r in a.history[:10]])
    last = np.mean([r["total"] for r in a.history[-10:]])
    assert last < first
    assert a.model.metadata["pretrained"] is True

    ckpt = tmp_path / "pre.ckpt"
    save_checkpoint(a.model, ckpt)
    target = init_model(SMALL, 3)
    load_pretrained_encoder(target, ckpt)
    enc = {k: v for k, v in a.model.state_dict().items() if k.startswith("encoder.")}
    assert enc and all(torch.equal(target.state_dict()[k], v) for k, v in enc.items())

    a.to_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "iteration,L_rot,L_inpaint,L_contrast,L_total" and len(lines) == 41


def test_pretrain_needs_two_volumes():
    with pytest.raises(ValidationError):
        pretrain(_volumes(1), SMALL, _cfg())
