import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pmae.config import ConfigError, preset, visible_count
from pmae.masking import (
    IntegrityError,
    RestoreInfo,
    assemble_for_decoder,
    assemble_tokens,
    extract_restore,
    extract_restore_batch,
    make_mask_plan,
    make_mask_plans,
    masked_patch_mask,
    reconstruct,
    reconstruct_batch,
    reconstruction_mse,
)
from pmae.tokens import MaskPlan, stack_visible

from conftest import random_images


@pytest.mark.parametrize(
    "n,ratio,v",
    [(64, 0.75, 16), (16, 0.75, 4), (196, 0.75, 49), (4, 0.5, 2), (10, 0.75, 2), (1, 0.0, 1), (7, 0.5, 4)],
)
def test_visible_count(n, ratio, v):
    assert visible_count(n, ratio) == v


def test_mask_plan_leaving_nothing_visible():
    with pytest.raises(ConfigError):
        make_mask_plan(2, 0.9, np.random.default_rng(0))


def test_mask_plan_partition(tiny):
    plan = make_mask_plan(64, 0.75, np.random.default_rng(0))
    assert len(plan.visible) == 16 and len(plan.masked) == 48
    assert sorted(np.concatenate([plan.visible, plan.masked]).tolist()) == list(range(64))
    assert np.array_equal(plan.permutation[plan.restore_ids], np.arange(64))


def test_mask_plan_rejects_non_permutation():
    with pytest.raises(ValueError):
        MaskPlan(np.array([0, 0, 1]), 1)
    with pytest.raises(ValueError):
        MaskPlan(np.array([0, 1]), 0)
    with pytest.raises(ValueError):
        stack_visible([MaskPlan(np.arange(4), 1), MaskPlan(np.arange(4), 2)])


@pytest.mark.parametrize("n", range(1, 9))
def test_gather_scatter_exhaustive(n):
    """Every permutation of N patches and (for N <= 6) every visible count."""
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    counts = range(1, n + 1) if n <= 6 else [visible_count(n, 0.75) or 1, n // 2 or 1]
    tokens = torch.arange(1, n + 1, dtype=torch.float64).reshape(1, n, 1).expand(len(perms), n, 1)
    mask = torch.tensor([-1.0], dtype=torch.float64)
    for v in counts:
        keep = torch.from_numpy(perms[:, :v])
        visible = torch.gather(tokens, 1, keep.unsqueeze(-1))
        restore = torch.from_numpy(np.argsort(perms, axis=1, kind="stable"))
        seq = assemble_tokens(visible, restore, mask).tokens[..., 0]
        expect = torch.full((len(perms), n), -1.0, dtype=torch.float64)
        rows = torch.arange(len(perms)).unsqueeze(1).expand(-1, v)
        expect[rows, keep] = tokens[rows, keep, 0]
        assert torch.equal(seq, expect)
        # the visible tokens come back exactly where the encoder took them from
        assert torch.equal(torch.gather(seq, 1, keep), visible[..., 0])


def test_assemble_width_check():
    with pytest.raises(ConfigError):
        assemble_tokens(torch.zeros(1, 1, 3), torch.tensor([[0, 1]]), torch.zeros(4))


def test_restore_round_trip_through_codec(tiny_backbone, tiny):
    x = random_images(tiny, 3)
    plans = make_mask_plans(3, tiny.num_patches, tiny.mask_ratio, np.random.default_rng(0))
    recs = extract_restore_batch(x, [0, 1, 2], tiny_backbone.encoder, plans)
    assert [r.label for r in recs] == [0, 1, 2]
    assert all(r.visible_tokens.shape == (tiny.visible_count, tiny.embed_dim) for r in recs)
    assert all(r.config_hash == tiny.config_hash() for r in recs)
    direct = tiny_backbone.encoder(x, mask_plan=plans).tokens.numpy()
    assert np.array_equal(np.stack([r.visible_tokens for r in recs]), direct)
    single = extract_restore(x[1], 1, tiny_backbone.encoder, plans[1])
    assert single == recs[1]
    pixels, labels = reconstruct_batch(recs, None, tiny_backbone.decoder)
    assert pixels.shape == (3, tiny.channels, tiny.image_side, tiny.image_side)
    assert labels.tolist() == [0, 1, 2]
    one = reconstruct(recs[2], None, tiny_backbone.decoder)
    assert torch.allclose(one.pixels, pixels[2], atol=1e-6)


def test_assembled_slots_hold_projected_visible_tokens(tiny_backbone, tiny):
    x = random_images(tiny, 1)
    plan = make_mask_plan(tiny.num_patches, tiny.mask_ratio, np.random.default_rng(5))
    r = extract_restore(x, 0, tiny_backbone.encoder, plan)
    dec = tiny_backbone.decoder
    seq = assemble_for_decoder(r, dec.mask_token, dec.embed).tokens[0]
    proj = dec.embed(torch.from_numpy(r.visible_tokens))
    for j, pos in enumerate(plan.visible):
        assert torch.equal(seq[pos], proj[j])
    for pos in plan.masked:
        assert torch.equal(seq[pos], dec.mask_token)


def test_corrupt_restore_ids_rejected(tiny_backbone, tiny):
    x = random_images(tiny, 1)
    plan = make_mask_plan(tiny.num_patches, tiny.mask_ratio, np.random.default_rng(0))
    r = extract_restore(x, 0, tiny_backbone.encoder, plan)
    bad = RestoreInfo(r.visible_tokens, np.zeros_like(r.restore_ids), 0, r.config_hash)
    with pytest.raises(IntegrityError):
        reconstruct(bad, None, tiny_backbone.decoder)
    foreign = RestoreInfo(r.visible_tokens, r.restore_ids, 0, b"\x01" * 8)
    with pytest.raises(IntegrityError):
        reconstruct(foreign, None, tiny_backbone.decoder)


def _mse_oracle(x_hat, x, plans, config, masked_only):
    """Plain loops over images, patches and pixels."""
    p, c, g = config.patch_side, config.channels, config.grid
    out = []
    for b in range(x.shape[0]):
        total, count = 0.0, 0
        hidden = set(plans[b].masked.tolist()) if masked_only else None
        for i in range(g):
            for j in range(g):
                if hidden is not None and (i * g + j) not in hidden:
                    continue
                for ch in range(c):
                    for u in range(p):
                        for v in range(p):
                            d = float(x_hat[b, ch, i * p + u, j * p + v]) - float(x[b, ch, i * p + u, j * p + v])
                            total += d * d
                            count += 1
        out.append(total / count)
    return np.array(out)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), masked_only=st.booleans())
def test_mse_matches_oracle(seed, masked_only):
    tiny = preset("tiny")
    x = random_images(tiny, 3, seed=seed)
    x_hat = random_images(tiny, 3, seed=seed + 1)
    plans = make_mask_plans(3, tiny.num_patches, tiny.mask_ratio, np.random.default_rng(seed))
    kind = "masked_only" if masked_only else "all"
    got = reconstruction_mse(x_hat, x, tiny, kind, masked_patch_mask(plans) if masked_only else None)
    ref = _mse_oracle(x_hat.numpy(), x.numpy(), plans, tiny, masked_only)
    assert np.max(np.abs(got.numpy() - ref)) <= 1e-6


def test_mse_options(tiny):
    x = random_images(tiny, 2)
    with pytest.raises(ValueError):
        reconstruction_mse(x, x, tiny, "masked_only")
    with pytest.raises(ConfigError):
        reconstruction_mse(x, x, tiny, "some")
    assert torch.equal(reconstruction_mse(x, x, tiny), torch.zeros(2))


def test_masked_patch_mask():
    plans = [MaskPlan(np.array([2, 0, 1, 3]), 1)]
    assert masked_patch_mask(plans).tolist() == [[True, True, False, True]]
