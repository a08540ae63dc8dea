import numpy as np
import pytest
import torch

from pmae.client import ClientSettings, DataError, client_loss, expected_steps, local_update
from pmae.masking import make_mask_plans

from conftest import random_images, random_params


def _data(cfg, n, classes=3, seed=0):
    return random_images(cfg, n, seed=seed), torch.arange(n) % classes


def test_empty_client_returns_none(tiny_backbone, tiny):
    w = random_params(tiny, 3)
    x, y = _data(tiny, 0)
    assert local_update(0, 0, w, x, y, tiny_backbone, ClientSettings(), 0, 0) is None


@pytest.mark.parametrize("n,u", [(10, 4), (3, 4), (1, 1), (7, 7)])
def test_restore_count_and_steps(tiny_backbone, tiny, n, u):
    w = random_params(tiny, 3)
    x, y = _data(tiny, n)
    st = ClientSettings(epochs=2, batch_size=4, restore_count=u)
    res = local_update(0, 1, w, x, y, tiny_backbone, st, seed=1, round_index=3)
    assert len(res.restore_set) == u
    assert res.steps == expected_steps(n, 4, 2)
    assert res.num_samples == n and res.client_id == 1
    assert len(res.epoch_losses) == 2
    labels = {int(v) for v in y}
    assert {r.label for r in res.restore_set} <= labels


def test_restore_records_sampled_without_replacement(tiny_backbone, tiny):
    w = random_params(tiny, 3)
    x, y = _data(tiny, 6)
    y = torch.arange(6)  # unique labels identify the source image
    w = random_params(tiny, 6)
    res = local_update(0, 0, w, x, y, tiny_backbone, ClientSettings(epochs=1, restore_count=6), 0, 0)
    assert sorted(r.label for r in res.restore_set) == list(range(6))


def test_local_update_trains_all_transmitted_fields(tiny_backbone, tiny):
    w = random_params(tiny, 3)
    x, y = _data(tiny, 8)
    res = local_update(0, 0, w, x, y, tiny_backbone, ClientSettings(epochs=1, lr=1e-2), 0, 0)
    for f in ("p_d", "weight", "bias", "p_r"):
        assert res.params.checksum(f) != w.checksum(f), f
    # the broadcast snapshot is not mutated
    assert w.checksum() == random_params(tiny, 3).checksum()


def test_ablated_recon_prompt_is_left_alone(tiny_backbone, tiny):
    w = random_params(tiny, 3)
    x, y = _data(tiny, 8)
    st = ClientSettings(epochs=1, lr=1e-2, use_recon_prompt=False)
    res = local_update(0, 0, w, x, y, tiny_backbone, st, 0, 0)
    assert res.params.checksum("p_r") == w.checksum("p_r")
    assert res.params.checksum("p_d") != w.checksum("p_d")


def test_local_update_deterministic_and_backbone_frozen(tiny_backbone, tiny):
    w = random_params(tiny, 3)
    x, y = _data(tiny, 9)
    before = tiny_backbone.checksum()
    a = local_update(1, 2, w, x, y, tiny_backbone, ClientSettings(epochs=2, batch_size=4), 5, 7)
    b = local_update(1, 2, w, x, y, tiny_backbone, ClientSettings(epochs=2, batch_size=4), 5, 7)
    assert a.params.checksum() == b.params.checksum()
    assert a.restore_set == b.restore_set
    assert tiny_backbone.checksum() == before


def test_client_loss_is_summed(tiny_backbone, tiny):
    w = random_params(tiny, 3)
    x, y = _data(tiny, 4)
    plans = make_mask_plans(4, tiny.num_patches, tiny.mask_ratio, np.random.default_rng(0))
    whole = client_loss(tiny_backbone, x, y, w, plans)
    parts = sum(client_loss(tiny_backbone, x[i : i + 1], y[i : i + 1], w, plans[i : i + 1]) for i in range(4))
    assert torch.allclose(whole, parts, atol=1e-5)


def test_client_loss_label_checks(tiny_backbone, tiny):
    w = random_params(tiny, 3)
    x, _ = _data(tiny, 2)
    plans = make_mask_plans(2, tiny.num_patches, tiny.mask_ratio, np.random.default_rng(0))
    with pytest.raises(DataError):
        client_loss(tiny_backbone, x, torch.tensor([0, 3]), w, plans)
    with pytest.raises(DataError):
        client_loss(tiny_backbone, x[:0], torch.tensor([], dtype=torch.long), w, [])
