import pytest
import torch

from icvt.config import ModelConfig
from icvt.geoalign import patch_boxes
from icvt.vision import Adapter, PatchBackbone, VisualEncoder, patchify, sine_pos_2d


def test_patchify_counts():
    assert patchify(torch.zeros(64, 64, 3), 32).shape == (4, 32 * 32 * 3)
    assert patchify(torch.zeros(96, 128, 3), 16).shape == (48, 16 * 16 * 3)


def test_patchify_constant_image_rows_identical():
    p = patchify(torch.full((64, 64, 3), 0.3), 32)
    assert torch.equal(p, p[:1].expand_as(p))


def test_patchify_order():
    img = torch.arange(4 * 6 * 3, dtype=torch.float32).reshape(4, 6, 3)
    p = patchify(img, 2)
    # patch 1 is row 0, columns 2..3; first entry is pixel (0, 2) channel 0
    assert p[1, 0] == img[0, 2, 0]
    # inside a patch the order is (row, col, channel)
    assert torch.equal(p[0], torch.cat([img[0, 0], img[0, 1], img[1, 0], img[1, 1]]))
    # patch 3 starts the second patch row
    assert p[3, 0] == img[2, 0, 0]


def test_patchify_batched():
    imgs = torch.rand(5, 32, 48, 3)
    p = patchify(imgs, 16)
    assert p.shape == (5, 6, 768)
    assert torch.equal(p[2], patchify(imgs[2], 16))


def test_patchify_indivisible():
    with pytest.raises(ValueError):
        patchify(torch.zeros(30, 32, 3), 16)


def test_backbone_shape():
    bb = PatchBackbone(12, 8, d_vision=32, layers=2, heads=4).eval()
    assert bb(torch.rand(3, 12, 192)).shape == (3, 12, 32)


def test_backbone_permutation_equivariance_without_pos():
    torch.manual_seed(0)
    bb = PatchBackbone(12, 8, d_vision=32, layers=2, heads=4).eval()
    with torch.no_grad():
        bb.pos.zero_()
    x = torch.rand(2, 12, 192)
    perm = torch.randperm(12)
    with torch.no_grad():
        a = bb(x)[:, perm]
        b = bb(x[:, perm])
    assert torch.allclose(a, b, atol=1e-5)


def _fd_check(fn, x, step=1e-3, rtol=1e-3):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    g = x.grad.clone()
    num = torch.zeros_like(x)
    flat = x.detach().view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + step
            up = fn(x.detach().view_as(x)).item()
            flat[i] = old - step
            dn = fn(x.detach().view_as(x)).item()
            flat[i] = old
            num.view(-1)[i] = (up - dn) / (2 * step)
    rel = (g - num).norm() / num.norm()
    assert rel <= rtol, rel


def test_backbone_gradient_matches_finite_differences():
    torch.manual_seed(1)
    bb = PatchBackbone(4, 2, d_vision=32, layers=2, heads=4).double().eval()
    w = torch.randn(4, 32, dtype=torch.float64)
    _fd_check(lambda x: (bb(x) * w).sum(), torch.rand(1, 4, 12, dtype=torch.float64))


def test_adapter_shape_and_zero():
    ad = Adapter(32, 40, layers=1, heads=4).eval()
    assert ad(torch.rand(2, 6, 32)).shape == (2, 6, 40)
    with torch.no_grad():
        ad.proj.weight.zero_()
        ad.proj.bias.zero_()
    assert torch.equal(ad(torch.zeros(2, 6, 32)), torch.zeros(2, 6, 40))


def test_adapter_gradient_matches_finite_differences():
    torch.manual_seed(2)
    ad = Adapter(32, 16, layers=2, heads=4).double().eval()
    w = torch.randn(3, 16, dtype=torch.float64)
    _fd_check(lambda x: (ad(x) * w).sum(), torch.rand(1, 3, 32, dtype=torch.float64))


def test_sine_pos_origin():
    pe = sine_pos_2d(6, 8, 32)
    q = 8  # sin block then cos block in each 16-wide half
    for half in (0, 16):
        assert torch.all(pe[0, half:half + q] == 0)
        assert torch.all(pe[0, half + q:half + 2 * q] == 1)


def test_sine_pos_injective_and_deterministic():
    pe = sine_pos_2d(6, 8, 64)
    assert torch.equal(pe, sine_pos_2d(6, 8, 64))
    d = torch.cdist(pe, pe)
    d.fill_diagonal_(1.0)
    assert d.min() > 1e-3


def test_sine_pos_similarity_decays():
    pe = sine_pos_2d(6, 8, 64).view(6, 8, 64)
    along_col = [float(pe[0, 0] @ pe[0, k]) for k in range(4)]
    along_row = [float(pe[0, 0] @ pe[k, 0]) for k in range(4)]
    for seq in (along_col, along_row):
        assert all(a > b for a, b in zip(seq, seq[1:]))


def test_sine_pos_rejects_bad_dim():
    with pytest.raises(ValueError):
        sine_pos_2d(2, 2, 30)


def test_patch_boxes_tile_unit_square():
    b = patch_boxes(8, 6, dtype=torch.float64)
    assert torch.isclose((b[:, 2] * b[:, 3]).sum(), torch.tensor(1.0, dtype=torch.float64))
    x0, x1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    y0, y1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = torch.minimum(x1[:, None], x1[None]) - torch.maximum(x0[:, None], x0[None])
    ih = torch.minimum(y1[:, None], y1[None]) - torch.maximum(y0[:, None], y0[None])
    inter = iw.clamp_min(0) * ih.clamp_min(0)
    inter.fill_diagonal_(0)
    assert inter.max() < 1e-12


def test_visual_encoder_contract():
    cfg = ModelConfig(d_vision=32, vision_layers=1, vision_heads=4)
    enc = VisualEncoder(cfg).eval()
    imgs = torch.rand(2, 128, 96, 3)
    out = enc(imgs)
    L = (128 // 16) * (96 // 16)
    assert out.content.shape == (2, L, cfg.d_model)
    assert out.pos_encoding.shape == (L, cfg.d_model)
    assert torch.allclose(out.patch_boxes[:, 2], torch.full((L,), 16 / 96))
    assert torch.allclose(out.patch_boxes[:, 3], torch.full((L,), 16 / 128))
    with torch.no_grad():
        assert torch.equal(enc(imgs).content, enc(imgs).content)
    assert VisualEncoder(ModelConfig(variant="baseline-no-pe", d_vision=32, vision_layers=1))(imgs).pos_encoding is None
