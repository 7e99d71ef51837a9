import pytest
import torch

from dico.networks import (
    BackboneConfig,
    Discriminator2D,
    MultiViewWrapper,
    build_backbone,
    fuse_for_discriminator,
)
from dico.volume import ShapeError, ViewGeometry


def make_net(cfg):
    torch.manual_seed(0)
    return build_backbone(cfg)


class TestShapeContracts:
    @pytest.mark.parametrize(
        "cfg",
        [
            BackboneConfig("conv", base_channels=8, depth=3),
            BackboneConfig("conv", base_channels=4, depth=2),
            BackboneConfig("transformer", base_channels=8, depth=2, patch_size=4,
                           embed_dim=16, num_heads=2),
            BackboneConfig("transformer", base_channels=4, depth=3, patch_size=8,
                           embed_dim=32, num_heads=4),
        ],
    )
    def test_spatial_extents_preserved(self, cfg):
        net = make_net(cfg)
        x = torch.randn(1, 1, 16, 16, 16)
        out = net(x)
        assert tuple(out.shape) == (1, 2, 16, 16, 16)
        assert torch.isfinite(out).all()

    def test_conv_indivisible_extents(self, small_conv_cfg):
        net = make_net(small_conv_cfg)
        with pytest.raises(ShapeError):
            net(torch.randn(1, 1, 16, 18, 16))

    def test_transformer_indivisible_extents(self, small_transformer_cfg):
        net = make_net(small_transformer_cfg)
        with pytest.raises(ShapeError):
            net(torch.randn(1, 1, 16, 15, 16))

    def test_eval_mode_deterministic(self, small_conv_cfg):
        net = make_net(small_conv_cfg).eval()
        x = torch.randn(1, 1, 16, 16, 16)
        assert torch.equal(net(x), net(x))


def finite_difference_check(net, x, n_params=3, h=1e-3, rel_tol=1e-2):
    """Central-difference gradient spot check on randomly chosen scalars.

    Runs in float64: at fp32 the h=1e-3 difference quotient is dominated by
    rounding noise for typical gradient magnitudes here.
    """
    net = net.double()
    x = x.double()
    loss = net(x).mean()
    grads = torch.autograd.grad(loss, list(net.parameters()), allow_unused=True)
    params = list(net.parameters())
    g = torch.Generator().manual_seed(123)
    checked = 0
    order = torch.randperm(len(params), generator=g).tolist()
    for pi in order:
        if checked == n_params:
            break
        p, grad = params[pi], grads[pi]
        if grad is None:
            continue
        flat_g = grad.reshape(-1)
        idx = int(flat_g.abs().argmax())
        if abs(float(flat_g[idx])) < 1e-2:
            continue  # tiny gradients: activation kinks within +/-h dominate the quotient
        with torch.no_grad():
            flat_p = p.reshape(-1)
            orig = float(flat_p[idx])
            flat_p[idx] = orig + h
            lp = float(net(x).mean())
            flat_p[idx] = orig - h
            lm = float(net(x).mean())
            flat_p[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = float(flat_g[idx])
        assert abs(fd - an) / max(abs(an), 1e-8) < rel_tol, f"param {pi}: fd={fd}, an={an}"
        checked += 1
    assert checked == n_params


class TestGradients:
    def test_conv_gradients_nonzero_and_correct(self, small_conv_cfg):
        net = make_net(small_conv_cfg)
        x = torch.randn(1, 1, 8, 8, 8)
        loss = net(x).mean()
        grads = torch.autograd.grad(loss, list(net.parameters()), allow_unused=True)
        finite = [g for g in grads if g is not None]
        assert all(torch.isfinite(g).all() for g in finite)
        assert any(g.abs().sum() > 0 for g in finite)
        finite_difference_check(make_net(small_conv_cfg), x)

    def test_transformer_gradient_check(self, small_transformer_cfg):
        x = torch.randn(1, 1, 8, 8, 8)
        finite_difference_check(make_net(small_transformer_cfg), x)


class TestMultiViewWrapper:
    def test_dimension_chain(self, small_transformer_cfg, default_geometry):
        inner = make_net(small_transformer_cfg)
        seen = {}
        orig = inner.forward_features

        def spy(x):
            seen["shape"] = tuple(x.shape)
            return orig(x)

        inner.forward_features = spy
        wrapper = MultiViewWrapper(inner, default_geometry)
        out = wrapper(torch.randn(2, 1, 16, 16, 32))
        assert seen["shape"] == (10, 1, 8, 8, 32)  # (n1*n2*n3+1)*B stacked views
        assert tuple(out.shape) == (2, 2, 16, 16, 32)

    def test_degenerate_geometry_single_view(self, small_conv_cfg):
        wrapper = MultiViewWrapper(make_net(small_conv_cfg), ViewGeometry(1, 1, 1))
        out = wrapper(torch.randn(1, 1, 8, 8, 8))
        assert tuple(out.shape) == (1, 2, 8, 8, 8)

    def test_gradient_reaches_inner_through_each_branch(self, small_conv_cfg, default_geometry):
        wrapper = MultiViewWrapper(make_net(small_conv_cfg), default_geometry)
        x = torch.randn(1, 1, 8, 8, 8)
        views_out = {}
        inner_forward = wrapper.inner.forward_features

        def capture(v):
            out = inner_forward(v)
            views_out["tensor"] = out
            return out

        wrapper.inner.forward_features = capture
        out = wrapper(x)
        grad = torch.autograd.grad(out.mean(), views_out["tensor"], retain_graph=True)[0]
        # per-branch slab norms: global + each local must receive gradient
        for i in range(5):
            assert grad[i : i + 1].abs().sum() > 0, f"branch {i} got no gradient"

    def test_constant_inner_gives_constant_logits(self, default_geometry):
        class ConstantInner(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.config = BackboneConfig("conv", base_channels=4, depth=2)
                self.feature_channels = 4

            def forward_features(self, x):
                return torch.full((x.shape[0], 4) + x.shape[2:], 1.5)

        wrapper = MultiViewWrapper(ConstantInner(), default_geometry)
        out = wrapper.forward_features(torch.randn(1, 1, 8, 8, 4))
        flat = out.reshape(out.shape[0], out.shape[1], -1)
        assert torch.allclose(flat, flat[:, :, :1].expand_as(flat), atol=1e-5)


class TestDiscriminator:
    def test_shape_contract(self):
        d = Discriminator2D(2, 8, 3)
        assert tuple(d(torch.randn(4, 2, 96, 96)).shape) == (4, 1)

    def test_wrong_channel_count(self):
        d = Discriminator2D(2, 8, 3)
        with pytest.raises(ShapeError):
            d(torch.randn(4, 3, 32, 32))

    def test_batch_permutation(self):
        d = Discriminator2D(2, 8, 3).eval()
        x = torch.randn(4, 2, 32, 32)
        perm = torch.tensor([3, 1, 0, 2])
        assert torch.allclose(d(x)[perm], d(x[perm]), atol=1e-6)

    def test_overfits_fixed_batch(self):
        torch.manual_seed(0)
        d = Discriminator2D(2, 8, 3)
        real = torch.randn(4, 2, 32, 32) + 1.0
        fake = torch.randn(4, 2, 32, 32) - 1.0
        opt = torch.optim.Adam(d.parameters(), lr=1e-3)
        bce = torch.nn.BCEWithLogitsLoss()
        for _ in range(200):
            opt.zero_grad()
            loss = bce(d(real), torch.ones(4, 1)) + bce(d(fake), torch.zeros(4, 1))
            loss.backward()
            opt.step()
        preds = torch.cat([d(real) > 0, d(fake) <= 0])
        assert preds.all(), "discriminator failed to overfit 8 fixed images"


class TestFusion:
    def test_channel_layout(self):
        img = torch.rand(1, 1, 8, 8)
        mask = torch.rand(1, 1, 8, 8)
        fused = fuse_for_discriminator(img, mask)
        assert tuple(fused.shape) == (1, 2, 8, 8)
        assert torch.equal(fused[:, 0:1], img)
        assert torch.equal(fused[:, 1:2], mask)

    def test_zero_mask_keeps_image(self):
        img = torch.rand(2, 1, 8, 8)
        fused = fuse_for_discriminator(img, torch.zeros(2, 1, 8, 8))
        assert torch.equal(fused[:, 0:1], img)

    def test_order_sensitivity(self):
        a = torch.rand(1, 1, 4, 4)
        b = torch.rand(1, 1, 4, 4)
        assert not torch.equal(fuse_for_discriminator(a, b), fuse_for_discriminator(b, a))

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            fuse_for_discriminator(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 4, 4))
