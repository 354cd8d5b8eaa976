"""Discriminator heads: shape contracts, projection arithmetic, zero-difference
text independence, and spectral constraints."""

import numpy as np
import pytest

from instructpaint import autodiff as ad
from instructpaint.autodiff import Tensor
from instructpaint.discriminator import Discriminator, GlobalHead, UNetEncoder
from instructpaint.nn import converge_spectral_states


def rng_(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="module")
def disc():
    return Discriminator(rng_(1), base=8, emb_dim=8, dtype=np.float64).eval()


class TestEncoder:
    def test_three_scales_deepest_four(self):
        enc = UNetEncoder(rng_(2), 8)
        pyr = enc(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))
        assert [p.shape[-1] for p in pyr] == [16, 8, 4]

    def test_purity(self, disc):
        x = Tensor(rng_(3).standard_normal((1, 3, 16, 16)))
        a = disc.encoder(x)
        b = disc.encoder(x)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.data, pb.data)

    def test_wrong_channels_rejected(self, disc):
        with pytest.raises(ad.ShapeError):
            disc.encoder(Tensor(np.zeros((1, 4, 16, 16))))


class TestLocalHead:
    def test_output_matches_input_spatial_shape(self, disc):
        x = Tensor(rng_(4).standard_normal((2, 3, 16, 16)))
        out = disc(x, x.data.copy(), Tensor(np.zeros((2, 8))))
        assert out.d_local.shape == (2, 1, 16, 16)

    def test_shape_holds_for_other_sizes(self):
        d = Discriminator(rng_(5), base=8, emb_dim=8, dtype=np.float64).eval()
        x = Tensor(rng_(6).standard_normal((1, 3, 32, 32)))
        out = d(x, x.data.copy(), Tensor(np.zeros((1, 8))))
        assert out.d_local.shape == (1, 1, 32, 32)

    def test_degenerate_head_constant_bias(self, disc):
        import copy

        d = Discriminator(rng_(7), base=8, emb_dim=8, dtype=np.float64).eval()
        for name, p in d.local_head.named_parameters():
            p.data[:] = 0.0
        d.local_head.out.bias.data[:] = 1.25
        pyr = d.encoder(Tensor(rng_(8).standard_normal((1, 3, 16, 16))))
        out = d.local_head(pyr).data
        assert np.allclose(out, 1.25)


class TestGlobalHead:
    def test_zero_difference_is_text_independent(self, disc):
        x = Tensor(rng_(9).standard_normal((2, 3, 16, 16)))
        e1 = Tensor(rng_(10).standard_normal((2, 8)))
        e2 = Tensor(rng_(11).standard_normal((2, 8)))
        a = disc(x, x.data.copy(), e1).d_global.data
        b = disc(x, x.data.copy(), e2).d_global.data
        assert np.allclose(a, b, atol=1e-12)

    def test_zero_projection_ignores_text(self, disc):
        gh = GlobalHead(rng_(12), 8, 8, dtype=np.float64).eval()
        gh.proj.weight.data[:] = 0.0
        phi_t = Tensor(rng_(13).standard_normal((2, 8)))
        phi_s = Tensor(rng_(14).standard_normal((2, 8)))
        a = gh(phi_t, phi_s, Tensor(rng_(15).standard_normal((2, 8)))).data
        b = gh(phi_t, phi_s, Tensor(rng_(16).standard_normal((2, 8)))).data
        assert np.array_equal(a, b)

    def test_hand_computed_projection(self):
        gh = GlobalHead(rng_(17), 2, 2, dtype=np.float64)
        gh.pre.sn = gh.psi.sn = gh.proj.sn = False
        gh.pre.weight.data = np.eye(2)  # delta' = lrelu(delta)
        gh.psi.weight.data = np.array([[1.0, 2.0]])
        gh.psi.bias.data = np.array([0.25])
        gh.proj.weight.data = np.array([[3.0, 0.0], [0.0, -1.0]])
        phi_t = Tensor(np.array([[2.0, 5.0]]))
        phi_s = Tensor(np.array([[1.0, 1.0]]))
        ebar = Tensor(np.array([[2.0, 1.0]]))
        # delta = [1, 4] (positive, lrelu passes through); psi = 1 + 8 + 0.25;
        # proj e = [6, -1]; <proj e, delta'> = 6*1 - 1*4 = 2.
        out = gh(phi_t, phi_s, ebar).data
        assert out[0] == pytest.approx(9.25 + 2.0, abs=1e-12)

    def test_swapping_images_changes_global(self, disc):
        a_img = rng_(18).standard_normal((1, 3, 16, 16))
        b_img = rng_(19).standard_normal((1, 3, 16, 16))
        e = Tensor(rng_(20).standard_normal((1, 8)))
        d_ab = disc(Tensor(a_img), b_img, e).d_global.data
        d_ba = disc(Tensor(b_img), a_img, e).d_global.data
        assert not np.allclose(d_ab, d_ba)


class TestAuxHead:
    def test_zero_difference_zero_bias_gives_half_probability(self, disc):
        d = Discriminator(rng_(21), base=8, emb_dim=8, dtype=np.float64).eval()
        d.aux_head.bias.data[:] = 0.0
        x = Tensor(rng_(22).standard_normal((1, 3, 16, 16)))
        out = d(x, x.data.copy(), Tensor(np.zeros((1, 8))))
        assert np.allclose(out.aux_logits.data, 0.0, atol=1e-12)
        probs = 1.0 / (1.0 + np.exp(-out.aux_logits.data))
        assert np.allclose(probs, 0.5)

    def test_n_classes_is_24(self, disc):
        x = Tensor(rng_(23).standard_normal((1, 3, 16, 16)))
        out = disc(x, x.data.copy(), Tensor(np.zeros((1, 8))))
        assert out.aux_logits.shape == (1, 24)


class TestDiscriminate:
    def test_shapes(self, disc):
        x_t = Tensor(rng_(24).standard_normal((3, 3, 16, 16)))
        x_s = rng_(25).standard_normal((3, 3, 16, 16))
        out = disc(x_t, x_s, Tensor(np.zeros((3, 8))))
        assert out.d_local.shape == (3, 1, 16, 16)
        assert out.d_global.shape == (3,)
        assert out.aux_logits.shape == (3, 24)

    def test_shape_mismatch_rejected(self, disc):
        with pytest.raises(ad.ShapeError):
            disc(Tensor(np.zeros((1, 3, 16, 16))), np.zeros((1, 3, 8, 8)), Tensor(np.zeros((1, 8))))

    def test_deterministic(self, disc):
        x_t = rng_(26).standard_normal((1, 3, 16, 16))
        x_s = rng_(27).standard_normal((1, 3, 16, 16))
        e = Tensor(rng_(28).standard_normal((1, 8)))
        a = disc(Tensor(x_t), x_s, e)
        b = disc(Tensor(x_t), x_s, e)
        assert np.array_equal(a.d_local.data, b.d_local.data)
        assert np.array_equal(a.d_global.data, b.d_global.data)

    def test_source_branch_carries_no_gradient(self, disc):
        x_t = Tensor(rng_(29).standard_normal((1, 3, 16, 16)), requires_grad=True)
        x_s = Tensor(rng_(30).standard_normal((1, 3, 16, 16)), requires_grad=True)
        out = disc(x_t, x_s, Tensor(np.zeros((1, 8))))
        (out.d_global.sum() + out.d_local.sum()).backward()
        assert x_t.grad is not None
        assert x_s.grad is None


class TestSpectralConstraint:
    def test_all_layers_spectrally_bounded(self):
        d = Discriminator(rng_(31), base=8, emb_dim=8, dtype=np.float64)
        converge_spectral_states(d, 100)
        d.eval()
        # force one normalized forward to materialize w_sn values
        x = Tensor(rng_(32).standard_normal((1, 3, 16, 16)))
        d(x, x.data.copy(), Tensor(np.zeros((1, 8))))
        for m in d.modules():
            if getattr(m, "sn", False):
                from instructpaint.norms import spectral_normalize

                w2d = m.weight.data.reshape(m.weight.data.shape[0], -1)
                w_sn, _, _ = spectral_normalize(w2d, m.sn_state, n_iters=0, update=False)
                top = np.linalg.svd(np.asarray(w_sn.data if hasattr(w_sn, "data") else w_sn),
                                    compute_uv=False)[0]
                assert top <= 1.0 + 1e-3
