import numpy as np
import pytest

import cddpe.numerics as N
from cddpe.cdfdm import (DictionaryCodec, FeatureDecoupler, MultiscaleFeedForward,
                         SparsePyramid, cdm_decode, cdm_encode)
from cddpe.errors import DimensionError
from cddpe.numerics import Tensor

from conftest import fd_probe_topk


def sparse_mask(rng, shape, k=8):
    # scattered +/-1 readout keeps the scalar loss small enough for float32
    # finite differences to resolve the probed gradients
    m = np.zeros(shape, dtype=np.float32)
    flat = m.reshape(-1)
    idx = rng.choice(flat.size, size=k, replace=False)
    flat[idx] = rng.choice([-1.0, 1.0], size=k)
    return m


def make_decoupler(seed=0):
    return FeatureDecoupler(np.random.Generator(np.random.PCG64(seed)))


def rand_images(rng, n=1, res=32):
    return (Tensor(rng.random((n, 1, res, res), dtype=np.float32)),
            Tensor(rng.random((n, 1, res, res), dtype=np.float32)))


class IdentityProx:
    def __call__(self, u):
        return u


class TestInitFeatures:
    def test_shapes(self, rng):
        dec = make_decoupler()
        fx, fy, fc = dec.init_features(*rand_images(rng))
        for f in (fx, fy, fc):
            assert f.shape == (1, 64, 32, 32)

    def test_deterministic(self, rng):
        ixs, iy = rand_images(rng)
        out1 = make_decoupler(3).init_features(ixs, iy)
        out2 = make_decoupler(3).init_features(ixs, iy)
        for a, b in zip(out1, out2):
            np.testing.assert_array_equal(a.data, b.data)

    def test_zero_images_zero_features(self):
        dec = make_decoupler()
        z = Tensor(np.zeros((1, 1, 32, 32), np.float32))
        for f in dec.init_features(z, z):
            assert np.all(f.data == 0.0)

    def test_resolution_mismatch(self, rng):
        dec = make_decoupler()
        with pytest.raises(DimensionError):
            dec.init_features(Tensor(rng.random((1, 1, 32, 32), dtype=np.float32)),
                              Tensor(rng.random((1, 1, 16, 16), dtype=np.float32)))


class TestCodec:
    def test_pyramid_shapes(self, rng):
        codec = DictionaryCodec(np.random.default_rng(0))
        u = cdm_encode(Tensor(rng.random((1, 64, 32, 32), dtype=np.float32)), codec)
        assert u.shapes() == [(1, 64, 32, 32), (1, 96, 16, 16), (1, 128, 8, 8)]

    def test_roundtrip_shape(self, rng):
        codec = DictionaryCodec(np.random.default_rng(0))
        f = Tensor(rng.random((2, 64, 16, 16), dtype=np.float32))
        assert cdm_decode(cdm_encode(f, codec), codec).shape == f.shape

    def test_indivisible_dims(self, rng):
        codec = DictionaryCodec(np.random.default_rng(0))
        with pytest.raises(DimensionError):
            codec.encode(Tensor(rng.random((1, 64, 30, 30), dtype=np.float32)))

    def test_gradient_through_roundtrip(self, rng):
        codec = DictionaryCodec(np.random.default_rng(0))
        f = Tensor(rng.standard_normal((1, 64, 8, 8)).astype(np.float32), requires_grad=True)
        r = sparse_mask(rng, (1, 64, 8, 8))

        def forward(ft):
            return N.sum_(codec.decode(codec.encode(ft)) * Tensor(r))

        forward(f).backward()
        # the probe closure re-wraps the input buffer so the float64 shadow
        # sees the perturbed values
        probe = lambda: forward(Tensor(f.data)).item()
        fd_probe_topk(probe, f, k=3)
        fd_probe_topk(probe, codec.e1.w, k=3)
        fd_probe_topk(probe, codec.d3.w, k=3)


class TestProxMffn:
    def test_shape_preservation(self, rng):
        mffn = MultiscaleFeedForward(np.random.default_rng(0))
        levels = [Tensor(rng.random((1, c, r, r), dtype=np.float32))
                  for c, r in ((64, 16), (96, 8), (128, 4))]
        out = mffn(SparsePyramid(levels))
        assert out.shapes() == [tuple(l.shape) for l in levels]

    def test_role_isolation(self, rng):
        # mutating the x-path proximal weights must not change the y path
        dec = make_decoupler()
        levels = SparsePyramid([Tensor(rng.random((1, c, r, r), dtype=np.float32))
                                for c, r in ((64, 16), (96, 8), (128, 4))])
        before = [l.data.copy() for l in dec.prox_y(levels)]
        for _, p in dec.prox_x.params("x"):
            p.data = p.data + 1.0
        after = dec.prox_y(levels)
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a.data)

    def test_gradient(self, rng):
        mffn = MultiscaleFeedForward(np.random.default_rng(0), channels=(8, 12, 16))
        levels = SparsePyramid([
            Tensor(rng.standard_normal((1, c, r, r)).astype(np.float32), requires_grad=True)
            for c, r in ((8, 8), (12, 4), (16, 2))])
        masks = [sparse_mask(rng, l.shape, k=4) for l in levels]

        def forward(lvls):
            out = mffn(SparsePyramid(lvls))
            total = None
            for o, m in zip(out, masks):
                term = N.sum_(o * Tensor(m))
                total = term if total is None else total + term
            return total

        forward(levels).backward()
        probe = lambda: forward([Tensor(l.data) for l in levels]).item()
        fd_probe_topk(probe, levels[0], k=3)
        fd_probe_topk(probe, mffn.stages[0][0].w, k=3)


class TestOffnet:
    def test_zero_displacement_at_init(self, rng):
        dec = make_decoupler()
        a = Tensor(rng.random((1, 64, 32, 32), dtype=np.float32))
        b = Tensor(rng.random((1, 64, 32, 32), dtype=np.float32))
        disp, mod = dec.offnet(a, b)
        assert np.all(disp.data == 0.0)
        assert disp.shape == (1, 2, 32, 32)
        assert mod.shape == (1, 64, 32, 32)

    def test_gradient_through_warp(self, rng):
        dec = make_decoupler()
        a = Tensor(rng.standard_normal((1, 64, 8, 8)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 64, 8, 8)).astype(np.float32))
        r = sparse_mask(rng, (1, 64, 8, 8))
        # a nonzero displacement head makes the warp path carry gradient
        dec.offnet.disp_head.w.data = 0.02 * np.random.default_rng(5).standard_normal(
            dec.offnet.disp_head.w.shape).astype(np.float32)

        def forward(at, bt):
            disp, mod = dec.offnet(at, bt)
            return N.sum_(N.grid_warp(bt, disp) * mod * Tensor(r))

        forward(a, b).backward()
        probe = lambda: forward(Tensor(a.data), Tensor(b.data)).item()
        fd_probe_topk(probe, dec.offnet.e1.w, k=3)
        fd_probe_topk(probe, dec.offnet.disp_head.w, k=3)


def _encode_all(dec, rng, res=8):
    ixs, iy = rand_images(rng, res=res)
    fx, fy, fc = dec.init_features(ixs, iy)
    return (dec.codec_x.encode(fx), dec.codec_y.encode(fy), dec.codec_c.encode(fc))


class TestUpdates:
    def test_zero_step_identity_prox_fixed_point(self, rng):
        dec = make_decoupler()
        for eta in (dec.etas.eta_x, dec.etas.eta_y, dec.etas.eta_c):
            eta.data = np.float32(0.0)
        dec.prox_x = dec.prox_y = dec.prox_c = IdentityProx()
        ux, uy, uc = _encode_all(dec, rng)
        ux2 = dec.update_target(ux, uc)
        uy2 = dec.update_reference(uy, uc)
        fx = dec.codec_x.decode(ux2)
        fy = dec.codec_y.decode(uy2)
        uc2 = dec.update_common(uc, fx, fx, fy, fy)
        for before, after in ((ux, ux2), (uy, uy2), (uc, uc2)):
            for lb, la in zip(before, after):
                np.testing.assert_array_equal(lb.data, la.data)

    def test_shapes_preserved(self, rng):
        dec = make_decoupler()
        ux, uy, uc = _encode_all(dec, rng)
        assert dec.update_target(ux, uc).shapes() == ux.shapes()
        assert dec.update_reference(uy, uc).shapes() == uy.shapes()

    def test_update_target_matches_suboperation_oracle(self, rng):
        dec = make_decoupler()
        ux, _, uc = _encode_all(dec, rng)
        got = dec.update_target(ux, uc)
        # step-by-step composition of the public sub-operations
        fxc = dec.codec_x.decode(ux) + dec.codec_c.decode(uc)
        reenc = dec.codec_x.encode(fxc)
        eta = dec.etas.eta_x
        stepped = [u - eta * (u - e) for u, e in zip(ux, reenc)]
        expect = dec.prox_x(SparsePyramid(stepped))
        for g, e in zip(got, expect):
            np.testing.assert_array_equal(g.data, e.data)

    def test_update_reference_matches_suboperation_oracle(self, rng):
        dec = make_decoupler()
        _, uy, uc = _encode_all(dec, rng)
        got = dec.update_reference(uy, uc)
        dec_c = dec.codec_c.decode(uc)
        dec_y = dec.codec_y.decode(uy)
        disp, mod = dec.offnet(dec_c, dec_y)
        fyc = N.grid_warp(dec_c, disp) * mod
        reenc = dec.codec_y.encode(dec_y + fyc)
        eta = dec.etas.eta_y
        expect = dec.prox_y(SparsePyramid([u - eta * (u - e) for u, e in zip(uy, reenc)]))
        for g, e in zip(got, expect):
            np.testing.assert_array_equal(g.data, e.data)

    def test_update_reference_identity_warp_reduction(self, rng):
        # with the displacement head zero-initialized, the warp is the
        # identity and the update reduces to the target-style rule with
        # modulated common features
        dec = make_decoupler()
        _, uy, uc = _encode_all(dec, rng)
        got = dec.update_reference(uy, uc)
        dec_c = dec.codec_c.decode(uc)
        dec_y = dec.codec_y.decode(uy)
        _, mod = dec.offnet(dec_c, dec_y)
        reenc = dec.codec_y.encode(dec_y + dec_c * mod)
        eta = dec.etas.eta_y
        expect = dec.prox_y(SparsePyramid([u - eta * (u - e) for u, e in zip(uy, reenc)]))
        for g, e in zip(got, expect):
            np.testing.assert_array_equal(g.data, e.data)

    def test_update_common_zero_residual_fixed_point(self, rng):
        dec = make_decoupler()
        dec.etas.eta_c.data = np.float32(0.0)
        dec.prox_c = IdentityProx()
        _, _, uc = _encode_all(dec, rng)
        f = Tensor(rng.random((1, 64, 8, 8), dtype=np.float32))
        out = dec.update_common(uc, f, f, f, f)
        for lb, la in zip(uc, out):
            np.testing.assert_array_equal(lb.data, la.data)

    def test_update_common_matches_suboperation_oracle(self, rng):
        dec = make_decoupler()
        _, _, uc = _encode_all(dec, rng)
        fx_new, fx_old, fy_new, fy_old = (
            Tensor(rng.random((1, 64, 8, 8), dtype=np.float32)) for _ in range(4))
        got = dec.update_common(uc, fx_new, fx_old, fy_new, fy_old)
        ry = fy_new - fy_old
        rx = fx_new - fx_old
        disp, mod = dec.offnet(ry, rx)
        resid = N.concat([N.grid_warp(ry, disp) * mod, rx], axis=1)
        fcr = dec.codec_c.decode(uc) - dec.residual_proj(resid)
        reenc = dec.codec_c.encode(fcr)
        eta = dec.etas.eta_c
        expect = dec.prox_c(SparsePyramid([u - eta * (u - e) for u, e in zip(uc, reenc)]))
        for g, e in zip(got, expect):
            np.testing.assert_array_equal(g.data, e.data)


class TestRun:
    def test_output_shapes(self, rng):
        dec = make_decoupler()
        fx, fy, fc = dec.run(*rand_images(rng), iterations=2)
        for f in (fx, fy, fc):
            assert f.shape == (1, 64, 32, 32)

    def test_single_iteration_equals_manual(self, rng):
        dec = make_decoupler()
        ixs, iy = rand_images(rng, res=16)
        got = dec.run(ixs, iy, iterations=1)

        fx0, fy0, fc0 = dec.init_features(ixs, iy)
        ux = dec.codec_x.encode(fx0)
        uy = dec.codec_y.encode(fy0)
        uc = dec.codec_c.encode(fc0)
        ux = dec.update_target(ux, uc)
        uy = dec.update_reference(uy, uc)
        fx1 = dec.codec_x.decode(ux)
        fy1 = dec.codec_y.decode(uy)
        uc = dec.update_common(uc, fx1, fx0, fy1, fy0)
        expect = (fx1, fy1, dec.codec_c.decode(uc))
        for g, e in zip(got, expect):
            np.testing.assert_array_equal(g.data, e.data)

    def test_deterministic(self, rng):
        ixs, iy = rand_images(rng, res=16)
        out1 = make_decoupler(7).run(ixs, iy, iterations=3)
        out2 = make_decoupler(7).run(ixs, iy, iterations=3)
        for a, b in zip(out1, out2):
            np.testing.assert_array_equal(a.data, b.data)

    def test_full_fixed_point_over_iterations(self, rng):
        # zero step sizes + identity proximal: the unfolding never moves the
        # codes, so decoded features equal the decoded initial codes
        dec = make_decoupler()
        for eta in (dec.etas.eta_x, dec.etas.eta_y, dec.etas.eta_c):
            eta.data = np.float32(0.0)
        dec.prox_x = dec.prox_y = dec.prox_c = IdentityProx()
        ixs, iy = rand_images(rng, res=16)
        fx0, fy0, fc0 = dec.init_features(ixs, iy)
        expect = (dec.codec_x.decode(dec.codec_x.encode(fx0)),
                  dec.codec_y.decode(dec.codec_y.encode(fy0)),
                  dec.codec_c.decode(dec.codec_c.encode(fc0)))
        got = dec.run(ixs, iy, iterations=3)
        for g, e in zip(got, expect):
            np.testing.assert_array_equal(g.data, e.data)

    def test_etas_stay_finite_and_gradients_flow(self, rng):
        dec = make_decoupler()
        ixs, iy = rand_images(rng, res=8)
        fx, fy, fc = dec.run(ixs, iy, iterations=2)
        N.sum_((fx + fy + fc) * (fx + fy + fc)).backward()
        for eta in (dec.etas.eta_x, dec.etas.eta_y, dec.etas.eta_c):
            assert eta.grad is not None
            assert np.isfinite(eta.grad)
            assert np.isfinite(eta.data)
