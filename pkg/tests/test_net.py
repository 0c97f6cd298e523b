import numpy as np
import pytest

from npdenoise import autodiff as ad, net
from npdenoise.errors import ConfigError, FormatError, NumericalError, UsageError
from npdenoise.geom import PlaneSet, project_cloud

import oracles

SMALL = dict(local_widths=[8, 16], head_widths=[8, 4])


def small_config(**kw):
    return net.NetConfig(**{**SMALL, **kw})


def flat_sample(n=64, seed=0, sigma=0.02):
    g = np.random.default_rng(seed)
    clean = np.column_stack([g.uniform(-0.5, 0.5, (n, 2)), np.zeros(n)])
    noisy = clean + g.normal(scale=sigma, size=(n, 3))
    planes = PlaneSet(np.tile([0, 0, 1.0], (n, 1)), np.zeros(n))
    return net.TrainSample("flat", clean, noisy, planes, sigma)


def test_forward_matches_hand_rolled(rng):
    cfg = small_config(seed=11)
    params = net.init_params(cfg)
    for k in params:
        if k.endswith("bias"):
            params[k] = rng.uniform(-0.2, 0.2, params[k].shape)
    pts = rng.uniform(-0.5, 0.5, (16, 3))
    out = net.forward(pts, params, cfg).data
    assert out.shape == (16, 4)
    assert np.allclose(out, oracles.npd_forward(pts, params, 2, 2), atol=1e-12)


def test_local_only_forward_matches_hand_rolled(rng):
    cfg = small_config(use_global=False)
    params = net.init_params(cfg)
    assert params["local.1.weight"].shape == (8, 32)
    assert params["head.0.weight"].shape == (32, 8)
    pts = rng.uniform(-0.5, 0.5, (10, 3))
    ref = oracles.npd_forward(pts, params, 2, 2, use_global=False)
    assert np.allclose(net.forward(pts, params, cfg).data, ref, atol=1e-12)


def test_permutation(rng):
    cfg = small_config()
    params = net.init_params(cfg)
    pts = rng.uniform(-0.5, 0.5, (30, 3))
    perm = rng.permutation(30)
    _, g1 = net.encode(pts, params, cfg)
    _, g2 = net.encode(pts[perm], params, cfg)
    assert np.array_equal(g1.data, g2.data)
    a = net.forward(pts, params, cfg).data
    b = net.forward(pts[perm], params, cfg).data
    assert np.array_equal(a[perm], b)


def test_forward_shape_errors():
    cfg = small_config()
    params = net.init_params(cfg)
    params["head.0.weight"] = params["head.0.weight"][:-1]
    with pytest.raises(ConfigError):
        net.forward(np.zeros((4, 3)), params, cfg)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((4, 3)), {}, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(head_widths=[8, 3])
    with pytest.raises(ConfigError):
        net.NetConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        small_config(alpha_schedule=net.AlphaSchedule(start=1.5))
    cfg = small_config(seed=4)
    assert net.NetConfig.from_dict(cfg.to_dict()) == cfg


def test_loss1_cases(rng):
    x = rng.normal(size=(7, 3))
    assert net.loss1(x, x).item() == 0
    assert net.loss1(np.array([[0.3, 0, 0]]), np.zeros((1, 3))).item() == pytest.approx(0.09, abs=1e-15)
    y = rng.normal(size=(7, 3))
    ref = sum(sum((x[i][k] - y[i][k]) ** 2 for k in range(3)) for i in range(7)) / 7
    assert abs(net.loss1(x, y).item() - ref) < 1e-9
    with pytest.raises(UsageError):
        net.loss1(x, y[:3])


def test_loss2_cases(rng):
    ref = rng.normal(size=(9, 4))
    ref[:, :3] /= np.linalg.norm(ref[:, :3], axis=1, keepdims=True)
    ps = PlaneSet.from_array(ref)
    assert net.loss2(ref, ps).item() == pytest.approx(0, abs=1e-12)
    assert net.loss2(-ref, ps).item() == pytest.approx(2, abs=1e-12)
    assert net.loss2(3.7 * ref, ps).item() == pytest.approx(0, abs=1e-12)
    bad = ref.copy()
    bad[4] = 0
    with pytest.raises(UsageError, match="index 4"):
        net.loss2(bad, ps)


def test_combined_loss():
    l1, l2 = ad.tensor(2.0), ad.tensor(4.0)
    assert net.combined_loss(l1, l2, 1.0).item() == 2.0
    assert net.combined_loss(l1, l2, 0.0).item() == 4.0
    assert net.combined_loss(l1, l2, 0.3).item() == pytest.approx(3.4, abs=1e-15)
    with pytest.raises(ConfigError):
        net.combined_loss(l1, l2, 1.2)


def test_alpha_schedule():
    s = net.AlphaSchedule(0.1, 0.9, 11)
    assert net.alpha_at(0, s) == 0.1
    assert net.alpha_at(10, s) == 0.9
    assert net.alpha_at(5, s) == pytest.approx(0.5, abs=1e-15)
    assert net.alpha_at(0, net.AlphaSchedule(0.3, 0.7, 1)) == 0.3


def test_step_losses_match_oracle(rng):
    cfg = small_config()
    pts, clean, ref, params, _ = oracles.gradcheck_problem(3)
    raw = oracles.npd_forward(pts, params, 2, 2)
    l1, l2, l = oracles.npd_losses(pts, clean, ref, raw, 0.25)
    loss, a, b, nbad = net.step_losses(pts, clean, PlaneSet.from_array(ref), params, cfg, 0.25)
    assert nbad == 0
    assert a.item() == pytest.approx(l1, rel=1e-10)
    assert b.item() == pytest.approx(l2, rel=1e-10)
    assert loss.item() == pytest.approx(l, rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_full_gradcheck(seed):
    cfg = small_config()
    pts, clean, ref, params, _ = oracles.gradcheck_problem(seed)
    tp = {k: ad.tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    planes = PlaneSet.from_array(ref)
    f = lambda: net.step_losses(pts, clean, planes, tp, cfg, 0.5)[0]
    assert max(ad.grad_check(f, t) for t in tp.values()) < 1e-3


def test_overfit_flat_plane():
    s = flat_sample()
    cfg = small_config(alpha_schedule=net.AlphaSchedule(0.1, 0.9, 200), seed=2)
    _, hist = net.train([s], cfg)
    loss = hist.column("loss")
    assert loss[-1] < 0.1 * loss[0]


def test_train_deterministic_and_alpha_column():
    samples = [flat_sample(32, seed=i) for i in range(3)]
    cfg = small_config(alpha_schedule=net.AlphaSchedule(0.1, 0.9, 6), seed=5, batch_clouds=2, resample_noise=True)
    p1, h1 = net.train(samples, cfg, val_samples=samples[:1])
    p2, h2 = net.train(samples, cfg, val_samples=samples[:1])
    assert h1.to_dicts() == h2.to_dicts()
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert h1.column("alpha") == [net.alpha_at(e, cfg.alpha_schedule) for e in range(6)]
    assert all(v is not None for v in h1.column("val_mse"))
    p3, _ = net.train(samples, small_config(alpha_schedule=net.AlphaSchedule(0.1, 0.9, 6), seed=6))
    assert not all(np.array_equal(p1[k], p3[k]) for k in p1)


def test_train_nan_aborts():
    s = flat_sample(16)
    s.noisy = s.noisy.copy()
    s.noisy[3, 0] = 1e200
    cfg = small_config(alpha_schedule=net.AlphaSchedule(0.5, 0.5, 2))
    with np.errstate(all="ignore"), pytest.raises(NumericalError, match="flat"):
        net.train([s], cfg)


def test_train_empty():
    with pytest.raises(UsageError):
        net.train([], small_config())


def test_history_csv(tmp_path):
    h = net.TrainHistory()
    h.append(net.EpochRecord(0, 0.1, 1.0, 0.5, 0.25))
    with pytest.raises(UsageError):
        h.append(net.EpochRecord(2, 0.1, 1.0, 0.5, 0.25))
    h.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[1] == "0,0.1,1.0,0.5,0.25,,"


def forced_params(cfg, row):
    params = net.init_params(cfg)
    last = f"head.{len(cfg.head_widths) - 1}"
    params[f"{last}.weight"][:] = 0
    params[f"{last}.bias"][:] = row
    return params


def test_denoise_forced_planes(rng):
    cfg = small_config()
    params = forced_params(cfg, [0, 0, 1, 0])
    noisy = rng.uniform(-0.5, 0.5, (20, 3))
    den, planes = net.denoise(noisy, params, cfg)
    want = noisy.copy()
    want[:, 2] = 0
    assert np.array_equal(den, want)
    assert np.array_equal(project_cloud(den, planes), den)


def test_denoise_degenerate_rows_pass_through(rng):
    cfg = small_config()
    params = forced_params(cfg, [0, 0, 0, 1])
    noisy = rng.uniform(-0.5, 0.5, (20, 3))
    den, _, bad = net.denoise_with_mask(noisy, params, cfg)
    assert bad.all() and np.array_equal(den, noisy)


def test_denoise_composition_oracle(rng):
    cfg = small_config(seed=9)
    params = net.init_params(cfg)
    noisy = rng.uniform(-0.5, 0.5, (25, 3))
    den, planes = net.denoise(noisy, params, cfg)
    raw = oracles.npd_forward(noisy, params, 2, 2)
    for i in range(25):
        assert np.allclose(den[i], oracles.project_scalar(noisy[i], raw[i]), atol=1e-12)
        n, c = planes.normals[i], planes.intercepts[i]
        assert abs(n @ den[i] - c) < 1e-6
    again = project_cloud(den, planes)
    assert np.allclose(again, den, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_config(seed=3)
    params = net.init_params(cfg)
    net.save_checkpoint(params, cfg, tmp_path / "a.npd", {"id": "x"})
    p2, c2, meta = net.load_checkpoint_with_meta(tmp_path / "a.npd")
    assert c2 == cfg and meta == {"id": "x"}
    for k in params:
        assert np.array_equal(p2[k], params[k].astype(np.float32).astype(np.float64))
    net.save_checkpoint(p2, c2, tmp_path / "b.npd", {"id": "x"})
    assert (tmp_path / "a.npd").read_bytes() == (tmp_path / "b.npd").read_bytes()


def test_checkpoint_corruption(tmp_path):
    cfg = small_config()
    blob = net.encode_checkpoint(net.init_params(cfg), cfg)
    with pytest.raises(FormatError):
        net.decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        net.decode_checkpoint(blob[:4] + b"\x09\0\0\0" + blob[8:])
    with pytest.raises(FormatError):
        net.decode_checkpoint(blob + b"\0")
    for cut in range(len(blob)):
        with pytest.raises(FormatError):
            net.decode_checkpoint(blob[:cut])
    g = np.random.default_rng(0)
    for _ in range(300):
        b = bytearray(blob)
        b[g.integers(len(b))] = g.integers(256)
        try:
            net.decode_checkpoint(bytes(b))
        except FormatError:
            pass
