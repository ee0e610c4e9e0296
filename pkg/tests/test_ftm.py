import math

import numpy as np
import pytest

from schnet import tensor as T
from schnet.ftm import FtmParams, TokenBank, ftm_attach, ftm_refine, make_layer_hook
from schnet.tensor import MlpParams, ShapeError, Tensor, finite_diff_grad_check


def mlp(w, b, dtype=np.float32):
    return MlpParams(Tensor(np.asarray(w, dtype), requires_grad=True), Tensor(np.asarray(b, dtype), requires_grad=True))


def gelu(x):
    return 0.5 * x * (1 + math.erf(x / math.sqrt(2)))


def random_params(rng, n, c, r, m, dtype=np.float32, rho=0.5):
    bank = TokenBank.init(rng, n, m, c, rho_init=rho, precision="f64" if dtype == np.float64 else "f32")
    p = FtmParams.init(rng, n, c, r, precision="f64" if dtype == np.float64 else "f32")
    for t in p.tensors().values():
        t.data = rng.standard_normal(t.shape).astype(dtype)
    return bank, p


def hand_attach(f, toks, wt, bt, wo, bo, rho):
    """Loop evaluation of the token-attention residual for one layer."""
    out = []
    for row in f:
        logits = [sum(a * b for a, b in zip(row, t)) for t in toks]
        mx = max(logits)
        e = [math.exp(v - mx) for v in logits]
        a = [v / sum(e) for v in e]
        proj = [[sum(wt[o][k] * t[k] for k in range(len(t))) + bt[o] for o in range(len(bt))] for t in toks]
        mixed = [sum(a[j] * proj[j][o] for j in range(len(toks))) for o in range(len(bt))]
        y = [sum(wo[o][k] * mixed[k] for k in range(len(mixed))) + bo[o] for o in range(len(bo))]
        out.append([rho * y[o] + row[o] for o in range(len(row))])
    return out


def test_attach_hand_case_l2_m2_c2():
    f = [[0.5, -1.0], [1.5, 0.25]]
    toks = [[1.0, 0.0], [0.3, -0.7]]
    wt, bt = [[0.4, -0.2], [1.1, 0.5]], [0.0, 0.1]
    wo, bo = [[0.9, 0.3], [-0.6, 0.8]], [0.05, -0.05]
    rho = 0.7
    bank = TokenBank(Tensor(np.array([toks], np.float32)), Tensor(np.array([rho], np.float32)))
    p = FtmParams([mlp(wt, bt)], [mlp(wo, bo)], mlp(np.eye(2), np.zeros(2)), [mlp(np.eye(2), np.zeros(2))],
                  mlp(np.zeros((2, 2)), np.zeros(2)))
    out = ftm_attach(Tensor(np.array(f, np.float32)), bank, 0, p)
    np.testing.assert_allclose(out.data, hand_attach(f, toks, wt, bt, wo, bo, rho), atol=1e-6)


def test_refine_hand_case():
    fp = [[0.4, -0.8], [1.0, 0.2]]
    fi = [[0.1, 0.2], [-0.3, 0.4]]
    wd, bd = [[1.0, 0.5]], [0.1]
    wm, bm = [[-0.7]], [0.2]
    wu, bu = [[0.6], [-1.2]], [0.0, 0.3]
    p = FtmParams([], [], mlp(wd, bd), [mlp(wm, bm)], mlp(wu, bu))
    ref = []
    for a, b in zip(fp, fi):
        h = gelu(wd[0][0] * a[0] + wd[0][1] * a[1] + bd[0])
        h = gelu(wm[0][0] * h + bm[0])
        ref.append([wu[0][0] * h + bu[0] + b[0], wu[1][0] * h + bu[1] + b[1]])
    out = ftm_refine(Tensor(np.array(fp, np.float32)), Tensor(np.array(fi, np.float32)), 0, p)
    np.testing.assert_allclose(out.data, ref, atol=1e-6)
    alt = ftm_refine(Tensor(np.array(fp, np.float32)), Tensor(np.array(fi, np.float32)), 0, p, residual="f_prime")
    np.testing.assert_allclose(alt.data - out.data, np.array(fp) - np.array(fi), atol=1e-6)


def test_rho_zero_is_identity():
    rng = np.random.default_rng(0)
    bank, p = random_params(rng, 3, 8, 4, 5)
    bank.rho.data[:] = 0
    f = Tensor(rng.standard_normal((2, 6, 8)).astype(np.float32))
    for layer in range(3):
        assert np.array_equal(ftm_attach(f, bank, layer, p).data, f.data)


def test_single_token_degenerate_softmax():
    rng = np.random.default_rng(1)
    bank, p = random_params(rng, 2, 4, 2, 1)
    f = Tensor(rng.standard_normal((5, 4)).astype(np.float32))
    t = bank.tokens[1]
    const = T.mlp_apply(p.mlp_out[1], T.mlp_apply(p.mlp_tok[1], t)).data[0]
    ref = bank.rho.data[1] * const + f.data
    np.testing.assert_allclose(ftm_attach(f, bank, 1, p).data, ref, atol=1e-6)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    bank, _ = random_params(rng, 2, 4, 2, 6)
    f = rng.standard_normal((7, 4)) * 5
    a = T.softmax(T.matmul(Tensor(f.astype(np.float32)), T.transpose(bank.tokens[0], (1, 0))), -1).data
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)


def test_up_zero_discards_f_prime():
    rng = np.random.default_rng(3)
    _, p = random_params(rng, 2, 8, 4, 2)
    p.mlp_up.W.data[:] = 0
    p.mlp_up.b.data[:] = 0
    fp = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    fi = Tensor(rng.standard_normal((4, 8)).astype(np.float32))
    assert np.array_equal(ftm_refine(fp, fi, 1, p).data, fi.data)


def test_mandated_init_hook_is_identity():
    rng = np.random.default_rng(4)
    bank = TokenBank.init(rng, 4, 8, 16, rho_init=0.0)
    p = FtmParams.init(rng, 4, 16, 4)
    hook = make_layer_hook(bank, p)
    x = Tensor(rng.standard_normal((2, 9, 16)).astype(np.float32))
    for i in range(4):
        assert np.array_equal(hook(i, x).data, x.data)


def test_errors():
    rng = np.random.default_rng(5)
    bank, p = random_params(rng, 2, 4, 2, 3)
    f = Tensor(np.zeros((3, 4), np.float32))
    with pytest.raises(IndexError):
        ftm_attach(f, bank, 2, p)
    with pytest.raises(IndexError):
        ftm_attach(f, bank, -1, p)
    with pytest.raises(ShapeError):
        ftm_refine(f, Tensor(np.zeros((2, 4), np.float32)), 0, p)
    with pytest.raises(ValueError):
        TokenBank.init(rng, 2, 3, 4, rho_mode="global")


def test_shared_and_per_layer_structure():
    p = FtmParams.init(np.random.default_rng(0), 3, 8, 4)
    names = p.tensors()
    assert len([k for k in names if k.startswith("mlp_tok/")]) == 6
    assert len([k for k in names if k.startswith("mlp_down/")]) == 2
    assert not p.mlp_up.W.data.any()
    # shared: nudging mlp_down alters every layer's output
    bank, q = random_params(np.random.default_rng(1), 3, 8, 4, 2)
    x = Tensor(np.random.default_rng(2).standard_normal((5, 8)).astype(np.float32))
    before = [ftm_refine(x, x, i, q).data for i in range(3)]
    q.mlp_down.b.data += 0.5
    after = [ftm_refine(x, x, i, q).data for i in range(3)]
    assert all(not np.array_equal(a, b) for a, b in zip(before, after))


def test_scalar_rho_mode():
    bank = TokenBank.init(np.random.default_rng(0), 4, 2, 4, rho_init=0.3, rho_mode="scalar")
    assert bank.rho.shape == (1,)
    assert bank.rho_at(3).data == np.float32(0.3)


def test_gradcheck_attach_refine():
    rng = np.random.default_rng(6)
    bank, p = random_params(rng, 2, 4, 2, 2, dtype=np.float64)
    f = Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def loss():
        out = ftm_refine(ftm_attach(f, bank, 1, p), f, 1, p)
        return T.sum(out * out)

    params = {"tokens": bank.tokens, "rho": bank.rho, "f": f, **p.tensors()}
    rep = finite_diff_grad_check(loss, params, eps=1e-6, tol=1e-4)
    assert all(e.passed for e in rep), [e for e in rep if not e.passed][:3]
    # layer 0 parameters are unused by a layer-1 pass and get exactly zero gradient
    assert all(e.analytic == 0 for e in rep if "/0/" in e.name)
