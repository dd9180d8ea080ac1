"""Acceptance gate: one test per release criterion.

Each test prints a ``criterion N: PASS`` line on success so the suite
output doubles as the sign-off record. The two training-based probes
(8, 9) share cached runs; the full sMNIST check (7) needs the IDX files
under $SPIKESEQ_DATA_ROOT and is skipped when they are absent.
"""

import os
import time

import numpy as np
import pytest

from spikeseq import autodiff as ad
from spikeseq import ssm
from spikeseq import training as tr
from spikeseq.activations import ActivationSpec, surrogate_backward
from spikeseq.gsu import GLULayerParams, GSULayerParams, audit_ops, \
    glu_forward, gsu_forward, ternarize
from spikeseq.lif import LIFParams, lif_kernel, lif_run
from spikeseq.network import Model
from spikeseq.training import TrainConfig
from conftest import numeric_grad, rel_err


def report(n, detail=""):
    print(f"criterion {n}: PASS" + (f" ({detail})" if detail else ""))


# -- 1: scan/convolution duality ---------------------------------------

def test_criterion_01_duality_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    worst = 0.0
    for i in range(200):
        d = int(rng.choice([2, 64]))
        L = int(rng.choice([1, 257, 1024]))
        ch = ssm.init_s4d_inv(d, channel_index=i, rng_seed=int(rng.integers(1 << 30)))
        x = rng.normal(size=L)
        y_scan, _ = ssm.scan_iterative(ch, x)
        disc = ssm.discretize_bilinear(ch)
        k = ssm.compute_kernel(disc.a_bar, disc.b_bar, ch.C, L)
        y_conv = ssm.conv_fft(k, x) + ch.D * x
        worst = max(worst, rel_err(y_scan, y_conv))
    elapsed = time.monotonic() - t0
    assert worst < 1e-5
    assert elapsed < 60.0
    report(1, f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# -- 2: convolution theorem --------------------------------------------

def test_criterion_02_convolution_theorem():
    t0 = time.monotonic()
    rng = np.random.default_rng(7)
    worst = 0.0
    for L in (1, 2, 3, 5, 100, 127, 257, 500, 777, 1024):
        for _ in range(5):
            k = rng.normal(size=L)
            x = rng.normal(size=L)
            worst = max(worst, np.abs(ssm.conv_fft(k, x) - ssm.conv_naive(k, x)).max())
    elapsed = time.monotonic() - t0
    assert worst < 1e-8
    assert elapsed < 30.0
    report(2, f"worst abs err {worst:.2e}, {elapsed:.1f}s")


# -- 3: gradients ------------------------------------------------------

def _op_cases(rng):
    """One (name, params, loss_builder) triple per differentiable op."""
    w23 = rng.normal(size=(2, 3))
    w24 = rng.normal(size=(2, 4))
    w43 = rng.normal(size=(4, 3))
    w2 = rng.normal(size=2)
    w28 = rng.normal(size=(2, 8))
    wre = rng.normal(size=(2, 3))
    wim = rng.normal(size=(2, 3))

    def weighted(t, w):
        return ad.tsum(t * ad.Tensor(w))

    def bn_loss(x, g, b):
        state = ad.BatchNormState(3)
        return weighted(ad.batch_norm(x, g, b, state, training=True), w23)

    def drop_loss(x):
        return weighted(ad.dropout(x, 0.4, True, np.random.default_rng(5)), w23)

    def rfft_loss(a):
        re, im = ad.rfft(a, n=4, axis=-1)
        return weighted(re, wre) + weighted(im, wim)

    def irfft_loss(re, im):
        return weighted(ad.irfft(re, im, n=8, axis=-1), w28)

    cases = [
        ("add", 2, lambda a, b: weighted(a + b, w23)),
        ("subtract", 2, lambda a, b: weighted(a - b, w23)),
        ("multiply", 2, lambda a, b: weighted(a * b, w23)),
        ("matmul", 2, lambda a, b: weighted(ad.matmul(a, b), w24)),
        ("transpose", 1, lambda a: weighted(ad.transpose(a), w23.T)),
        ("reshape", 1, lambda a: weighted(ad.reshape(a, (3, 2)), w23.reshape(3, 2))),
        ("concat", 2, lambda a, b: weighted(ad.concat([a, b], axis=0), w43)),
        ("tslice", 1, lambda a: weighted(ad.tslice(a, (slice(0, 1),)), w23[:1])),
        ("tsum", 1, lambda a: ad.tsum(a) * ad.Tensor(1.7)),
        ("tmean", 1, lambda a: weighted(ad.tmean(a, axis=1), w2)),
        ("exp", 1, lambda a: weighted(ad.exp(a), w23)),
        ("log", 1, lambda a: weighted(ad.log(ad.exp(a)), w23)),
        ("erf", 1, lambda a: weighted(ad.erf(a), w23)),
        ("logistic", 1, lambda a: weighted(ad.logistic(a), w23)),
        ("relu", 1, lambda a: weighted(ad.relu(a + ad.Tensor(0.05)), w23)),
        ("dropout", 1, drop_loss),
        ("layer_norm", 3, lambda x, g, b: weighted(
            ad.layer_norm(x, ad.reshape(g, (3,)), ad.reshape(b, (3,))), w23)),
        ("batch_norm", 3, lambda x, g, b: bn_loss(
            x, ad.reshape(g, (3,)), ad.reshape(b, (3,)))),
        ("softmax_ce", 1, lambda a: ad.softmax_cross_entropy(a, np.array([0, 2]))),
        ("rfft", 1, rfft_loss),
        ("irfft", 2, irfft_loss),
    ]
    return cases


def test_criterion_03_gradient_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(11)

    # per-op finite differences
    for name, arity, build in _op_cases(rng):
        if name == "matmul":
            arrs = [rng.normal(size=(2, 3)), rng.normal(size=(3, 4))]
        elif name == "layer_norm" or name == "batch_norm":
            arrs = [rng.normal(size=(2, 3)), rng.uniform(0.5, 1.5, (1, 3)),
                    rng.normal(size=(1, 3))]
        elif name == "irfft":
            arrs = [rng.normal(size=(2, 5)), rng.normal(size=(2, 5))]
        else:
            arrs = [rng.normal(size=(2, 3)) for _ in range(arity)]
        tensors = [ad.Tensor(a, requires_grad=True) for a in arrs]
        loss = build(*tensors)
        loss.backward()
        for t, a in zip(tensors, arrs):
            fd = numeric_grad(lambda: float(build(*tensors).data), t.data)
            assert rel_err(t.grad, fd) < 1e-3, f"op {name}"

    # full two-layer continuous model, L=8 H=4 d=2
    cfg = TrainConfig(task="synth", n_layers=2, features=4, state_dim=2,
                      activation="gelu", mixer="glu", residual="after_mixing",
                      synth_length=8, synth_classes=3, seed=1).validate()
    model = Model(tr.model_config(cfg))
    x = rng.random((2, 8))
    labels = np.array([0, 2])

    def loss_value():
        return float(ad.softmax_cross_entropy(model.forward(x), labels).data)

    model.zero_grad()
    ad.softmax_cross_entropy(model.forward(x), labels).backward()
    worst = 0.0
    for p in model.params():
        fd = numeric_grad(loss_value, p.data)
        worst = max(worst, rel_err(p.tensor.grad, fd))
    assert worst < 1e-3

    # surrogate derivatives against the closed forms
    xs = rng.normal(size=200) * 4
    fs = surrogate_backward(xs, ActivationSpec("binary_spike", surrogate="fast_sigmoid"))
    at = surrogate_backward(xs, ActivationSpec("binary_spike", surrogate="arctan"))
    assert np.abs(fs - 1.0 / (25.0 * np.abs(xs) + 1.0) ** 2).max() < 1e-10
    assert np.abs(at - 1.0 / (1.0 + (np.pi * xs) ** 2)).max() < 1e-10

    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    report(3, f"model worst rel err {worst:.2e}, {elapsed:.1f}s")


# -- 4: LIF equivalence ------------------------------------------------

def test_criterion_04_lif_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(3)
    worst = 0.0
    for beta in (0.1, 0.5, 0.9):
        p = LIFParams(beta=beta, theta=1e9, reset_mode="none")
        x = rng.normal(size=256)
        us, _ = lif_run(p, x)
        ref = ssm.conv_naive(lif_kernel(p, 256), x)
        worst = max(worst, np.abs(us - ref).max())
    elapsed = time.monotonic() - t0
    assert worst < 1e-10
    assert elapsed < 10.0
    report(4, f"worst abs err {worst:.2e}, {elapsed:.1f}s")


# -- 5: GSU correctness and op accounting ------------------------------

def test_criterion_05_gsu_correctness():
    t0 = time.monotonic()
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        d, k = rng.integers(1, 12, 2)
        p = GSULayerParams(rng.normal(size=(d, k)), rng.normal(size=k),
                           rng.normal(size=k))
        x = rng.normal(size=d)
        tx = ternarize(x, p.alpha_ter)
        tw = ternarize(p.W, p.alpha_ter)
        oracle = (tx @ p.W + p.b) * (x @ tw + p.c)
        worst = max(worst, np.abs(gsu_forward(p, x) - oracle).max())
    assert worst < 1e-12

    d, k = 32, 16
    gp = GSULayerParams(rng.normal(size=(d, k)), rng.normal(size=k), rng.normal(size=k))
    gc = audit_ops(lambda c: gsu_forward(gp, rng.normal(size=d), c))
    assert gc.multiplies == k        # the Hadamard product, nothing else
    lp = GLULayerParams(rng.normal(size=(d, k)), rng.normal(size=(d, k)),
                        rng.normal(size=k), rng.normal(size=k))
    lc = audit_ops(lambda c: glu_forward(lp, rng.normal(size=d), c))
    assert lc.multiplies >= 2 * d * k

    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    report(5, f"oracle err {worst:.2e}, gsu {gc.multiplies} vs glu {lc.multiplies} mults")


# -- 6: initialization -------------------------------------------------

def test_criterion_06_initialization():
    lin = ssm.init_s4d_lin(6)
    assert np.abs(lin.A - np.array([-0.5, -0.5 + 1j * np.pi,
                                    -0.5 + 2j * np.pi])).max() < 1e-12
    inv = ssm.init_s4d_inv(4)
    expect = np.array([-0.5 + 1j * (4 / np.pi) * 3.0,
                       -0.5 + 1j * (4 / np.pi) * (4.0 / 3.0 - 1.0)])
    assert np.abs(inv.A - expect).max() < 1e-12

    # stability survives unconstrained optimizer pressure on the
    # reparameterized real part
    cfg = TrainConfig(task="synth", n_layers=1, features=4, synth_length=8).validate()
    model = Model(tr.model_config(cfg))
    opt = tr.AdamW(model.params(), lr=0.5, weight_decay=0.0)
    rng = np.random.default_rng(0)
    bank = model.blocks[0].fwd
    for _ in range(100):
        for p in model.params():
            p.tensor.grad = rng.normal(size=p.data.shape)
        opt.step()
        A_real = -np.exp(bank.log_neg_real.data)
        assert np.all(A_real < 0)
    report(6, "eigenvalue laws exact, Re(A) < 0 after 100 steps")


# -- 7: sMNIST learning (desk scale) -----------------------------------

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _mnist_root():
    root = os.environ.get(tr.DATA_ROOT_ENV, "")
    if root and all(os.path.exists(os.path.join(root, f)) for f in MNIST_FILES):
        return root
    return None


@pytest.mark.slow
def test_criterion_07_smnist_learning(tmp_path):
    root = _mnist_root()
    if root is None:
        pytest.skip(
            "sMNIST IDX files not present under $SPIKESEQ_DATA_ROOT and this "
            "environment has no network route to fetch them; run on a host "
            "with the four IDX files to exercise the full desk-scale check")
    common = dict(task="sMNIST", n_layers=2, features=128, state_dim=2,
                  mixer="glu", residual="after_mixing", norm="layer",
                  init="s4d_inv", lr=0.01, weight_decay=0.01, batch_size=64,
                  epochs=10, data_root=root, seed=0)
    spiking = TrainConfig(activation="binary_spike", surrogate="arctan",
                          out_dir=str(tmp_path / "smnist_spike"), **common).validate()
    baseline = TrainConfig(activation="gelu",
                           out_dir=str(tmp_path / "smnist_gelu"), **common).validate()
    accs = {}
    for name, cfg in (("binary", spiking), ("continuous", baseline)):
        _, metrics = tr.train(cfg, log=print)
        with open(metrics) as f:
            rows = f.read().strip().splitlines()[1:]
        accs[name] = max(float(r.split(",")[3]) for r in rows)
    assert accs["binary"] >= 0.95
    assert accs["continuous"] >= 0.97
    report(7, f"binary {accs['binary']:.4f}, continuous {accs['continuous']:.4f}")


# -- 8 / 9: long-range probe -------------------------------------------

_PROBE_CACHE = {}


def _probe_accuracy(tmp_root, activation, surrogate, seed, features, epochs, lr):
    key = (activation, surrogate, seed, features, epochs, lr)
    if key not in _PROBE_CACHE:
        cfg = TrainConfig(
            task="synth", n_layers=2, features=features, state_dim=2,
            activation=activation, surrogate=surrogate, mixer="glu",
            residual="after_mixing", norm="layer", init="s4d_inv",
            bidirectional=False, lr=lr, weight_decay=0.0, batch_size=32,
            epochs=epochs, synth_length=1024, synth_classes=2,
            synth_train=2000, synth_test=500, seed=seed,
            delta_min=0.0001, delta_max=0.01,
            out_dir=os.path.join(tmp_root, f"{activation}-{surrogate}-{seed}"),
        ).validate()
        _, metrics = tr.train(cfg, log=lambda *_: None)
        with open(metrics) as f:
            rows = f.read().strip().splitlines()[1:]
        _PROBE_CACHE[key] = max(float(r.split(",")[3]) for r in rows)
    return _PROBE_CACHE[key]


@pytest.mark.slow
def test_criterion_08_long_range_probe(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("probe8"))
    t0 = time.monotonic()
    cont = _probe_accuracy(root, "gelu", "arctan", 0, 16, 20, 0.005)
    spike = _probe_accuracy(root, "binary_spike", "arctan", 0, 16, 35, 0.005)
    elapsed = time.monotonic() - t0
    assert cont >= 0.90
    assert spike > 0.70
    assert elapsed < 1800.0
    report(8, f"continuous {cont:.3f}, binary {spike:.3f}, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_09_surrogate_direction(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("probe9"))
    for seed in (0, 1, 2):
        at = _probe_accuracy(root, "binary_spike", "arctan", seed, 16, 35, 0.005)
        fs = _probe_accuracy(root, "binary_spike", "fast_sigmoid", seed, 16, 35, 0.005)
        assert at >= fs - 0.02, f"seed {seed}: arctan {at:.3f} vs fast sigmoid {fs:.3f}"
    report(9, "arctan >= fast_sigmoid - 2pp on 3 seeds")


# -- 10: inference parity ----------------------------------------------

def test_criterion_10_inference_parity(tmp_path):
    cfg = TrainConfig(task="synth", n_layers=2, features=8, state_dim=4,
                      activation="gelu", mixer="glu", residual="after_mixing",
                      epochs=1, batch_size=32, synth_length=64,
                      synth_classes=2, synth_train=64, synth_test=32,
                      out_dir=str(tmp_path / "parity")).validate()
    best, _ = tr.train(cfg, log=lambda *_: None)
    model, _ = tr.load_model(best)
    rng = np.random.default_rng(17)
    worst = 0.0
    sizes = set()
    for _ in range(50):
        seq = rng.random(64)
        conv = model.forward(seq[None, :]).data[0]
        it = model.forward_iterative(seq)
        sizes.add(model.last_scan_state_elems)
        worst = max(worst, rel_err(it, conv))
    # a longer sequence reuses the exact same recurrent state footprint
    model.forward_iterative(rng.random(640))
    sizes.add(model.last_scan_state_elems)
    assert worst < 1e-4
    assert sizes == {cfg.n_layers * cfg.features * cfg.state_dim // 2}
    report(10, f"worst rel err {worst:.2e}, constant state {sizes.pop()} modes")
