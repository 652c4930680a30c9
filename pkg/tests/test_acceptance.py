"""Exit criteria.  Each test prints one ``[PASS]``/``[FAIL]`` line via ``report``."""

import time

import numpy as np
import pytest

from gwfnet import layers as L
from gwfnet.cli import main
from gwfnet.model import build_preset, total_parameters
from gwfnet.sampler import FrameSequence, aggregate_video, aggregate_window, gaussian_weights
from gwfnet.sequence import LSTMParams, lstm_backward, lstm_classify
from gwfnet.synthetic import make_moving_square_dataset
from gwfnet.training import TrainingConfig, evaluate, fine_tune, train

from oracles import central_difference, conv3d_loops, max_rel_error

pytestmark = pytest.mark.acceptance

KTH_CHAIN = [(32, 52, 18, 16), (16, 26, 18, 16), (12, 22, 16, 16), (6, 11, 16, 16),
             (4, 9, 14, 32), (2, 7, 12, 32), (5376,), (256,)]
WEIZMANN_CHAIN = [(62, 46, 18, 16), (31, 23, 18, 16), (27, 19, 16, 16), (13, 9, 16, 16),
                  (11, 7, 14, 32), (9, 5, 12, 32), (17280,), (256,)]

DESK_CONFIG = TrainingConfig(base_lr=1e-3, epochs=200, batch_size=4, seed=0)


def test_criterion_1_parameter_counts(report):
    start = time.perf_counter()
    kth = total_parameters(build_preset("kth", init="zeros"))
    weiz = total_parameters(build_preset("weizmann", init="zeros"))
    elapsed = time.perf_counter() - start
    ok = kth == 1_437_712 and weiz == 4_485_136 and elapsed < 1.0
    assert report("1 parameter counts", ok, f"kth={kth} weizmann={weiz} in {elapsed:.2f}s")


def test_criterion_2_shape_chains(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    got = {}
    for preset in ("kth", "weizmann"):
        model = build_preset(preset, rng=0)
        h, w, t, _ = model.input_shape
        _, state = model.forward(rng.random((h, w, t)))
        got[preset] = [s for layer, s in zip(model.layers, state.shapes) if "." not in layer.name]
    elapsed = time.perf_counter() - start
    ok = got["kth"] == KTH_CHAIN and got["weizmann"] == WEIZMANN_CHAIN and elapsed < 5.0
    assert report("2 shape chains", ok, f"kth {got['kth'][-3:]} weizmann {got['weizmann'][-3:]} in {elapsed:.2f}s")


def _layer_errors(rng):
    errs = {}
    x = rng.standard_normal((5, 5, 4, 2))
    conv = L.Conv3DLayer(rng.standard_normal((3, 3, 2, 2, 3)), rng.standard_normal(3))
    R = rng.standard_normal((3, 3, 3, 3))
    f = lambda: float(np.sum(L.conv3d_forward(conv, x) * R))
    gx, gk, gb = L.conv3d_backward(conv, x, R)
    errs["conv3d"] = max(max_rel_error(gx, central_difference(f, x)), max_rel_error(gk, central_difference(f, conv.kernels)),
                         max_rel_error(gb, central_difference(f, conv.bias)))

    x = rng.standard_normal((7, 6, 3, 2))
    pool = L.MaxPool3DLayer((2, 2, 1))
    y, rec = L.maxpool3d_forward(pool, x)
    R = rng.standard_normal(y.shape)
    f = lambda: float(np.sum(L.maxpool3d_forward(pool, x)[0] * R))
    errs["maxpool3d"] = max_rel_error(L.maxpool3d_backward(rec, R), central_difference(f, x))

    x = rng.standard_normal(20)
    x[np.abs(x) < 1e-3] = 0.5
    R = rng.standard_normal(20)
    errs["relu"] = max_rel_error(L.relu_backward(x, R), central_difference(lambda: float(np.sum(L.relu(x) * R)), x))

    drop = L.DropoutLayer(0.4)
    _, mask = L.dropout_forward(drop, x, "train", np.random.default_rng(1))
    f = lambda: float(np.sum(L.dropout_forward(drop, x, "train", np.random.default_rng(1))[0] * R))
    errs["dropout"] = max_rel_error(L.dropout_backward(mask, R), central_difference(f, x))

    fc = L.FCLayer(rng.standard_normal((4, 7)), rng.standard_normal(4))
    x = rng.standard_normal(7)
    R = rng.standard_normal(4)
    f = lambda: float(np.sum(L.fc_forward(fc, x) * R))
    gx, gw, gb = L.fc_backward(fc, x, R)
    errs["fc"] = max(max_rel_error(gx, central_difference(f, x)), max_rel_error(gw, central_difference(f, fc.weights)),
                     max_rel_error(gb, central_difference(f, fc.bias)))

    logits = rng.standard_normal(10)
    _, g = L.softmax_cross_entropy(logits, 3)
    errs["softmax"] = max_rel_error(g, central_difference(lambda: L.softmax_cross_entropy(logits, 3)[0], logits))
    return errs


def _network_error(seed):
    rng = np.random.default_rng(seed)
    model = build_preset("tiny", window_count=10, rng=seed, dtype=np.float64)
    for p in model.named_parameters().values():
        if p.ndim == 1:
            p[...] = 0.2 + 0.05 * rng.standard_normal(p.shape)
    x = rng.random((8, 8, 10, 1))
    R = rng.standard_normal(model.feature_size)
    worst = 0.0
    for mode in ("eval", "train"):
        f = lambda: float(np.sum(model.forward(x, mode, np.random.default_rng(7))[0] * R))
        _, state = model.forward(x, mode, np.random.default_rng(7))
        grads = model.backward(state, R)
        for name, p in model.named_parameters().items():
            numeric = central_difference(f, p)
            if not numeric.any():
                return float("inf")
            worst = max(worst, max_rel_error(grads[name], numeric))
    return worst


def _lstm_error(seed):
    rng = np.random.default_rng(seed)
    params = LSTMParams.create(7, 3, hidden_size=5, rng=rng)
    for k in ("bi", "bf", "bg", "bo"):
        params.arrays[k][...] = 0.1 * rng.standard_normal(5)
    xs = rng.standard_normal((4, 7))
    logits, trace = lstm_classify(params, xs)
    _, gl = L.softmax_cross_entropy(logits, 1)
    grads = lstm_backward(params, trace, gl, need_input_grad=True)
    f = lambda: L.softmax_cross_entropy(lstm_classify(params, xs)[0], 1)[0]
    worst = max_rel_error(grads["input"], central_difference(f, xs))
    for name, p in params.arrays.items():
        worst = max(worst, max_rel_error(grads[name], central_difference(f, p)))
    return worst


def test_criterion_3_gradients(report):
    start = time.perf_counter()
    errs = _layer_errors(np.random.default_rng(0))
    errs["network_8x8x10"] = _network_error(5)
    errs["lstm_bptt"] = _lstm_error(0)
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    ok = worst <= 1e-4 and elapsed < 120
    detail = " ".join(f"{k}={v:.2g}" for k, v in errs.items())
    assert report("3 gradient verification", ok, f"max {worst:.2g}; {detail}; {elapsed:.1f}s")


def test_criterion_4_sampler(report):
    w5 = gaussian_weights(5).weights
    dev = float(np.max(np.abs(w5 - np.array([0.13, 0.6, 1.0, 0.6, 0.13]))))
    norm = max(abs(float(np.sum(gaussian_weights(L_).normalized())) - 1.0) for L_ in range(3, 9))
    rng = np.random.default_rng(0)
    T = aggregate_video(FrameSequence(rng.random((100, 6, 7))), 5, 100).voxels.shape[2]
    frame = rng.random((6, 7))
    fixed = max(float(np.max(np.abs(aggregate_window(np.stack([frame] * L_), gaussian_weights(L_)) - frame)))
                for L_ in range(3, 9))
    ok = dev <= 0.01 and norm <= 1e-12 and T == 20 and fixed <= 1e-12
    assert report("4 sampler fidelity", ok,
                  f"w5={np.round(w5, 4).tolist()} dev={dev:.3g} sum_err={norm:.2g} frames={T} fixed_err={fixed:.2g}")


def test_criterion_5_conv_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        h, w = rng.integers(3, 9, size=2)
        t = rng.integers(3, 7)
        cin, cout = rng.integers(1, 4, size=2)
        kernel = tuple(int(rng.integers(1, 4)) for _ in range(3))
        x = rng.standard_normal((h, w, t, cin))
        layer = L.Conv3DLayer(rng.standard_normal(kernel + (cin, cout)), rng.standard_normal(cout))
        worst = max(worst, float(np.max(np.abs(L.conv3d_forward(layer, x) - conv3d_loops(x, layer.kernels, layer.bias)))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 30
    assert report("5 convolution oracle", ok, f"max abs diff {worst:.2g} over 20 instances in {elapsed:.1f}s")


@pytest.fixture(scope="module")
def desk_run():
    data = make_moving_square_dataset(6, seed=1)
    train_set, test_set = data.subset(range(8)), data.subset(range(8, 12))
    start = time.perf_counter()
    art, logs = train(build_preset("mini", rng=0), None, train_set, DESK_CONFIG)
    train_acc = evaluate(art, train_set).accuracy
    test_acc = evaluate(art, test_set).accuracy
    return art, data, train_acc, test_acc, time.perf_counter() - start


def test_criterion_6_desk_learning(report, desk_run):
    _, _, train_acc, test_acc, elapsed = desk_run
    ok = train_acc == 1.0 and test_acc >= 0.75 and elapsed < 600
    assert report("6 desk-scale learning", ok,
                  f"train_acc={train_acc:.3g} test_acc={test_acc:.3g} in {elapsed:.1f}s (mini preset, 200 epochs)")


def test_criterion_7_determinism(report, tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path / "raw"), "--per-class", "4", "--seed", "3"]) == 0
    assert main(["preprocess", "--manifest", str(tmp_path / "raw" / "manifest.tsv"), "--out-dir",
                 str(tmp_path / "clips"), "--preset", "mini"]) == 0
    for run in ("a", "b"):
        assert main(["train", "--manifest", str(tmp_path / "clips" / "manifest.tsv"), "--preset", "mini",
                     "--folds", "2", "--epochs", "5", "--seed", "11", "--lr", "1e-3", "--batch-size", "4",
                     "--out-dir", str(tmp_path / run)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    ok = all(same) and any(f.endswith(".ckpt") for f in files) and any(f.endswith(".tsv") for f in files)
    assert report("7 determinism", ok, f"{sum(same)}/{len(files)} files byte-identical")


def test_criterion_8_transfer_freeze(report, desk_run):
    art, data, *_ = desk_run
    new = make_moving_square_dataset(4, seed=9, prefix="ft")
    tuned, _ = fine_tune(art, new, TrainingConfig(base_lr=1e-2, epochs=5, batch_size=4, seed=1),
                         trainable=("Conv4", "FC1"))
    before, after = art.model.named_parameters(), tuned.model.named_parameters()
    early = [n for n in before if n.split(".")[0] in ("Conv1", "Conv2", "Conv3")]
    late = [n for n in before if n.split(".")[0] in ("Conv4", "FC1")]
    frozen = all(before[n].tobytes() == after[n].tobytes() for n in early)
    moved = all(before[n].tobytes() != after[n].tobytes() for n in late)
    assert report("8 transfer-learning freeze", frozen and moved,
                  f"{len(early)} Conv1-Conv3 tensors bit-identical, {len(late)} Conv4/FC1 tensors updated")


def test_criterion_9_full_scale_accuracy_not_reproduced(report):
    report("9 full-dataset accuracies", None,
           "informational: requires the full KTH/WEIZMANN data and long training; the harness runs them "
           "via `gwfnet train` when data is supplied")
