"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line (also echoed in the pytest
terminal summary) and then asserts the criterion at its stated tolerance.
Run with ``pytest tests/test_acceptance.py -v -s`` to see lines inline.
"""
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentcore import autodiff as ad
from latentcore.checkpoint import load_checkpoint, save_checkpoint
from latentcore.cli import main
from latentcore.data import DomainShift, SyntheticDomainSpec, generate_dataset, make_domain_pair
from latentcore.gradcheck import check_gradients
from latentcore.metrics import MAX_POINTS, ScoreConfig, TaskScoreParams, decathlon_score, escore, round_score
from latentcore.network import ArchConfig, build, parameter_budget, predict, set_trainable, trainable_params
from latentcore.tensor import mode_product, unfold
from latentcore.trainer import LAMBDA_SWEEP, TrainConfig, adapt_task, evaluate, orthogonality_loss, total_loss, train_source
from latentcore.tucker import GroupLayout, ParamGroup, TaskFactorSet, collect, init_source, materialize
from oracles import conv2d_loops, mode_product_loops, relative_error, unfold_loops

RESULTS = []


def verdict(number, ok, detail, elapsed=None, limit=None):
    """Record and print the criterion line, then fail the test if needed."""
    in_time = limit is None or elapsed <= limit
    passed = bool(ok) and in_time
    timing = "" if elapsed is None else f" runtime={elapsed:.2f}s" + ("" if limit is None else f" limit={limit:g}s")
    line = f"criterion={number} {'PASS' if passed else 'FAIL'} {detail}{timing}"
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def test_c01_parameter_counts(capsys):
    t0 = time.perf_counter()
    code = main(["analyze-params"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out.splitlines()
    fields = {}
    for line in out:
        fields.update(tok.split("=", 1) for tok in line.split() if "=" in tok)
    layerwise = int(fields["layerwise_tucker"])
    grouped = int(fields["grouped_tucker"])
    ratio = int(fields["ratio_layerwise_grouped_rounded"])
    ok = code == 0 and layerwise == 1_376_688 and grouped == 172_068 and ratio == 8
    verdict(1, ok, f"layerwise={layerwise} (want 1376688) grouped={grouped} (want 172068) ratio={ratio} (want 8)",
            elapsed, 1.0)


def test_c02_escore():
    a, b = round_score(escore(3585, 1.35)), round_score(escore(2851, 2.0))
    verdict(2, (a, b) == (2656, 1425), f"escore(3585,1.35)->{a} (want 2656) escore(2851,2.0)->{b} (want 1425)")


def test_c03_tensor_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {"mode_product": 0.0, "unfold": 0.0, "conv2d": 0.0}
    counts = dict.fromkeys(worst, 0)
    for _ in range(120):
        order = int(rng.integers(1, 5))
        shape = tuple(int(d) for d in rng.integers(1, 5, size=order))
        x = rng.standard_normal(shape)
        n = int(rng.integers(order))
        m = rng.standard_normal((int(rng.integers(1, 5)), shape[n]))
        worst["mode_product"] = max(worst["mode_product"],
                                    relative_error(mode_product(x, m, n), mode_product_loops(x, m, n)))
        worst["unfold"] = max(worst["unfold"], relative_error(unfold(x, n).matrix, unfold_loops(x, n)))
        counts["mode_product"] += 1
        counts["unfold"] += 1
    for _ in range(120):
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        size = int(rng.integers(k, 7))
        x = rng.standard_normal((int(rng.integers(1, 3)), cin, size, size))
        w = rng.standard_normal((cout, cin, k, k))
        got = ad.conv2d(ad.constant(x), ad.constant(w), stride=stride, padding=pad).data
        worst["conv2d"] = max(worst["conv2d"], relative_error(got, conv2d_loops(x, w, stride, pad)))
        counts["conv2d"] += 1
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-10 for v in worst.values()) and min(counts.values()) >= 100
    detail = " ".join(f"{k}_max_rel={v:.2e}(n={counts[k]})" for k, v in worst.items())
    verdict(3, ok, detail + " tol=1e-10", elapsed, 60.0)


def test_c04_tucker_exactness():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    errors = []
    for cfg in (ArchConfig.desk(), ArchConfig.default()):
        for layout in cfg.layouts():
            group = ParamGroup(layout, [rng.normal(0.0, 0.002, layout.kernel_shape) for _ in range(layout.n_layers)])
            core, factors = init_source(group)
            errors.append(relative_error(collect(materialize(core, factors)), collect(group)))
    elapsed = time.perf_counter() - t0
    verdict(4, max(errors) <= 1e-8, f"max_rel_frobenius={max(errors):.2e} groups={len(errors)} tol=1e-8",
            elapsed, 120.0)


def test_c05_gradients():
    """Every non-core tensor is checked on all coordinates; each core on 512."""
    model = build(ArchConfig.desk(num_classes=3), seed=1)
    rng = np.random.default_rng(1)
    images = rng.random((4, 3, 32, 32))
    labels = rng.integers(0, 3, size=4)
    selected = trainable_params(model, "source", "source")
    set_trainable(model, selected)

    def loss_fn():
        return total_loss(model, "source", images, labels, 1e-3, train=True, update_stats=False)[0]

    cores = [(n, p) for n, p in selected if n.startswith("core/")]
    rest = [(n, p) for n, p in selected if not n.startswith("core/")]
    t0 = time.perf_counter()
    try:
        reports = [check_gradients(loss_fn, rest, max_coords=None, seed=1),
                   check_gradients(loss_fn, cores, max_coords=512, seed=1)]
    finally:
        set_trainable(model, [])
    elapsed = time.perf_counter() - t0
    params = [p for r in reports for p in r.params]
    worst = max(p.max_error for p in params)
    checked = sum(p.checked for p in params)
    refined = sum(p.refined for p in params)
    ok = worst <= 1e-4 and len(params) == len(selected)
    verdict(5, ok, f"tensors={len(params)} coords={checked} refined={refined} max_rel_error={worst:.2e} "
                   f"tol=1e-4 atol=1e-6", elapsed, 600.0)


def test_c06_forgetting():
    t0 = time.perf_counter()
    src, _ = make_domain_pair(3, 20, 32, seed=0)
    model = build(ArchConfig.desk(num_classes=3), seed=0)
    train_source(model, src, TrainConfig.desk(epochs=2))
    probe = np.random.default_rng(6).random((32, 3, 32, 32))
    logits = predict(model, "source", probe)
    cores = [c.values.tobytes() for c in model.cores]
    for i, shift in enumerate([dict(invert=True), dict(rotation=1)]):
        data = generate_dataset(SyntheticDomainSpec("glyphs", 4, 15, 32, DomainShift(**shift), seed=i + 10))
        model.add_task(f"target{i}", 4, seed=i)
        adapt_task(model, f"target{i}", data, TrainConfig.desk(epochs=2))
    same_logits = np.array_equal(predict(model, "source", probe), logits)
    same_cores = [c.values.tobytes() for c in model.cores] == cores
    elapsed = time.perf_counter() - t0
    verdict(6, same_logits and same_cores, f"logits_bit_identical={same_logits} cores_bit_identical={same_cores}",
            elapsed, 600.0)


def test_c07_trainable_fraction():
    budget = parameter_budget(ArchConfig.default())
    frac = budget["adapt"] / budget["total"]
    verdict(7, 0.025 <= frac <= 0.045, f"adapt={budget['adapt']} total={budget['total']} fraction={frac:.4%}")


def test_c08_orthogonality():
    lay = GroupLayout((4, 4, 3, 3, 2, 4))
    ident = TaskFactorSet("t", lay, [np.eye(d) for d in lay.dims])
    zero = orthogonality_loss(ident, 1e-1).item()
    hand = orthogonality_loss([np.array([[2.0, 0.0], [0.0, 1.0]])], 1.0).item()
    rng = np.random.default_rng(3)
    fs = [rng.standard_normal((4, 3)) for _ in range(6)]
    base = orthogonality_loss(fs, 1.0).item()
    linear = all(orthogonality_loss(fs, lam).item() == pytest.approx(lam * base, rel=1e-14) for lam in LAMBDA_SWEEP)
    verdict(8, zero == 0.0 and hand == 9.0 and linear, f"identity={zero} hand_2x2={hand} (want 9.0) linear={linear}")


def test_c09_adaptation_beats_head_only():
    t0 = time.perf_counter()
    adapt_acc, head_acc = [], []
    for seed in range(3):
        src, tgt = make_domain_pair(3, 200, 32, "shapes", seed=seed)
        model = build(ArchConfig.desk(num_classes=3), seed=seed)
        train_source(model, src, TrainConfig.desk(seed=seed))
        train, test = tgt.split(0.5, seed=seed)
        budget = TrainConfig.desk(epochs=15, lr_step=10, seed=seed)
        for mode, sink in (("adapt", adapt_acc), ("head", head_acc)):
            model.add_task(mode, 3, seed=seed)
            adapt_task(model, mode, train, budget, mode=mode)
            sink.append(evaluate(model, mode, test)[1])
    elapsed = time.perf_counter() - t0
    a, h = float(np.median(adapt_acc)), float(np.median(head_acc))
    verdict(9, a >= h, f"median_adapt={a:.4f} median_head={h:.4f} adapt={adapt_acc} head={head_acc}",
            elapsed, 1800.0)


@st.composite
def score_cases(draw):
    n = draw(st.integers(1, 10))
    tasks = {f"t{i}": TaskScoreParams(draw(st.floats(0.005, 0.5)), draw(st.floats(0.5, 4.0))) for i in range(n)}
    errors = {k: draw(st.floats(0.0, 1.0)) for k in tasks}
    bump = draw(st.sampled_from(sorted(tasks)))
    worse = draw(st.floats(errors[bump], 1.0))
    return ScoreConfig(tasks), errors, bump, worse


def test_c10_decathlon_properties():
    failures = []

    @settings(max_examples=1000, deadline=None, derandomize=True, database=None)
    @given(score_cases())
    def prop(case):
        cfg, errors, bump, worse = case
        ref = {k: p.reference_error for k, p in cfg.tasks.items()}
        if all(v <= 1.0 for v in ref.values()) and decathlon_score(ref, cfg) != 0.0:
            failures.append(("zero", errors))
        cap = decathlon_score({k: 0.0 for k in cfg.tasks}, cfg)
        if abs(cap - MAX_POINTS * len(cfg.tasks)) > 1e-9 * cap:
            failures.append(("cap", cap))
        if decathlon_score({**errors, bump: worse}, cfg) > decathlon_score(errors, cfg):
            failures.append(("monotone", errors, bump, worse))

    t0 = time.perf_counter()
    prop()
    elapsed = time.perf_counter() - t0
    verdict(10, not failures, f"configs=1000 violations={len(failures)}", elapsed, 10.0)


def test_c11_checkpoint_round_trip(tmp_path):
    t0 = time.perf_counter()
    model = build(ArchConfig.desk(num_classes=3), seed=2)
    model.freeze_cores()
    model.add_task("t1", 5, seed=3)
    probe = np.random.default_rng(11).random((8, 3, 32, 32))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    tensors = all(na == nb and np.array_equal(pa.data, pb.data)
                  for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()))
    buffers = all(np.array_equal(a, b) for tid in model.tasks
                  for (_, a), (_, b) in zip(model.task(tid).named_buffers(), back.task(tid).named_buffers()))
    logits = all(np.array_equal(predict(model, t, probe), predict(back, t, probe)) for t in model.tasks)
    elapsed = time.perf_counter() - t0
    verdict(11, tensors and buffers and logits,
            f"tensors_bit_exact={tensors} buffers_bit_exact={buffers} logits_identical={logits}", elapsed, 60.0)
