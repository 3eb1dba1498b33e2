"""Acceptance criteria 1-10.

Each test records one pass/fail line per criterion; the lines are echoed in
the pytest terminal summary under "acceptance criteria".
"""

import math
import re
import time

import numpy as np

from helpers import ACCEPT_SEED, random_scene, toy_scenes
from relmo import tensor as tc
from relmo.analysis import pcc, pcc_matrix
from relmo.cli import main
from relmo.data import (
    Scene,
    SyntheticConfig,
    generate_scenes,
    generate_synthetic,
    load_dataset,
    quantize,
    reconstruct_positions,
    save_dataset,
    velocity_augment,
)
from relmo.metrics import mpjpe, vim_at
from relmo.model import ModelConfig, alpha_weight, forward, init_params, load_checkpoint, save_checkpoint
from relmo.training import evaluate, loss
from relmo.verify import run_gradcheck

TOY = ModelConfig.toy()


def gradcheck_toy(config: ModelConfig, capsys=None):
    """Run the CLI gradient check (or the library call for a non-default config)."""
    start = time.perf_counter()
    if capsys is not None:
        code = main(["gradcheck", "--seed", str(ACCEPT_SEED)])
        out = capsys.readouterr().out
        worst = max(float(m) for m in re.findall(r"max relative error ([0-9.e+-]+)", out))
        return code == 0, worst, time.perf_counter() - start
    report = run_gradcheck(config, ACCEPT_SEED, eps=1e-5)
    return not report.failures(1e-4), report.max_error, time.perf_counter() - start


def equivariance_error(config_flags: dict) -> float:
    worst = 0.0
    for n in (2, 3, 5):
        cfg = ModelConfig.toy(N=n, **config_flags)
        params = init_params(cfg, n)
        rng = np.random.default_rng(100 + n)
        # random, non-zero decoder and decay so every branch reaches the output
        for name, t in params.named_parameters():
            if name.startswith("decoder") or name == "inter.decay":
                t.data[...] = rng.normal(scale=0.2, size=t.shape)
        for _ in range(5):
            s = random_scene(rng, n, cfg.T, cfg.P, cfg.J)
            perm = rng.permutation(n)
            a = forward(s, params, cfg).data
            b = forward(s.permute_persons(perm), params, cfg).data
            worst = max(worst, float(np.max(np.abs(a[perm] - b))))
    return worst


def first_step_below(state, threshold: float):
    """Optimizer step after which the end-of-epoch training MPJPE first fell below ``threshold``."""
    return next((row["step"] for row in state.epoch_log if row["mpjpe"] < threshold), None)


def test_criterion_01_gradient_suite(record_criterion, capsys):
    ok, worst, secs = gradcheck_toy(TOY, capsys)
    passed = ok and worst < 1e-4 and secs < 60
    record_criterion(1, passed, f"toy gradcheck max rel err {worst:.2e} (< 1e-4), {secs:.1f} s (< 60 s)")
    assert passed


def test_criterion_02_metric_oracles(record_criterion):
    def loop_vim(p, t, f):
        total = 0.0
        for n in range(p.shape[0]):
            total += math.sqrt(sum((t[n, f - 1, j, c] - p[n, f - 1, j, c]) ** 2 for j in range(p.shape[2]) for c in range(3)))
        return total / p.shape[0]

    def loop_mpjpe(p, t):
        n, h, jj, _ = p.shape
        total = 0.0
        for a in range(n):
            for f in range(h):
                for j in range(jj):
                    total += math.sqrt(sum((t[a, f, j, c] - p[a, f, j, c]) ** 2 for c in range(3)))
        return total / (n * h * jj)

    rng = np.random.default_rng(ACCEPT_SEED)
    worst = 0.0
    zero_exact = True
    for _ in range(100):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 8)), int(rng.integers(1, 8)), 3)
        p, t = rng.normal(size=shape), rng.normal(size=shape)
        worst = max(worst, abs(mpjpe(p, t) - loop_mpjpe(p, t)))
        for f in range(1, shape[1] + 1):
            worst = max(worst, abs(vim_at(p, t, f) - loop_vim(p, t, f)))
        zero_exact &= mpjpe(t, t) == 0.0 and all(vim_at(t, t, f) == 0.0 for f in range(1, shape[1] + 1))
    passed = worst <= 1e-12 and zero_exact
    record_criterion(2, passed, f"100 random tensors, max |metric - loop| {worst:.1e} (<= 1e-12), pred == truth gives 0: {zero_exact}")
    assert passed


def test_criterion_03_attention_rows(record_criterion):
    scene = toy_scenes(1)[0]
    params = init_params(TOY, ACCEPT_SEED)
    deviation, count = 0.0, 0
    for cfg in (TOY, ModelConfig.toy(N=3)):
        s = scene if cfg.N == 2 else random_scene(np.random.default_rng(3), 3, cfg.T, cfg.P, cfg.J)
        for training in (False, True):
            with tc.observe_softmax() as seen:
                forward(s, params if cfg is TOY else init_params(cfg, 1), cfg, training=training)
            for probs in seen:
                deviation = max(deviation, float(np.max(np.abs(probs.sum(axis=-1) - 1.0))))
                count += 1
    passed = count > 0 and deviation <= 1e-12
    record_criterion(3, passed, f"{count} softmax outputs over full forwards, max |row sum - 1| {deviation:.1e} (<= 1e-12)")
    assert passed


def test_criterion_04_alpha_law(record_criterion):
    rng = np.random.default_rng(ACCEPT_SEED)
    base = rng.normal(size=(1, TOY.T + TOY.P, TOY.J, 3))
    grid = np.linspace(0.0, 20.0, 100)
    ok = True
    for lam in (-4.0, -1.0, 0.0, 0.5, 3.0):
        values = []
        for d in grid:
            s = Scene(np.concatenate([base, base + np.array([d, 0.0, 0.0])]), TOY.T)
            values.append(alpha_weight(s, 0, 1, lam))
        values = np.array(values)
        ok &= bool(np.all((values > 0) & (values <= 1)))
        ok &= values[0] == 1.0
        ok &= bool(np.all(np.diff(values) < 0))
    record_criterion(4, ok, "alpha in (0, 1], alpha(0) = 1, strictly decreasing over a 100-point grid for 5 decay values")
    assert ok


def test_criterion_05_velocity_round_trip(record_criterion):
    rng = np.random.default_rng(ACCEPT_SEED)
    exact = 0
    for i in range(100):
        if i % 2:
            cfg = SyntheticConfig(
                N=int(rng.integers(1, 5)), T=int(rng.integers(2, 20)), P=2, J=int(rng.integers(2, 16)),
                seed=int(rng.integers(2**31)), interaction_strength=float(rng.uniform(0, 1)),
            )
            s = generate_synthetic(cfg)
        else:
            shape = (int(rng.integers(1, 5)), int(rng.integers(3, 20)), int(rng.integers(2, 16)), 3)
            s = Scene(quantize(rng.uniform(-1e3, 1e3, size=shape)), shape[1] - 1)
        back = reconstruct_positions(velocity_augment(s), s.observed[:, 0], axis=1)
        exact += bool(np.array_equal(back, s.observed))
    record_criterion(5, exact == 100, f"{exact}/100 random scenes reconstructed bit-exactly")
    assert exact == 100


def test_criterion_06_permutation_equivariance(record_criterion):
    worst = equivariance_error({})
    record_criterion(6, worst <= 1e-9, f"N in {{2, 3, 5}}, max |forward(perm) - perm(forward)| {worst:.1e} (<= 1e-9)")
    assert worst <= 1e-9


def test_criterion_07_pcc(record_criterion):
    rng = np.random.default_rng(ACCEPT_SEED)
    bounded = unit = symmetric = affine = True
    for _ in range(200):
        n = int(rng.integers(3, 40))
        x, y = rng.normal(size=n) * rng.uniform(0.1, 10), rng.normal(size=n)
        r = pcc(x, y)
        bounded &= -1 <= r <= 1
        unit &= abs(pcc(x, x) - 1) <= 1e-12
        symmetric &= pcc(y, x) == r
        a, c = rng.uniform(0.01, 100, size=2)
        b, d = rng.uniform(-100, 100, size=2)
        affine &= abs(pcc(a * x + b, c * y + d) - r) <= 1e-10

    def mean_abs(strength):
        scenes = generate_scenes(16, SyntheticConfig(seed=ACCEPT_SEED, interaction_strength=strength))
        return float(np.mean([pcc_matrix(s, 0, 1).mean_abs() for s in scenes]))

    coupled, free = mean_abs(1.0), mean_abs(0.0)
    passed = bounded and unit and symmetric and affine and coupled > free
    record_criterion(
        7,
        passed,
        f"bounds {bounded}, pcc(x,x)=1 {unit}, symmetry {symmetric}, affine {affine}; "
        f"mean |PCC| coupled {coupled:.3f} > uncoupled {free:.3f}",
    )
    assert passed


def check_overfit(state, scenes, config, seconds, threshold):
    step = first_step_below(state, threshold)
    final = state.epoch_log[-1]["mpjpe"]
    additive = max(abs(r["loss"] - (r["loss_position"] + r["loss_velocity"])) for r in state.step_log)
    # independent check of the additivity on the final predictions
    pred = np.concatenate([forward(s, state.params, config, training=False).data for s in scenes])
    truth = np.concatenate([s.future for s in scenes])
    last = np.concatenate([s.last_observed for s in scenes])
    split = loss(pred, truth, last, "position").item() + loss(pred, truth, last, "velocity").item()
    additive = max(additive, abs(loss(pred, truth, last, "both").item() - split))
    ok = step is not None and step <= 2000 and state.step <= 2000 and seconds < 300 and additive <= 1e-12
    detail = (
        f"MPJPE < {threshold} first at step {step} (final {final:.4f} after {state.step} steps), "
        f"{seconds:.0f} s (< 300 s), max |both - (position + velocity)| {additive:.1e}"
    )
    return ok, detail


def test_criterion_08_overfit(record_criterion, overfit_run):
    config, scenes, state, seconds = overfit_run()
    ok, detail = check_overfit(state, scenes, config, seconds, 0.01)
    record_criterion(8, ok, detail)
    assert ok


def test_criterion_09_no_inter_isolation(record_criterion):
    cfg = ModelConfig.toy(no_inter=True)
    params = init_params(cfg, ACCEPT_SEED)
    rng = np.random.default_rng(ACCEPT_SEED)
    for name, t in params.named_parameters():
        if name.startswith("decoder"):
            t.data[...] = rng.normal(scale=0.2, size=t.shape)
    identical = True
    for s in toy_scenes(8):
        base = forward(s, params, cfg).data[0]
        for _ in range(5):
            c = s.coords.copy()
            c[1] = c[1] * rng.uniform(-3, 3) + rng.normal(scale=5.0, size=c[1].shape)
            identical &= np.array_equal(forward(Scene(c, s.T), params, cfg).data[0], base)
    record_criterion(9, identical, f"no_inter: person 1 bit-identical under 40 perturbations of person 2: {identical}")
    assert identical


def test_criterion_09_no_velocity_input(record_criterion, overfit_run):
    cfg = ModelConfig.toy(no_velocity_input=True)
    grad_ok, worst, secs = gradcheck_toy(cfg)
    eq = equivariance_error({"no_velocity_input": True})
    config, scenes, state, seconds = overfit_run(no_velocity_input=True)
    fit_ok, detail = check_overfit(state, scenes, config, seconds, 0.01)
    ok = grad_ok and secs < 60 and eq <= 1e-9 and fit_ok
    record_criterion(9, ok, f"no_velocity_input: gradcheck {worst:.1e}, equivariance {eq:.1e}, {detail}")
    assert ok


def test_criterion_09_no_iam(record_criterion, overfit_run):
    config, scenes, state, seconds = overfit_run(no_iam=True)
    shapes = forward(scenes[0], state.params, config).shape == forward(scenes[0], init_params(TOY, 0), TOY).shape
    fit_ok, detail = check_overfit(state, scenes, config, seconds, 0.05)
    ok = shapes and fit_ok
    record_criterion(9, ok, f"no_iam: shapes unchanged {shapes}, {detail}")
    assert ok


def test_criterion_10_serialization(record_criterion, overfit_run, tmp_path, capsys):
    config, scenes, state, _ = overfit_run()
    data = tmp_path / "train.mmp"
    save_dataset(scenes, data)
    back = load_dataset(data)
    data_exact = all(a.T == b.T and a.coords.tobytes() == b.coords.tobytes() for a, b in zip(scenes, back))

    ckpt = tmp_path / "model.rmp"
    save_checkpoint(ckpt, state.params, config)
    params, cfg2 = load_checkpoint(ckpt)
    ckpt_exact = cfg2 == config and all(
        params[k].data.tobytes() == t.data.tobytes() for k, t in state.params.named_parameters()
    ) and all(params.buffers[k].tobytes() == v.tobytes() for k, v in state.params.buffers.items())

    before = evaluate(scenes, state.params, config)
    expected = before["vim"].csv_rows() + before["mpjpe_report"].csv_rows()
    code = main(["eval", "--checkpoint", str(ckpt), "--data", str(data)])
    lines = capsys.readouterr().out.splitlines()[1:]
    eval_exact = code == 0 and lines == expected
    ok = data_exact and ckpt_exact and eval_exact
    record_criterion(
        10, ok, f"dataset bit-exact {data_exact}, checkpoint bit-exact {ckpt_exact}, eval after reload identical {eval_exact}"
    )
    assert ok
