"""Acceptance criteria, one test per criterion, with a pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import json
import statistics

import numpy as np
from click.testing import CliRunner

from cfsam import flops
from cfsam.cli import main as cli_main
from cfsam.gradcheck import gradcheck_cfsam, toy_gradcheck_config, toy_gradcheck_shapes
from cfsam.harness import SyntheticTask, gen_pyramid, toy_train
from cfsam.module import (
    SSD300_SHAPES,
    CfsamConfig,
    cfsam_forward,
    combine,
    init_weights,
    partition,
    transformer_unit,
)
from cfsam.tensor import Tensor

from oracles import interp_align_corners, layer_weights_to_dict, transformer_oracle
from test_forward import random_spec
from test_stages import make_pyramid, zero_transformer


def report(criterion: str, passed: bool, detail: str = ""):
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert passed, line


def test_criterion_1_shape_contract():
    cfg = CfsamConfig()
    pyr = make_pyramid(SSD300_SHAPES, seed=0)
    out = cfsam_forward(pyr, init_weights(cfg, pyr.channel_list), cfg)
    ok = out.shapes == pyr.shapes

    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(50):
        shapes = random_spec(rng, int(rng.integers(1, 7)))
        cfg_r = CfsamConfig(channels=8, part=2, num_heads=2)
        pyr_r = make_pyramid(shapes, seed=checked)
        out_r = cfsam_forward(pyr_r, init_weights(cfg_r, pyr_r.channel_list, seed=checked), cfg_r)
        ok = ok and out_r.shapes == pyr_r.shapes
        checked += 1
    report("1 shape contract", ok, f"SSD300 six-scale + {checked} random specs")


def test_criterion_2_partition_combine_exactness():
    rng = np.random.default_rng(1)
    ok = True
    # divisible cases, including the SSD300 sequence length
    for length in (12, 1940):
        L = rng.standard_normal((16, length))
        for p in (1, 2, 3, 4):
            if length % p == 0:
                back = combine(partition(Tensor(L), p))
                ok = ok and np.array_equal(back.data, L)
    # non-divisible: shape restored, composition matches the interp oracle
    for length, p in ((5, 2), (7, 3), (10, 4)):
        L = rng.standard_normal((6, length))
        ps = partition(Tensor(L), p)
        back = combine(ps)
        ok = ok and back.shape == (6, length)
        up = interp_align_corners(L, ps.padded_length)
        expected = interp_align_corners(up, length)
        ok = ok and np.allclose(back.data, expected, atol=1e-9)
    report("2 partition/combine exactness", ok)


def test_criterion_3_complexity_halving():
    q1 = flops.attention_quadratic_macs(1940, 256, 1)
    q2 = flops.attention_quadratic_macs(1940, 256, 2)
    ok = (q1, q2) == (1_926_963_200, 963_481_600) and q2 * 2 == q1
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = 2 * int(rng.integers(1, 3000))
        c = int(rng.integers(1, 600))
        ok = ok and flops.attention_quadratic_macs(n, c, 2) * 2 == flops.attention_quadratic_macs(n, c, 1)
    report("3 complexity halving", ok, f"part=1 {q1} MACs, part=2 {q2} MACs")


def test_criterion_4_gradient_correctness():
    cfg = toy_gradcheck_config()
    worst = 0.0
    for seed in range(5):
        results = gradcheck_cfsam(cfg, toy_gradcheck_shapes(), seed=seed, h=1e-5)
        worst = max(worst, max(results.values()))
    report("4 gradient correctness", worst < 1e-4, f"max rel err {worst:.2e} over 5 seeds")


def test_criterion_5_transformer_unit():
    ok = True
    rng = np.random.default_rng(5)
    worst = 0.0
    for seed in range(10):
        c = int(rng.choice([2, 4, 6, 8]))
        n = int(rng.integers(1, 7))
        heads = int(rng.choice([h for h in (1, 2) if c % h == 0]))
        cfg = CfsamConfig(channels=c, num_heads=heads)
        weights = init_weights(cfg, [], seed=seed)
        x = rng.standard_normal((n, c))
        got = transformer_unit(Tensor(x), weights, cfg).data
        exp = transformer_oracle(x, [layer_weights_to_dict(weights.layers[0])], heads)
        worst = max(worst, float(np.max(np.abs(got - exp))))
    ok = ok and worst < 1e-9

    cfg = CfsamConfig(channels=6, num_heads=2)
    weights = init_weights(cfg, [], seed=77)
    zero_transformer(weights)
    x = rng.standard_normal((5, 6))
    ok = ok and np.array_equal(transformer_unit(Tensor(x), weights, cfg).data, x)

    weights = init_weights(cfg, [], seed=78)
    x = rng.standard_normal((6, 6))
    perm = rng.permutation(6)
    out = transformer_unit(Tensor(x), weights, cfg).data
    out_p = transformer_unit(Tensor(x[perm]), weights, cfg).data
    ok = ok and np.max(np.abs(out_p - out[perm])) < 1e-9
    report("5 transformer unit", ok, f"max oracle deviation {worst:.2e}")


def test_criterion_6_parameter_cross_check():
    rng = np.random.default_rng(6)
    ok = True
    for seed in range(10):
        heads = int(rng.choice([1, 2, 4]))
        cfg = CfsamConfig(
            channels=int(rng.integers(1, 9)) * heads,
            part=int(rng.integers(1, 4)),
            num_heads=heads,
            transformer_layers=int(rng.integers(0, 3)),
            ffn_ratio=float(rng.choice([1.0, 2.0, 4.0])),
        )
        shapes = sorted(
            ((int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 9)))
             for _ in range(int(rng.integers(1, 5)))),
            key=lambda s: s[0] * s[1], reverse=True,
        )
        weights = init_weights(cfg, [c for _, _, c in shapes], seed=seed)
        ok = ok and flops.count_cfsam(cfg, shapes).total_params == weights.num_scalars()
    report("6 parameter cross-check", ok)


def test_criterion_7_convergence_property():
    task = SyntheticTask()
    finals = {"cfsam": [], "baseline": []}
    diverged = False
    for arm in finals:
        for seed in range(5):
            records = toy_train(arm, task, steps=300, lr=0.05, seed=seed)
            finals[arm].append(records[-1].loss)
            diverged = diverged or records[-1].diverged
    med_c = statistics.median(finals["cfsam"])
    med_b = statistics.median(finals["baseline"])
    report(
        "7 convergence property",
        not diverged and med_c <= med_b,
        f"median final loss cfsam {med_c:.3g} vs baseline {med_b:.3g}",
    )


def test_criterion_8_determinism_and_fixtures(tmp_path):
    cfg = CfsamConfig(channels=8, part=2, num_heads=2, seed=7)
    shapes = [(4, 4, 6), (2, 2, 6)]

    def run_once():
        pyr = gen_pyramid(shapes, seed=cfg.seed)
        return cfsam_forward(pyr, init_weights(cfg, pyr.channel_list), cfg)

    a, b = run_once(), run_once()
    ok = all(np.array_equal(ma.data, mb.data) for ma, mb in zip(a.maps, b.maps))

    from cfsam import fixtures

    rng = np.random.default_rng(8)
    arr = rng.standard_normal((3, 5, 2))
    fixtures.write_tensor(tmp_path / "t.cfst", arr)
    ok = ok and np.array_equal(fixtures.read_tensor(tmp_path / "t.cfst"), arr)

    runner = CliRunner()
    fdir = tmp_path / "fx"
    gen = ["--set", 'pyramid.shapes=[[3,3,4],[2,2,4]]',
           "--set", "cfsam.channels=4", "--set", "cfsam.num_heads=1"]
    res = runner.invoke(cli_main, ["parity", str(fdir), "--generate", *gen])
    ok = ok and res.exit_code == 0
    res = runner.invoke(cli_main, ["parity", str(fdir), "--tol", "1e-12",
                                   "--out", str(tmp_path / "out")])
    ok = ok and res.exit_code == 0
    if ok:
        rep = json.loads((tmp_path / "out" / "report.json").read_text())
        ok = rep["passed"] and rep["max_abs_deviation"] <= 1e-12
    report("8 determinism & fixtures", ok)
