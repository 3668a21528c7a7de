"""Closed-form cost formulas, the halving identity, and parameter cross-checks."""

import numpy as np
import pytest

from cfsam import flops
from cfsam.module import CfsamConfig, SSD300_SHAPES, init_weights

from oracles import naive_conv2d


class TestCountConv:
    def test_unit_case(self):
        assert flops.count_conv(1, 1, 1, 1, 1) == 1

    def test_ssd_first_scale(self):
        assert flops.count_conv(38, 38, 3, 512, 512) == 3_406_823_424

    def test_equals_instrumented_multiply_counter(self):
        # count multiplies by running the naive conv with a counting wrapper;
        # padding 0 so every counted tap actually executes
        H, W, ci, co, k = 6, 6, 2, 3, 3
        count = 0

        class Counting(float):
            def __mul__(self, other):
                nonlocal count
                count += 1
                return Counting(float(self) * float(other))

            __rmul__ = __mul__

            def __add__(self, other):
                return Counting(float(self) + float(other))

            __radd__ = __add__

        rng = np.random.default_rng(0)
        x = np.empty((H, W, ci), dtype=object)
        w = np.empty((k, k, ci, co), dtype=object)
        for idx in np.ndindex(*x.shape):
            x[idx] = Counting(rng.standard_normal())
        for idx in np.ndindex(*w.shape):
            w[idx] = Counting(rng.standard_normal())
        naive_conv2d(x, w, np.zeros(co), padding=0, stride=1)
        assert count == flops.count_conv(H - k + 1, W - k + 1, k, ci, co)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            flops.count_conv(0, 4, 3, 2, 2)


class TestCountAttention:
    def test_ssd_sequence_values(self):
        assert flops.attention_quadratic_macs(1940, 256, 1) == 1_926_963_200
        assert flops.attention_quadratic_macs(1940, 256, 2) == 963_481_600

    def test_halving_for_even_length(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = 2 * int(rng.integers(1, 2000))
            c = int(rng.integers(1, 512))
            assert (
                flops.attention_quadratic_macs(n, c, 2) * 2
                == flops.attention_quadratic_macs(n, c, 1)
            )

    def test_single_token(self):
        assert flops.attention_quadratic_macs(1, 7, 1) == 2 * 7

    def test_part_equals_n_degenerates(self):
        n, c = 12, 5
        assert flops.attention_quadratic_macs(n, c, n) == 2 * n * c

    def test_monotone_nonincreasing_in_part(self):
        n, c = 720, 16
        vals = [flops.attention_quadratic_macs(n, c, p) for p in range(1, 30)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_total_includes_projections(self):
        n, c, heads, part = 10, 8, 2, 2
        assert flops.count_attention(n, c, heads, part) == 4 * 10 * 64 + flops.attention_quadratic_macs(n, c, part)

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            flops.count_attention(10, 6, 4, 2)


class TestCountCfsam:
    def test_tiny_hand_computed_case(self):
        cfg = CfsamConfig(channels=1, part=1, num_heads=1, transformer_layers=0)
        report = flops.count_cfsam(cfg, [(1, 1, 1)])
        by_stage = {s.stage: s for s in report.stages}
        assert by_stage["local_extract"].macs == 9 + 1          # 3x3 then 1x1
        assert by_stage["fusion"].macs == 1 * 2 * 1 * 1
        assert by_stage["restore"].macs == 1
        assert by_stage["attention_projections"].macs == 0
        assert report.total_macs == 9 + 1 + 2 + 1

    def test_part2_halves_only_the_quadratic_stage(self):
        cfg1 = CfsamConfig(part=1)
        cfg2 = CfsamConfig(part=2)
        r1 = flops.count_cfsam(cfg1, SSD300_SHAPES)
        r2 = flops.count_cfsam(cfg2, SSD300_SHAPES)
        s1 = {s.stage: s.macs for s in r1.stages}
        s2 = {s.stage: s.macs for s in r2.stages}
        assert s2["attention_quadratic"] * 2 == s1["attention_quadratic"]
        for stage in s1:
            if stage != "attention_quadratic":
                assert s1[stage] == s2[stage], stage

    @pytest.mark.parametrize("seed", range(10))
    def test_param_total_matches_weight_scalars(self, seed):
        rng = np.random.default_rng(seed)
        heads = int(rng.choice([1, 2, 4]))
        cfg = CfsamConfig(
            channels=int(rng.integers(1, 9)) * heads,
            part=int(rng.integers(1, 4)),
            num_heads=heads,
            transformer_layers=int(rng.integers(0, 3)),
            ffn_ratio=float(rng.choice([1.0, 2.0, 3.5])),
        )
        shapes = [
            (int(rng.integers(1, 7)), int(rng.integers(1, 7)), int(rng.integers(1, 9)))
            for _ in range(int(rng.integers(1, 4)))
        ]
        shapes.sort(key=lambda s: s[0] * s[1], reverse=True)
        weights = init_weights(cfg, [c for _, _, c in shapes], seed=seed)
        report = flops.count_cfsam(cfg, shapes)
        assert report.total_params == weights.num_scalars()

    def test_totals_equal_stage_sums(self):
        cfg = CfsamConfig()
        report = flops.count_cfsam(cfg, SSD300_SHAPES)
        assert report.total_macs == sum(s.macs for s in report.stages)
        assert report.total_params == sum(s.params for s in report.stages)

    def test_csv_and_json_shapes(self):
        cfg = CfsamConfig(channels=4, num_heads=1)
        report = flops.count_cfsam(cfg, [(2, 2, 3)])
        csv_text = report.to_csv()
        lines = csv_text.strip().splitlines()
        assert lines[0] == "stage,macs,flops,params"
        assert any(line.startswith("TOTAL,") for line in lines)
        doc = report.to_dict()
        assert doc["total_flops"] == 2 * doc["total_macs"]
        assert all(e["flops"] == 2 * e["macs"] for e in doc["stages"])
