import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lunggan.evaluation import (
    ConfusionCounts,
    anomaly,
    benchmark_latency,
    confusion,
    dice,
    evaluate_pair,
    iou,
    summarize,
    write_report,
)
from lunggan.models import build_generator


def set_overlap(pred, gt):
    """Independent oracle: exact Dice and IoU as fractions from pixel-index sets."""
    p = {i for i, v in enumerate(np.ravel(pred)) if v}
    g = {i for i, v in enumerate(np.ravel(gt)) if v}
    if not p and not g:
        return Fraction(1), Fraction(1)
    inter = len(p & g)
    return Fraction(2 * inter, len(p) + len(g)), Fraction(inter, len(p | g))


def mask_from_bits(n, shape=(3, 3)):
    return np.array([(n >> i) & 1 for i in range(9)], np.uint8).reshape(shape)


counts = st.builds(ConfusionCounts, st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6),
                   st.integers(0, 10**6))


class TestConfusion:
    def test_tally(self):
        pred = np.array([[1, 1, 0], [0, 1, 0]])
        gt = np.array([[1, 0, 0], [1, 1, 0]])
        assert confusion(pred, gt) == ConfusionCounts(tp=2, fp=1, fn=1, tn=2)

    def test_bool_and_tensor_inputs(self):
        from lunggan.tensor import Tensor
        assert confusion(np.ones((2, 2), bool), Tensor(np.ones((2, 2)))).tp == 4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_non_binary(self):
        with pytest.raises(ValueError, match="binary"):
            confusion(np.full((2, 2), 0.5), np.zeros((2, 2)))

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            ConfusionCounts(-1, 0, 0, 0)


class TestDiceIou:
    def test_worked_example(self):
        c = ConfusionCounts(tp=3, fp=1, fn=2, tn=0)
        assert dice(c) == 6 / 9
        assert iou(c) == 0.5

    def test_perfect(self):
        m = mask_from_bits(0b101010101)
        c = confusion(m, m)
        assert dice(c) == iou(c) == 1.0

    def test_empty_vs_empty(self):
        c = confusion(np.zeros((3, 3)), np.zeros((3, 3)))
        assert dice(c) == iou(c) == 1.0

    def test_empty_vs_nonempty(self):
        c = confusion(np.zeros((3, 3)), np.eye(3))
        assert dice(c) == iou(c) == 0.0

    def test_sampled_pairs_match_set_oracle(self, rng):
        for a, b in rng.integers(0, 512, size=(2000, 2)):
            pm, gm = mask_from_bits(int(a)), mask_from_bits(int(b))
            d, j = set_overlap(pm, gm)
            c = confusion(pm, gm)
            assert dice(c) == float(d) and iou(c) == float(j)

    @settings(max_examples=300)
    @given(counts)
    def test_identity_and_order(self, c):
        if c.tp + c.fp + c.fn == 0:
            return
        assert dice(c) == pytest.approx(2 * iou(c) / (1 + iou(c)), rel=1e-12)
        assert dice(c) >= iou(c)

    @pytest.mark.parametrize("op", [np.transpose, np.fliplr, np.flipud, lambda m: np.rot90(m, 1)])
    def test_geometric_invariance(self, rng, op):
        p, g = rng.integers(0, 2, (7, 5)), rng.integers(0, 2, (7, 5))
        assert confusion(op(p), op(g)) == confusion(p, g)


class TestAnomaly:
    def test_none(self):
        assert anomaly(ConfusionCounts(100, 0, 0, 50)) == "none"

    def test_over(self):
        assert anomaly(ConfusionCounts(100, 50, 0, 0)) == "over"

    def test_under(self):
        assert anomaly(ConfusionCounts(50, 0, 50, 0)) == "under"

    def test_both(self):
        assert anomaly(ConfusionCounts(50, 30, 50, 0)) == "both"

    def test_threshold_is_strict(self):
        assert anomaly(ConfusionCounts(90, 10, 10, 0)) == "none"
        assert anomaly(ConfusionCounts(89, 11, 11, 0)) == "both"

    def test_custom_thresholds(self):
        assert anomaly(ConfusionCounts(100, 50, 0, 0), over_frac=0.6) == "none"

    def test_empty_ground_truth(self):
        with pytest.raises(ValueError):
            anomaly(ConfusionCounts(0, 5, 0, 4))

    def test_evaluate_pair_empty_truth_flags_none(self):
        rec = evaluate_pair("x", np.zeros((2, 2)), np.zeros((2, 2)))
        assert rec.anomaly == "none" and rec.dice == 1.0


class TestReport:
    @pytest.fixture
    def records(self, rng):
        out = []
        for i in range(5):
            g = rng.integers(0, 2, (8, 8))
            g[0, 0] = 1
            out.append(evaluate_pair(f"img{i}", rng.integers(0, 2, (8, 8)), g, latency_s=0.01 * i))
        return out

    def test_mean_is_per_image(self, records):
        s = summarize(records)
        assert s["mean_dice"] == pytest.approx(sum(r.dice for r in records) / 5, abs=1e-15)
        assert s["mean_iou"] == pytest.approx(sum(r.iou for r in records) / 5, abs=1e-15)
        assert sum(s[f"n_{k}"] for k in ("none", "over", "under", "both")) == 5

    def test_written_report(self, records, tmp_path):
        write_report(records, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "id,tp,fp,fn,tn,dice,iou,anomaly,latency_s"
        assert lines[1].startswith("img0,") and len(lines[1].split(",")) == 9
        assert "# summary" in lines
        assert any(ln.startswith("# mean_dice=") for ln in lines)

    def test_empty(self):
        assert summarize([]) == {"n": 0}


class FakeModel:
    """Forward cost proportional to pixel count, measured by a fake clock."""

    meta = {"divisor": 16}
    input_shape = (1, 64, 64)

    def __init__(self):
        self.now = 0.0

    def forward(self, x, mode="infer"):
        self.now += x.shape[2] * x.shape[3] * 1e-7

    def clock(self):
        return self.now


class TestLatency:
    def test_fake_clock_monotone(self):
        m = FakeModel()
        res = benchmark_latency(m, [256, 400, (512, 400), 1024], repeats=3, clock=m.clock)
        assert [s for s, _ in res] == [(256, 256), (400, 400), (512, 400), (1024, 1024)]
        times = [t for _, t in res]
        assert times == sorted(times) and all(t > 0 for t in times)
        assert times[0] == pytest.approx(256 * 256 * 1e-7)

    def test_unsupported_size_skipped(self, caplog):
        m = FakeModel()
        with caplog.at_level(logging.WARNING):
            res = benchmark_latency(m, [100, 256], repeats=1, clock=m.clock)
        assert [s for s, _ in res] == [(256, 256)]
        assert "skipping 100x100" in caplog.text

    def test_rebuild_used(self):
        m = FakeModel()
        built = []

        def rebuild(size):
            built.append(size)
            return m

        benchmark_latency(m, [100], repeats=1, rebuild=rebuild, clock=m.clock)
        assert built == [(100, 100)]

    def test_real_model_positive(self):
        g = build_generator(64, base_channels=4, depth=3)
        res = benchmark_latency(g, [64, 96, 128], repeats=2)
        assert len(res) == 3 and all(t > 0 for _, t in res)

    def test_repeat_stability(self):
        g = build_generator(128, base_channels=8, depth=4)
        (_, one), = benchmark_latency(g, [128], repeats=1, warmup=2)
        (_, nine), = benchmark_latency(g, [128], repeats=9, warmup=2)
        assert max(one, nine) / min(one, nine) < 3

    def test_bad_repeats(self):
        with pytest.raises(ValueError):
            benchmark_latency(FakeModel(), [64], repeats=0)
