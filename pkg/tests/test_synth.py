"""Synthetic quote generator and the SVG frontier charts."""
import numpy as np
import pytest

from fairprice.eval import FrontierPoint, FrontierTable
from fairprice.plots import fairness_plot, frontier_plot
from fairprice.rdc import pearson
from fairprice.synth import SynthConfig, config_dict, default_mapping, generate, true_conversion


class TestGenerator:
    def test_columns_and_shape(self):
        cfg = SynthConfig(n=300, n_features=6)
        frame = generate(cfg)
        mapping = default_mapping(cfg)
        assert len(frame) == 300
        for col in mapping.feature_columns + [mapping.sale_column, mapping.price_column, mapping.premium_column]:
            assert col in frame
        assert set(frame["sale"]) <= {0, 1} and set(frame["employed"]) <= {0, 1}
        assert frame["age"].between(18, 90).all()

    def test_seed_determinism(self):
        a, b = generate(SynthConfig(n=200, seed=5)), generate(SynthConfig(n=200, seed=5))
        assert a.equals(b)
        assert not a.equals(generate(SynthConfig(n=200, seed=6)))

    def test_prices_within_loading(self):
        frame = generate(SynthConfig(n=2000))
        ratio = frame["price"] / frame["premium"]
        assert ratio.between(1.1, 1.7).all()

    def test_planted_elasticity_recovered_in_sales(self):
        cfg = SynthConfig(n=20_000, seed=1)
        frame = generate(cfg)
        p = true_conversion(frame, frame["price"], cfg)
        assert abs(frame["sale"].mean() - p.mean()) < 0.015
        higher = true_conversion(frame, 1.1 * frame["price"], cfg)
        assert np.all(higher < p)

    def test_premium_ignores_x1_and_age_tracks_it(self):
        frame = generate(SynthConfig(n=5000, seed=2))
        assert abs(pearson(np.log(frame["premium"]), frame["x1"])) < 0.05
        assert pearson(frame["age"], frame["x1"]) > 0.8

    def test_dependence_strength(self):
        weak = generate(SynthConfig(n=5000, dependence=0.1, seed=3))
        assert abs(pearson(weak["age"], weak["x1"])) < 0.2

    def test_too_few_features(self):
        with pytest.raises(ValueError):
            generate(SynthConfig(n_features=4))

    def test_config_dict_is_toml_friendly(self):
        d = config_dict(SynthConfig())
        assert all(not isinstance(v, tuple) for v in d.values())


def _table():
    table = FrontierTable()
    for method, shift in (("optigrad", 0.0), ("indirect", -5.0)):
        for lf, conv in ((0.0, 0.3), (5.0, 0.35), (25.0, 0.45)):
            table.add(FrontierPoint(method=method, lambda_f=lf, lambda_s=0.0, split="dev", seed=0,
                                    gwm=100.0 - 100 * conv + shift, conversion_rate=conv, n=10))
    for ls, score in ((0.0, 0.3), (50.0, 0.1), (1250.0, 0.05)):
        table.add(FrontierPoint(method="fair-optigrad", lambda_f=0.0, lambda_s=ls, split="dev", seed=0, gwm=50.0,
                                conversion_rate=0.3, n=10, rdc_score=score, hgr_score=score, pearson=score / 2))
    return table


class TestPlots:
    def test_svgs_are_reproducible(self, tmp_path):
        table = _table()
        frontier_plot(table, tmp_path / "a.svg")
        frontier_plot(table, tmp_path / "b.svg")
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
        assert b"<svg" in (tmp_path / "a.svg").read_bytes()

    def test_fairness_plot(self, tmp_path):
        fairness_plot(_table(), tmp_path / "f.svg")
        assert (tmp_path / "f.svg").stat().st_size > 1000

    def test_empty_split(self, tmp_path):
        frontier_plot(_table(), tmp_path / "t.svg", split="test")
        assert (tmp_path / "t.svg").exists()
