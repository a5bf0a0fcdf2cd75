"""Config parsing and the pinned default constants."""

import pytest

from pearl.config import PipelineConfig, dump_config, load_config
from pearl.errors import ValidationError


class TestDefaults:
    """One assertion per shipped constant."""

    def test_tau_s(self):
        assert PipelineConfig().tau_s == 0.5

    def test_beta(self):
        assert PipelineConfig().beta == 10.0

    def test_epsilon(self):
        assert PipelineConfig().epsilon == 1e-6

    def test_kappa(self):
        assert PipelineConfig().kappa == 5.0

    def test_lambda(self):
        assert PipelineConfig().lam == 1.0

    def test_tau(self):
        assert PipelineConfig().tau == 1.0

    def test_grid(self):
        assert (PipelineConfig().grid_h, PipelineConfig().grid_w) == (80, 80)

    def test_cg_iters(self):
        assert PipelineConfig().cg_iters == 25

    def test_window_stride(self):
        assert (PipelineConfig().window, PipelineConfig().stride) == (224, 112)

    def test_short_side(self):
        assert PipelineConfig().short_side == 336

    def test_empty_document_gives_defaults(self):
        assert load_config("") == PipelineConfig()


class TestParsing:
    def test_cityscapes_grid(self):
        cfg = load_config("grid_h=224 grid_w=224")
        assert (cfg.grid_h, cfg.grid_w) == (224, 224)
        assert cfg.tau_s == 0.5  # untouched keys keep defaults

    def test_lambda_alias(self):
        assert load_config("lambda=0.25").lam == 0.25

    def test_lines_and_comments(self):
        cfg = load_config("# comment\ntau=2.0  # trailing\n\nkappa=1.5\n")
        assert cfg.tau == 2.0 and cfg.kappa == 1.5

    def test_booleans(self):
        cfg = load_config("use_key_key=false zero_cls_weight=0")
        assert not cfg.use_key_key and not cfg.zero_cls_weight

    def test_solver_choice(self):
        assert load_config("solver=svd").solver == "svd"

    def test_unknown_key_warns(self):
        with pytest.warns(UserWarning, match="frobnicate"):
            cfg = load_config("frobnicate=1")
        assert cfg == PipelineConfig()

    def test_dump_round_trips(self):
        cfg = load_config("tau=0.0 grid_h=16 grid_w=24 solver=svd use_key_key=false")
        assert load_config(dump_config(cfg)) == cfg


class TestValidation:
    def test_negative_tau_s_names_key(self):
        with pytest.raises(ValidationError, match="tau_s"):
            load_config("tau_s=-1")

    def test_zero_epsilon(self):
        with pytest.raises(ValidationError, match="epsilon"):
            load_config("epsilon=0")

    def test_stride_above_window(self):
        with pytest.raises(ValidationError, match="stride"):
            load_config("window=100 stride=101")

    def test_bad_solver(self):
        with pytest.raises(ValidationError, match="solver"):
            load_config("solver=cholesky")

    def test_non_numeric_value(self):
        with pytest.raises(ValidationError, match="kappa"):
            load_config("kappa=fast")

    def test_malformed_token(self):
        with pytest.raises(ValidationError, match="key=value"):
            load_config("tau_s 0.5")
