import pytest

from flatlat.config import COMMANDS, RunConfig, env_overrides, file_overrides, parse_config
from flatlat.errors import UsageError

pytestmark = pytest.mark.unit


def make_ini(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text, encoding="utf-8")
    return path


def parse(*argv, environ=None):
    return parse_config(list(argv), environ={} if environ is None else environ)


class TestDefaults:
    def test_defaults(self):
        cfg = parse("flops")
        assert cfg.command == "flops"
        assert cfg.flow.kappa == 3.0
        assert cfg.flow.cfg_interval == (0.225, 1.0)
        assert cfg.run.seed == 0
        assert cfg.latent_shapes() == [(16, 4), (8, 8), (4, 16)]

    def test_every_command_parses(self):
        for command in COMMANDS:
            assert parse(command).command == command

    def test_derived_configs(self):
        cfg = parse("train-vae")
        assert cfg.schedule().total_epochs == 50
        assert cfg.flow_config().euler_steps == 50
        vc = cfg.vae_config(8, 8, 16)
        assert (vc.tokens, vc.latent_dim, vc.num_patches) == (8, 8, 64)

    def test_command_line_and_paths(self, tmp_path):
        cfg = parse("flops", "--exact", "--data-dir", str(tmp_path))
        assert cfg.exact
        assert cfg.command_line == f"flatlat flops --exact --data-dir {tmp_path}"
        assert cfg.reports_dir == tmp_path.resolve() / "reports" / "flops"
        assert cfg.dataset_dir == tmp_path.resolve() / "datasets" / "synth"


class TestPrecedence:
    def test_file_overrides_defaults(self, tmp_path):
        ini = make_ini(tmp_path, "[flow]\nkappa = 2\ncfg_interval = 0.3, 0.9\n[run]\nseed = 7\n")
        cfg = parse("sample", "--config", str(ini))
        assert cfg.flow.kappa == 2.0
        assert cfg.flow.cfg_interval == (0.3, 0.9)
        assert cfg.run.seed == 7

    def test_environment_beats_file(self, tmp_path):
        ini = make_ini(tmp_path, "[flow]\nkappa = 2\n")
        cfg = parse("sample", "--config", str(ini), environ={"FLATLAT_FLOW_KAPPA": "5"})
        assert cfg.flow.kappa == 5.0

    def test_flag_beats_environment_and_file(self, tmp_path):
        ini = make_ini(tmp_path, "[flow]\nkappa = 2\n")
        cfg = parse("sample", "--config", str(ini), "--kappa", "4", environ={"FLATLAT_FLOW_KAPPA": "5"})
        assert cfg.flow.kappa == 4.0

    def test_set_flag(self):
        cfg = parse("train-flow", "--set", "flow.depth=2", "--set", "sample.use_ema=no", "--steps", "10")
        assert cfg.flow.depth == 2
        assert cfg.sample.use_ema is False
        assert cfg.flow.train_steps == 10

    def test_epochs_target_the_command(self):
        assert parse("train-vae", "--epochs", "3").vae.epochs == 3
        cfg = parse("sweep-latent", "--epochs", "3")
        assert (cfg.sweep.epochs, cfg.vae.epochs) == (3, 0)

    def test_env_names(self):
        env = {"FLATLAT_DATA_DIR": "/x", "FLATLAT_DATA_TRAIN_COUNT": "10", "FLATLAT_RUN_SEED": "3", "HOME": "/h"}
        assert env_overrides(env) == {"data.train_count": "10", "run.seed": "3"}

    def test_hash_tracks_values(self):
        assert parse("flops").config_hash == parse("flops").config_hash
        assert parse("flops", "--seed", "1").config_hash != parse("flops").config_hash


class TestUsageErrors:
    def test_kappa_below_one(self):
        with pytest.raises(UsageError) as exc:
            parse("sample", "--kappa", "0.5")
        assert exc.value.key == "flow.kappa"
        assert exc.value.exit_code == 2

    def test_unknown_key(self):
        with pytest.raises(UsageError) as exc:
            parse("flops", "--set", "flow.bogus=1")
        assert exc.value.key == "flow.bogus"

    def test_unknown_section_in_file(self, tmp_path):
        ini = make_ini(tmp_path, "[nope]\nx = 1\n")
        with pytest.raises(UsageError) as exc:
            parse("flops", "--config", str(ini))
        assert exc.value.key == "nope.x"

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError) as exc:
            parse("flops", "--config", str(tmp_path / "missing.ini"))
        assert exc.value.key == "--config"

    def test_unparseable_values(self):
        with pytest.raises(UsageError) as exc:
            parse("flops", "--set", "run.seed=abc")
        assert exc.value.key == "run.seed"
        with pytest.raises(UsageError):
            parse("flops", "--set", "flow.cfg_interval=0.3")
        with pytest.raises(UsageError):
            parse("flops", "--set", "sample.use_ema=maybe")

    def test_set_without_value(self):
        with pytest.raises(UsageError):
            parse("flops", "--set", "flow.kappa")

    def test_unknown_command(self):
        with pytest.raises(UsageError) as exc:
            parse("bogus")
        assert exc.value.key == "argv"

    @pytest.mark.parametrize(
        "setting,key",
        [("flow.cfg_interval=0.5,0.4", "flow.cfg_interval"), ("vae.tokens=100", "vae.tokens"),
         ("run.precision=float16", "run.precision"), ("sweep.shapes=16,4,8", "sweep.shapes"),
         ("bench.duration=0", "bench.duration"), ("vae.peak_lr=0", "vae"), ("data.amplitude=-1", "data")],
    )
    def test_range_checks_name_their_key(self, setting, key):
        with pytest.raises(UsageError) as exc:
            parse("flops", "--set", setting)
        assert exc.value.key == key

    def test_validate_on_direct_construction(self):
        cfg = RunConfig(command="flops")
        cfg.run.seed = -1
        with pytest.raises(UsageError):
            cfg.validate()

    def test_file_overrides_reads_sections(self, tmp_path):
        ini = make_ini(tmp_path, "[bench]\ntrials = 2\n")
        assert file_overrides(ini) == {"bench.trials": "2"}
