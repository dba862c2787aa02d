import pytest
from pydantic import ValidationError
from src.config import RekdConfig, RuntimeSettings, SynthConfig


@pytest.fixture
def clean_env(monkeypatch):
    for name in (
        "REKD_THREADS",
        "REKD_RUNTIME_THREADS",
        "REKD_DEBUG",
        "REKD_RUNTIME_DEBUG",
        "REKD_DETERMINISTIC",
        "REKD_RUNTIME_DETERMINISTIC",
        "REKD_GROUP_ORDER",
    ):
        monkeypatch.delenv(name, raising=False)
    return monkeypatch


class TestRuntimeSettings:
    def test_reads_its_own_prefix(self, clean_env):
        clean_env.setenv("REKD_RUNTIME_THREADS", "3")
        clean_env.setenv("REKD_RUNTIME_DEBUG", "true")
        settings = RuntimeSettings()
        assert settings.threads == 3
        assert settings.debug

    def test_ignores_detector_prefix(self, clean_env):
        clean_env.setenv("REKD_DEBUG", "true")
        clean_env.setenv("REKD_DETERMINISTIC", "true")
        settings = RuntimeSettings()
        assert not settings.debug
        assert not settings.deterministic

    def test_thread_cap_alias(self, clean_env):
        clean_env.setenv("REKD_THREADS", "5")
        assert RuntimeSettings().threads == 5
        clean_env.setenv("REKD_RUNTIME_THREADS", "2")
        assert RuntimeSettings().threads == 2

    def test_keyword_construction(self, clean_env):
        assert RuntimeSettings(threads=1).worker_count() == 1
        assert RuntimeSettings(deterministic=True, threads=8).worker_count() == 1


class TestRekdConfig:
    def test_env_override(self, clean_env):
        clean_env.setenv("REKD_GROUP_ORDER", "8")
        assert RekdConfig().group_order == 8

    @pytest.mark.parametrize(
        "field, value",
        [("group_order", 3), ("kernel_size", 4), ("channels", 0)],
    )
    def test_rejects(self, clean_env, field, value):
        with pytest.raises(ValidationError):
            RekdConfig(**{field: value})

    def test_text_round_trip(self, clean_env):
        config = RekdConfig(group_order=8, window_sizes=[8, 16], window_weights=[4.0, 1.0])
        assert RekdConfig.from_text(config.to_text()) == config


def test_synth_prefix(clean_env):
    clean_env.setenv("REKD_SYNTH_IMAGE_SIZE", "64")
    assert SynthConfig().image_size == 64
    with pytest.raises(ValidationError):
        SynthConfig(image_size=8)
