"""
Tests for settings.py: environment configuration and the logging pipeline.
Target: Settings.from_env(), configure_logging()

Coverage intent:
- BLELAB_* variables override defaults; unknown log levels are rejected
- Log lines follow sys.stderr as it is swapped, and never reach stdout
- A closed stream captured by an earlier caller does not break later logging
"""
import io
import json
import sys

import pydantic
import pytest
import structlog

from settings import Settings, configure_logging

log = structlog.get_logger("settings-test")


# =============================================================================
# Settings.from_env() tests
# =============================================================================
class TestFromEnv:

    def test_defaults(self, monkeypatch):
        for name in ("ASSETS_DIR", "OUT_DIR", "LOG_LEVEL", "LOG_FORMAT", "CRACK_BUDGET"):
            monkeypatch.delenv(f"BLELAB_{name}", raising=False)
        settings = Settings.from_env()
        assert settings.log_level == "WARNING"
        assert settings.crack_budget == 1_000_000

    def test_overrides(self, monkeypatch, tmp_path):
        monkeypatch.setenv("BLELAB_OUT_DIR", str(tmp_path))
        monkeypatch.setenv("BLELAB_LOG_LEVEL", "info")
        monkeypatch.setenv("BLELAB_LOG_FORMAT", "json")
        monkeypatch.setenv("BLELAB_CRACK_BUDGET", "5000")
        settings = Settings.from_env()
        assert settings.out_dir == tmp_path
        assert settings.log_level == "INFO"
        assert settings.log_format == "json"
        assert settings.crack_budget == 5000

    @pytest.mark.parametrize("field,value", [("log_level", "chatty"), ("crack_budget", 0), ("log_format", "xml")])
    def test_invalid_values(self, field, value):
        with pytest.raises(pydantic.ValidationError):
            Settings(**{field: value})


# =============================================================================
# configure_logging() tests
# =============================================================================
class TestConfigureLogging:

    def test_follows_swapped_stderr(self, monkeypatch, capsys):
        configure_logging(Settings(log_format="json"))
        stream = io.StringIO()
        monkeypatch.setattr(sys, "stderr", stream)
        log.warning("queue saturated", depth=32)
        line = json.loads(stream.getvalue())
        assert line["event"] == "queue saturated"
        assert line["depth"] == 32
        assert capsys.readouterr().out == ""

    def test_closed_stream_is_not_kept(self, monkeypatch):
        configure_logging(Settings())
        first = io.StringIO()
        monkeypatch.setattr(sys, "stderr", first)
        log.warning("first")
        first.close()
        second = io.StringIO()
        monkeypatch.setattr(sys, "stderr", second)
        log.warning("second")
        assert "second" in second.getvalue()

    def test_level_filters(self, monkeypatch):
        configure_logging(Settings(log_level="ERROR"))
        stream = io.StringIO()
        monkeypatch.setattr(sys, "stderr", stream)
        log.warning("hidden")
        log.error("shown")
        assert "hidden" not in stream.getvalue()
        assert "shown" in stream.getvalue()
