"""The narrative scripts run top to bottom."""

import runpy
from pathlib import Path

import pytest

NOTEBOOKS = sorted((Path(__file__).parent.parent / "notebooks").glob("*.py"))


@pytest.mark.parametrize("path", NOTEBOOKS, ids=lambda p: p.stem)
def test_notebook_runs(path, monkeypatch, capsys):
    monkeypatch.setenv("MPNET_LAB_STEPS", "4")
    runpy.run_path(str(path), run_name="__main__")
    assert capsys.readouterr().out
