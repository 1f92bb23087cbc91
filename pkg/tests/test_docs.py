import ast
import importlib
import re
from pathlib import Path

import pytest

from vrdp.cli import COMMANDS

ROOT = Path(__file__).resolve().parents[1]
CLAIMS = (ROOT / "docs" / "claims.md").read_text()

MANIFEST = [
    "vr-objective", "vr-module", "vr-budget", "inference-modes", "kl-closed-form", "loss-bound-identity",
    "kl-bounds-mi", "forward-process", "ddim-sampler", "backbone-vs-skip", "mask-metrics", "sweep-csv",
    "sr5", "low-data", "non-degradation", "beta-ablation",
]


def rows() -> dict[str, str]:
    out = {}
    for line in CLAIMS.splitlines():
        m = re.match(r"\|\s*([a-z][a-z0-9-]*)\s*\|", line)
        if m and m.group(1) != "id":
            out[m.group(1)] = line
    return out


def defined_tests(path: Path) -> set[str]:
    tree = ast.parse(path.read_text())
    return {n.name for n in tree.body if isinstance(n, ast.FunctionDef) and n.name.startswith("test_")}


def test_manifest_is_covered():
    assert sorted(rows()) == sorted(MANIFEST)


@pytest.mark.parametrize("claim", MANIFEST)
def test_listed_tests_exist(claim):
    refs = re.findall(r"`(tests/[\w/]+\.py)::(\w+)`", rows()[claim])
    assert refs, f"{claim} lists no tests"
    for path, name in refs:
        assert name in defined_tests(ROOT / path), f"{path}::{name} missing"


def command_refs(text: str) -> list[str]:
    return re.findall(r"`((?:vrdp|python -m) [\w.-]+)", text)


def test_commands_are_live():
    refs = command_refs(CLAIMS) + command_refs((ROOT / "README.md").read_text())
    assert refs
    for ref in refs:
        if ref.startswith("vrdp "):
            assert ref.split()[1] in COMMANDS, ref
        else:
            importlib.import_module(ref.split()[-1])


def test_reproduce_block_uses_live_commands():
    block = CLAIMS.split("```sh", 1)[1].split("```", 1)[0]
    for line in filter(None, (l.strip() for l in block.splitlines())):
        words = line.split()
        if words[0] == "vrdp":
            assert words[1] in COMMANDS, line
        else:
            assert words[:2] == ["python", "-m"], line
            importlib.import_module(words[2])
