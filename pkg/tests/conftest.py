import numpy as np
import pytest

from tactile_vla.dataset import NormStats
from tactile_vla.encoders import ViTConfig
from tactile_vla.policy import PolicyConfig, PolicyInput, build_policy, encode_text

TINY_VIT = ViTConfig(image_size=16, patch_size=8, channels=3, embed_dim=8, blocks=3, heads=2, mlp_ratio=2.0)
TINY_TAC = ViTConfig(image_size=16, patch_size=8, channels=6, embed_dim=8, blocks=1, heads=2, mlp_ratio=2.0)


def tiny_config(variant="TacFiLM", **kw):
    base = dict(variant=variant, vit=TINY_VIT, tactile=TINY_TAC, d_lm=16, lm_blocks=2, lm_heads=2, dtype="float64")
    base.update(kw)
    return PolicyConfig(**base)


def tiny_inputs(cfg, n=2, seed=0, instruction="insert the circle peg into the base"):
    g = np.random.default_rng(seed)
    rgb = g.random((n, cfg.vit.image_size, cfg.vit.image_size, 3))
    tac = g.random((n, cfg.tactile.image_size, cfg.tactile.image_size, 6))
    text = np.repeat(encode_text(instruction, cfg)[None], n, axis=0)
    return PolicyInput(rgb, text, tac)


@pytest.fixture
def unit_stats():
    return NormStats(np.full(3, -1.0), np.full(3, 1.0))


@pytest.fixture
def tiny():
    def make(variant="TacFiLM", seed=0, **kw):
        return build_policy(tiny_config(variant, **kw), seed)
    return make


ACCEPTANCE_LINES: list[str] = []


def acceptance(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"acceptance {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
