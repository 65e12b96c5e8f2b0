"""Record the forward scores of the fixed-seed toy network used by the golden test."""
from pathlib import Path

import numpy as np

from hse import checkpoint
from hse.model import HSENetwork, ModelConfig
from hse.taxonomy import parse_taxonomy

TOY_TAXONOMY = "a\ta1\ta1x\na\ta1\ta1y\na\ta2\ta2x\nb\tb1\tb1x\nb\tb1\tb1y\nb\tb2\tb2x\n"


def toy_scores() -> dict[str, np.ndarray]:
    tax = parse_taxonomy(TOY_TAXONOMY)
    cfg = ModelConfig(level_sizes=tax.level_sizes, trunk_widths=(4, 6), feature_dim=8,
                      semantic_dim=5, attention_hidden=6, dtype="float64")
    net = HSENetwork(cfg, tax, seed=42)
    images = np.random.default_rng(42).uniform(0, 1, (3, 3, 16, 16))
    out = {}
    for level, s in enumerate(net.forward(images), 1):
        out[f"level{level}.s_final"] = s.s_final.data
        if s.attention is not None:
            out[f"level{level}.attention"] = s.attention.normalized.data
    return out


if __name__ == "__main__":
    target = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden_forward.ntc"
    target.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(target, toy_scores())
    print(f"wrote {target}")
