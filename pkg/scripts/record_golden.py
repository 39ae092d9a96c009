"""Record the reference search trajectory used by the regression test.

Run only when the search procedure changes on purpose:

    python3 scripts/record_golden.py
"""
import json
from pathlib import Path

from ruas.bilevel import init_search, search_epoch
from ruas.config import SearchConfig
from ruas.data import split_by_hash
from ruas.synthetic import synth_lowlight

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden_search.json"


def golden_run() -> list[dict]:
    cfg = SearchConfig(epochs=1, seed=0)
    data = synth_lowlight(4, size=12, seed=3, noise_sigma=0.03)
    tr, val = split_by_hash(data)
    state = search_epoch(init_search(cfg), tr, val, cfg)
    return state.history


if __name__ == "__main__":
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(golden_run(), indent=1, sort_keys=True) + "\n")
    print(f"wrote {OUT}")
