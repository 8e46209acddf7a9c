import os
from typing import Dict, List

import pytest

from logic.models import RunReport, apply_overrides, load_run_config
from logic.presets import get_preset
from pqcli import train_once

SEEDS = [11, 12, 13, 14, 15]

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("PQ_RUN_SLOW") != "1", reason="set PQ_RUN_SLOW=1 to run"),
]


def _desk_run(seed: int, **overrides) -> RunReport:
    data = apply_overrides(get_preset("desk"), dict(overrides, seed=seed))
    return train_once(load_run_config(data)).report


def _runs(**overrides) -> Dict[int, RunReport]:
    return {seed: _desk_run(seed, **overrides) for seed in SEEDS}


def _majority(flags: List[bool]) -> bool:
    return sum(flags) > len(flags) // 2


def test_bank_method_forgets_less_than_finetuning() -> None:
    full = _runs()
    finetune = _runs(baseline="finetune")
    gaps = [full[s].cumulative[-1] - finetune[s].cumulative[-1] >= 0.15 for s in SEEDS]
    bwt = [finetune[s].bwt < full[s].bwt for s in SEEDS]
    assert _majority(gaps)
    assert _majority(bwt)


def test_deeper_history_does_not_worsen_backward_transfer() -> None:
    deep = _runs(**{"b-max": 4})
    shallow = _runs(**{"b-max": 1})
    mean_deep = sum(r.bwt for r in deep.values()) / len(SEEDS)
    mean_shallow = sum(r.bwt for r in shallow.values()) / len(SEEDS)
    assert mean_deep >= mean_shallow


def test_loss_mode_ordering() -> None:
    final = {mode: {s: r.cumulative[-1] for s, r in _runs(**{"loss-mode": mode}).items()}
             for mode in ("quadruplet", "triplet", "contrastive")}
    ordered = [final["quadruplet"][s] >= final["triplet"][s] >= final["contrastive"][s] for s in SEEDS]
    assert _majority(ordered)
