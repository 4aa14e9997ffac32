"""Walk through one removal attack on the toy CNN with the Python API.

Run with ``python3 demos/attack_walkthrough.py``.  Every step is seeded, so
the printed numbers are the same on every run (timing aside).
"""

from eclipse.detect import detect_watermarked_layers
from eclipse.fixtures import toy_cnn, toy_task
from eclipse.model import equivalence_report
from eclipse.pipeline import Mode, run
from eclipse.watermark import Scheme, active_verify, embed, make_key, random_message, verify

LAYER = 2

model = toy_cnn(0)
key = make_key(model, Scheme.WEIGHT_PROJECTION, LAYER, 256, seed=0)
msg = random_message(256, seed=1)
marked = embed(model, key, msg).model
print("owner verifies the marked model:", verify(marked, key, msg).to_dict())

detection = detect_watermarked_layers(marked)
for r in detection.reports:
    print(f"  layer {r.layer_index} {r.kind:<6} vol_real={r.vol_real:.4g} vol_imag={r.vol_imag:.4g} flagged={r.flagged}")

probes, _ = toy_task(0).sample(1000, [0, 9])

base, _ = run(marked, [LAYER], Mode.BASE, seed=0)
print("base mode, passive verifier:", verify(base, key, msg).to_dict())
best, _ = active_verify(base, key, msg)
print("base mode, active verifier (crop undoes the zero frame):", best.to_dict())
print("base mode utility:", equivalence_report(marked, base, probes).to_dict())

adv, log = run(marked, [LAYER], Mode.ADVANCED, seed=0)
print(f"advanced mode: lambda={log[0]['lambda']:.3f}, compensation={log[0]['compensation']}")
best, trace = active_verify(adv, key, msg)
for t in trace:
    print(f"  {t['strategy']:<17} {t['outcome']:<15} {t['confidence']}")
print("advanced mode, best active outcome:", best.to_dict())
print("advanced mode utility:", equivalence_report(marked, adv, probes).to_dict())
