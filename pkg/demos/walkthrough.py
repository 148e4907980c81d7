"""Walk through one feature-level run step by step.

    python3 demos/walkthrough.py [seed]
"""

import sys
from dataclasses import replace

import numpy as np

from cbmshift.adaptation import IdentificationConfig, build_mask, collect_ood_activations, identify_confusion, masked_predict
from cbmshift.evaluation import compare, comparison_table, evaluate
from cbmshift.memory import build_memory
from cbmshift.model import LossConfig, forward
from cbmshift.pipeline import DESK_TRAIN, activation_records, default_scenario
from cbmshift.synthshift import generate_id, generate_ood_samples, recovery_scores
from cbmshift.training import fine_tune, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
scenario = default_scenario(seed)
print(f"scenario: d={scenario.d} L={scenario.L} K={scenario.K}")
print(f"  injected misactivated concepts: {sorted(scenario.misactivated)}")
print(f"  injected under-activated (class, concept): {[tuple(p) for p in scenario.under_activated]}")

# Train the bottleneck model on in-domain data.
dataset = generate_id(scenario, (200, 100, 200))
cfg = replace(DESK_TRAIN, seed=seed)
params, log = train(dataset, (scenario.d, 16, scenario.L, scenario.K), LossConfig(), cfg)
print(f"\ntrained {len(log)} epochs, final val accuracy {log[-1].val_accuracy:.3f}")

# Memorise per-class concept statistics on the validation split.
memory = build_memory(activation_records(params, dataset.split("val")), scenario.K, scenario.L)

# Four labelled shifted samples per class drive identification.
adapt = generate_ood_samples(scenario, 4, stream=0, split="train")
ident = IdentificationConfig()
report = identify_confusion(memory, collect_ood_activations(params, adapt, scenario.K), ident)
mask = build_mask(report, ident, scenario.L)
print(f"\nflagged misactivated: {sorted(report.misactivated)}")
print(f"flagged under-activated per class: {[sorted(u) for u in report.under_activated]}")
print("recovery:", {k: round(v, 2) for k, v in recovery_scores(report, scenario).items()})

# Compare masking with plain fine-tuning on the same four samples per class.
ood_test = generate_ood_samples(scenario, 200, stream=1, split="test")
id_test = dataset.split("test")
x_id = np.array([s.features for s in id_test])
x_ood = np.array([s.features for s in ood_test])
y_id = [s.class_label for s in id_test]
y_ood = [s.class_label for s in ood_test]
K = scenario.K
tuned = fine_tune(params, adapt, LossConfig(), cfg)
base_id = evaluate(forward(params, x_id).prediction, y_id, K)
base_ood = evaluate(forward(params, x_ood).prediction, y_ood, K)
rows = {
    "in-domain, masked": compare(base_id, evaluate(masked_predict(params, x_id, mask)[0], y_id, K)),
    "shifted, masked": compare(base_ood, evaluate(masked_predict(params, x_ood, mask)[0], y_ood, K)),
    "in-domain, fine-tuned": compare(base_id, evaluate(forward(tuned, x_id).prediction, y_id, K)),
    "shifted, fine-tuned": compare(base_ood, evaluate(forward(tuned, x_ood).prediction, y_ood, K)),
}
print()
print(comparison_table(rows))
