"""Identification accuracy against synthetic activations with known shifts.

Skips training entirely: in-domain and shifted concept activations are drawn
straight from the scenario, so every flagged concept can be checked.

    python3 demos/activation_oracle.py [n_seeds]
"""

import sys

import numpy as np

from cbmshift.adaptation import IdentificationConfig
from cbmshift.pipeline import activation_level_trial, default_scenario

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 20
for tau in (1.1, 1.4):
    for n in (1, 2, 4, 8):
        scores = [activation_level_trial(default_scenario(s, "activation"), n, IdentificationConfig(tau=tau))[2] for s in range(n_seeds)]
        mp = np.mean([s["misactivated_precision"] for s in scores])
        mr = np.mean([s["misactivated_recall"] for s in scores])
        ur = np.mean([s["under_activated_recall"] for s in scores])
        print(f"tau={tau}  N={n}  misactivated P={mp:.2f} R={mr:.2f}  under-activated R={ur:.2f}")

# Null scenario: nothing injected, so the mask should stay the identity.
identity = 0
for s in range(n_seeds):
    sc = default_scenario(s, "activation", n_misactivated=0, n_under=0)
    _, report, _ = activation_level_trial(sc, 8, IdentificationConfig(tau=1.4))
    identity += report.is_empty
print(f"\nnull scenario, tau=1.4, N=8: identity mask in {identity}/{n_seeds} seeds")
