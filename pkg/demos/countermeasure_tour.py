# Run the attack against every countermeasure and print what each one changes.
# Run with: python3 demos/countermeasure_tour.py [seed]

import sys
from dataclasses import replace

from dicelab.scenario import BUILTIN, MATRIX, format_matrix, run_matrix, run_scenario

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1

#%% Full report for one variant
print(run_scenario(replace(BUILTIN["additional-input-attack"], seed=seed)).report())

#%% The matrix
rows = run_matrix([replace(BUILTIN[name], seed=seed) for name in MATRIX])
print(format_matrix(rows))

#%% An update that ships without the fix leaves the door open
res = run_scenario(replace(BUILTIN["firmware-update-nofix-attack"], seed=seed))
print("update without fix:", res.attack_outcome, "/", res.final)
