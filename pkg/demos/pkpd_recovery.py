"""Recover the tumour-growth equations from simulated PKPD data with the offline proposer."""

import sys

from sparsesr import GrammarProposer, Problem, SearchConfig, run_search, split_dataset
from sparsesr.simgen import CHEMO_RADIO, PKPD_ORACLE_POOL, describe, simulate_pkpd

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
data = split_dataset(simulate_pkpd(CHEMO_RADIO, n_patients=100, seed=seed), (0.7, 0.15, 0.15), seed)
result = run_search(Problem(data, describe("pkpd")), SearchConfig(), GrammarProposer(seed, PKPD_ORACLE_POOL))

print(f"status {result.status}, {result.expansions} expansions, best node {result.best.id}")
print(f"validation MSE {result.best.val_mse:.3e}, test MSE {result.best_test_mse:.3e}")
for line in result.equation:
    print(line)
