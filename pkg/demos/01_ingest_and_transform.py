"""Walk through ingestion and the logit-scale observation transforms.

Loads the bundled subnational demo data, shows the check report, converts one
sector triple to its two logit observations, and round-trips the canonical CSV.
"""

import tempfile
from pathlib import Path

from supplyshare import build_model_inputs, delta_method_var, load_survey_data, to_logit_obs

dataset = load_survey_data("demo_subnational", national=False)
print("ingest report:")
for line in dataset.report.lines():
    print(" ", line)
print("populations:", dataset.populations())
print("methods:", [m.value for m in dataset.methods()])

# one (population, year, method) group -> public share + private-medical ratio
group = dataset.observations[:3]
for obs in group:
    print(f"  {obs.sector.value:<20} p={obs.proportion:.4f} se={obs.se:.4f} n={obs.n}")
logit_rows = to_logit_obs(group)
for row in logit_rows:
    print(f"  s={row.s}: y={row.y_logit:+.4f} var={row.var_logit:.5f}")

# the delta-method variance behind those rows
p, se = group[0].proportion, group[0].se
print(f"delta_method_var({p:.4f}, {se:.4f}) = {delta_method_var(p, se):.6f}")

# canonical re-emission is idempotent
with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "canonical.csv"
    dataset.to_csv(out)
    again = load_survey_data(out, national=False, geography="demo")
    print("re-ingested equals original:", again == dataset)

inputs = build_model_inputs(dataset, 2005.0, 2020.0, nsegments=4)
print(f"model inputs: {len(inputs.observations)} logit rows, "
      f"{inputs.n_pop} populations, K={inputs.n_coef} coefficients")
