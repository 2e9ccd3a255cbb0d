"""Out-of-sample validation: hold out each population's last survey, refit,
score the posterior predictive, and print the report table.
"""

import warnings

from supplyshare import (
    ModelSpec,
    SamplerConfig,
    ZeroCovariance,
    build_model_inputs,
    compare_models,
    holdout_split,
    load_survey_data,
    metrics,
    predictive_errors,
    run_chains,
)
from supplyshare.model_core import Level, Scope

dataset = load_survey_data("demo_national", national=True)
train, test = holdout_split(dataset, "leave_last_survey")
print(f"train rows: {len(train.observations)}, test rows: {len(test.observations)}")

inputs = build_model_inputs(train, 2000.0, 2020.0, nsegments=4)
spec = ModelSpec(
    level=Level.NATIONAL, scope=Scope.MULTI_COUNTRY,
    start_year=2000.0, end_year=2020.0, nsegments=4,
    methods=inputs.methods, correlation=ZeroCovariance(),
)
config = SamplerConfig(n_iter=4000, n_burnin=1500, n_thin=5, n_chains=2, seed=6)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    output = run_chains(spec, inputs, config, monitor=("alpha_cms",))

report = metrics(predictive_errors(output, test, seed=1))
print(report.to_text())

# comparing a model with itself gives all-zero deltas
rows = compare_models(report, report)
print("self-comparison coverage deltas:", [r["coverage95_delta"] for r in rows])
