from . import __version__ as app_version

app_name = "counterfact"
app_title = "Counterfact"
app_publisher = "Counterfact Contributors"
app_description = "Off-policy evaluation and learning from logged bandit feedback"
app_license = "MIT"

# Fixtures
# --------
# Environment specs shipped with the package, loadable by name from the CLI
fixtures = {
    "canonical": "canonical_env.json",
    "constant-reward": "constant_reward_env.json",
    "one-hot": "one_hot_env.json",
}

# Commands
# --------
# CLI subcommand -> handler

commands = {
    "theorem": "counterfact.counterfact.commands.cmd_theorem",
    "gradcompare": "counterfact.counterfact.commands.cmd_gradcompare",
    "bench": "counterfact.counterfact.commands.cmd_bench",
    "fit": "counterfact.counterfact.commands.cmd_fit",
    "evaluate": "counterfact.counterfact.commands.cmd_evaluate",
    "sample": "counterfact.counterfact.commands.cmd_sample",
    "convert": "counterfact.counterfact.commands.cmd_convert",
}

# Estimators
# ----------
# Names accepted by `counterfact evaluate --estimator`

estimators = {
    "ips": "counterfact.counterfact.estimators.ips_value",
    "capped_ips": "counterfact.counterfact.estimators.capped_ips_value",
    "snips": "counterfact.counterfact.estimators.snips_value",
    "mlips": "counterfact.counterfact.estimators.mlips_value",
    "ips_uniform": "counterfact.counterfact.estimators.uniform_ips_value",
}

# Training Methods
# ----------------

training_methods = "counterfact.counterfact.learning.METHODS"

bench_methods = ["IPS", "POEM", "Norm-POEM", "MLIPS", "MLPOEM", "IPS-Uniform"]
