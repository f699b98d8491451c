"""Size the NMOS OTA with a surrogate-trained PPO agent and compare with PPO on the oracle."""
from ckt_surrogate import (
    InsightConfig, InsightMConfig, PPOConfig, TrainRunConfig, build_dataset, default_task,
    insight_m_run, pure_ppo_baseline, split, train_insight,
)

# Pre-train the surrogate once; its training data is reused as fine-tuning ballast.
pre, _ = split(build_dataset("ota2_nmos", "synth45", 1500, seed=1), 1500, 0, seed=0)
ck, _ = train_insight(pre, InsightConfig(), TrainRunConfig(epochs=40, seed=0))

task = default_task("ota2_nmos", seed=0, budget=50)
print("targets:", [(c.metric, c.direction, c.threshold) for c in task.fom.constraints])

# INSIGHT-M: PPO runs entirely inside the surrogate; only the chosen endpoint of
# each round is simulated, and failures are fed back as fine-tuning data.
res = insight_m_run(task, ck, PPOConfig(seed=0), InsightMConfig(), pretrain=pre)
print("\nINSIGHT-M")
print(res.text())

# Plain PPO pays one real simulation for every environment step.
base = pure_ppo_baseline(default_task("ota2_nmos", seed=0, budget=20000), PPOConfig(seed=0))
print(f"\npure PPO: success {base.success} after {base.sims} real simulations")
