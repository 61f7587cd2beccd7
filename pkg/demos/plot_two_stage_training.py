"""
Two-stage training against the ERM baseline
===========================================

Pretrain on filtered synthetic data, retrain on real data, and compare
worst-group accuracy with plain ERM on the biased split.
"""

from fairgen.metrics import emit_report, evaluate
from fairgen.pipeline import expand_preset, run_experiment

# %%
# The in-memory runner does split, generation, filtering, both stages and evaluation.
rows = []
for name in ("erm", "gdro", "fitted"):
    cfg = expand_preset(name)[0]
    for seed in (0, 1):
        res = run_experiment(cfg, seed)
        rows.append((cfg.label, res.metrics))
        if res.stage1_metrics is not None:
            rows.append((cfg.label + " (stage 1 only)", res.stage1_metrics))

# %%
# Mean and spread over seeds, percentages.
print(emit_report(rows))

# %%
# The same pieces by hand, to swap the stage-2 variant.
from fairgen.toy import generate_shapeworld
from fairgen.training import TrainConfig, erm_baseline, stage2_finetune

ds = generate_shapeworld(expand_preset("fitted")[0].dataset.toy)
train, test = ds.split("train"), ds.split("test")
erm = erm_baseline(train, TrainConfig(learning_rate=0.05))
for variant in ("LLR_all", "LLR_b"):
    m = evaluate(stage2_finetune(erm, train, variant, TrainConfig(learning_rate=0.05)), test)
    print(f"ERM features + {variant}: WGA {m.wga:.2f}, AGA {m.aga:.2f}")
