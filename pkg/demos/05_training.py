"""Training abstention models on synthetic data.

Two-stage: fit a predictor with logistic loss, freeze it, then fit a rejector
with the exponential two-stage surrogate. Single-stage: train both jointly
with the MAE surrogate. The noisy mixture has a region of label noise where
the rejector should learn to abstain.
"""
import numpy as np

from abstain_lab.core import LossSpec
from abstain_lab.learn import TrainConfig, evaluate, forward, train_single_stage, train_two_stage
from abstain_lab.synth import gen_noisy_mixture, gen_realizable

c = 0.2
stage1 = TrainConfig(LossSpec(inner="logistic"), cost=c, epochs=30, stage="two_stage_stage1")
stage2 = TrainConfig(LossSpec(family="two_stage", phi="exponential"), cost=c, epochs=30, stage="two_stage_stage2")

train, test = gen_noisy_mixture(3, 5, 4000, 0.3, 0.9, seed=0).split(0.8, seed=0)
model = train_two_stage(train, stage1, stage2)
met = evaluate(model, test, c)
scores, _ = forward(model, test.features)
print("noisy mixture, two stage")
print(f"  abstention loss {met.abstention_loss:.4f}, stage-1 error "
      f"{np.mean(scores.argmax(axis=1) != test.labels):.4f}")
print(f"  rejection ratio {met.rejection_ratio:.3f}, noisy region mass {np.mean(test.features[:, 0] < 0.3):.3f}")

train, test = gen_realizable(3, 10, 3000, 0.2, seed=0).split(0.8, seed=0)
single = train_single_stage(train, TrainConfig(LossSpec.admissible("mae"), cost=0.1, epochs=30))
print(f"realizable, single stage MAE: held-out abstention loss {evaluate(single, test, 0.1).abstention_loss:.4f}")
