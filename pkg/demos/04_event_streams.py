"""Discrete codes on an irregular month axis.

Each patient is a list of diagnosis codes with month stamps. Gaps feed the
decay directly (gamma ** months) and, by default, the rotary phase too.
Labels are rule-based phenotypes: a phenotype is positive when all of its
codes appear. Pre-training uses cross-entropy over the code vocabulary;
fine-tuning is multi-label and reports AUPRC per phenotype.
"""

import math

import numpy as np

from baar.data import DEFAULT_RULES, gen_event_streams
from baar.model import BaarModel, ModelConfig
from baar.training import TrainConfig, evaluate, finetune, split_indices, subset, train_pretrain

vocab = 47
streams = gen_event_streams(240, vocab=vocab, mean_events=20, seed=0)
gaps = np.concatenate([np.diff(s.timestamps) for s in streams])
print(f"{len(streams)} patients, {sum(len(s) for s in streams)} events, mean gap {gaps.mean():.2f} months")
print("phenotype prevalence:", {r.name: round(float(np.mean([s.labels[j] for s in streams])), 2) for j, r in enumerate(DEFAULT_RULES)})

train, _, test = split_indices(len(streams), seed=0)
model = BaarModel(ModelConfig(n_layers=2, d_model=32, n_heads=4, vocab_size=vocab, seed=0))
pre = train_pretrain(model, subset(streams, train), TrainConfig(pretrain_epochs=3, batch_size=16))
print(f"pre-training loss {[round(v, 3) for v in pre.losses]} (two uniform guesses would be {2 * math.log(vocab):.3f})")

labels = np.stack([s.labels for s in streams])
finetune(model, subset(streams, train), labels[train], TrainConfig(finetune_epochs=8, lr=1e-3, batch_size=16), task="multilabel")
metrics = evaluate(model, subset(streams, test), labels[test], "multilabel")
print("test AUPRC:", {r.name: round(v, 3) for r, v in zip(DEFAULT_RULES, metrics["auprc"])}, f"macro {metrics['auprc_macro']:.3f}")
