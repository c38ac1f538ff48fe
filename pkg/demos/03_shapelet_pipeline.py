"""Pre-train, fine-tune and inspect on a small planted-shapelet task.

Each sequence is noise with one class-specific waveform dropped in at a
random offset. We pre-train with next/previous token prediction, fine-tune a
linear head on the final-layer [SOS] row, then ask where the classifier
looks: gradient saliency of the prediction loss on the final embeddings
and the combined forward/backward heatmap are compared against the known
shapelet span.

Sized to finish in about a minute on one CPU core; the acceptance suite
runs the full-size version.
"""

import numpy as np

from baar.analysis import combined_bidirectional_heatmap, region_score_stats, saliency, saliency_localization_rate
from baar.data import gen_shapelet_dataset
from baar.model import BaarModel, ModelConfig
from baar.training import TrainConfig, evaluate, finetune, finetune_subset, split_indices, train_pretrain

ds = gen_shapelet_dataset(300, 256, V=1, n_classes=2, snr=5.0, seed=0)
train, valid, test = split_indices(len(ds), seed=0)
ft = finetune_subset(train, 0.2, seed=0)
print(f"{len(train)} train / {len(valid)} valid / {len(test)} test, fine-tuning on {len(ft)}")

model = BaarModel(ModelConfig(n_layers=4, d_model=32, n_heads=4, feature_dim=1, seed=0))
pre = train_pretrain(model, ds.sequences[train], TrainConfig(pretrain_epochs=4, batch_size=32), "next_previous")
print("pre-training loss per epoch:", [round(v, 3) for v in pre.losses])

res = finetune(
    model, ds.sequences[ft], ds.labels[ft], TrainConfig(finetune_epochs=15, lr=1e-4, batch_size=16),
    eval_data=ds.sequences[valid], eval_labels=ds.labels[valid],
)
print("fine-tune loss per epoch:", [round(v, 3) for v in res.losses])
metrics = evaluate(model, ds.sequences[test], ds.labels[test])
print(f"test accuracy {metrics['accuracy']:.3f}, per-class AUPRC {np.round(metrics['auprc'], 3).tolist()}")

maps = saliency(model, ds.sequences[test], spans=ds.shapelet_spans[test])
print(f"saliency higher on the shapelet than elsewhere for {saliency_localization_rate(maps):.0%} of test sequences")

i = int(test[0])
out, _ = model.encode(ds.sequences[i : i + 1], capture=True)
heat = combined_bidirectional_heatmap(out)
stats = region_score_stats(heat, ds.shapelet_spans[i])
print(f"sequence {i}: heatmap {heat.shape}, shapelet mean {stats.shapelet_mean:.4f} vs background {stats.background_mean:.4f}")
