"""
Ablating the encoder and the decoder
====================================

Four cells: convex-combination encoder or transformer readout, crossed with
cosine/temperature scoring (with candidate dropout) or plain dot products.
With 20% of clicks off-cluster the task is noisy enough to separate them.
This takes several minutes on one core; pass fewer seeds to go faster.
"""

import sys

from sessrec.data import temporal_split
from sessrec.evaluation import bayes_optimal_recall, make_synthetic_corpus
from sessrec.model import ModelConfig
from sessrec.trainer import TrainConfig, ablate, ablation_variants, make_rng

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
corpus = temporal_split(make_synthetic_corpus(200, 10, 5000, (3, 10), 0.8, make_rng(1234)))
print("Bayes-optimal R@20:", round(bayes_optimal_recall(200, 10, 20, 0.8), 4))

variants = ablation_variants(ModelConfig(d=32, n_layers=1, d_ff=64, tau=0.1, rho=0.1))
for name, cfg in variants.items():
    print(f"{name:<14} encoder={cfg.encoder:<9} decoder={cfg.decoder}")

table = ablate(corpus, variants, TrainConfig.desk(batch_size=512, max_epochs=8, patience=3), seeds)
print(table.format())
