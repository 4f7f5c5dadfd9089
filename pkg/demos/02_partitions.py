"""How the two non-IID schemes spread labels over clients.

Run: python3 demos/02_partitions.py
"""

import numpy as np

from fedlex.data import PartitionSpec, gen_synthetic, label_entropy, partition

data = gen_synthetic(classes=10, dim=32, per_class=200, separation=3.0, seed=0)
print(f"{len(data)} samples, {data.dim} features, {data.classes} classes")

# pathological: every client sees exactly two labels
shards = partition(data, PartitionSpec("pathological", clients=20, seed=0, classes_per_client=2))
for shard in shards[:4]:
    labels = np.unique(shard.train.labels)
    print(f"client {shard.client_id:>2}: {len(shard.train):>3} train / {len(shard.test):>2} test, labels {labels}")

# Dirichlet: smaller alpha concentrates each class on fewer clients
print("\nalpha   mean label entropy (bits)   smallest client")
for alpha in (0.05, 0.3, 0.6, 100.0):
    shards = partition(data, PartitionSpec("dirichlet", clients=20, seed=0, alpha=alpha))
    entropy = np.mean([label_entropy(s.train.labels, data.classes) for s in shards])
    smallest = min(len(s.train) + len(s.test) for s in shards)
    print(f"{alpha:>6}  {entropy:>26.3f}   {smallest:>15}")
