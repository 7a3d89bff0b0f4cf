"""
Building the parent network
===========================

A parent network chains M complete DAGs. Each DAG has N nodes, and each node
owns one weight set per candidate op and per channel block. Every node pair
(i < j) carries a K x K matrix gamma that routes source blocks into target blocks.
"""

import numpy as np

from renas.autograd import Tensor
from renas.config import SearchConfig
from renas.supergraph import build_parent, count_params, network_forward

cfg = SearchConfig(M=2, N=4, K=2, C0=8, classes=4, image_size=16)
net = build_parent(cfg)

# the first node of each stage halves resolution and doubles width
for dag in net.dags:
    print(f"dag {dag.dag_index}:", [(n.node_index, n.channels, n.stride) for n in dag.nodes])

# N(N-1)/2 node pairs per DAG, each a K x K block of gammas initialised to 1/K
print("gamma matrices per dag:", len(net.dags[0].gamma), "shape", net.dags[0].gamma[(0, 1)].shape)
print("weight scalars in the parent:", count_params(net))

# a forward pass needs one op choice per node; here every node uses op 0
x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16, 16)))
choices = [[0] * cfg.N for _ in range(cfg.M)]
print("logits shape:", network_forward(net, x, choices).shape)
