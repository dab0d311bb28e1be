"""Why the two teachers are distilled rather than averaged: two EMA copies of
one student never separate, while two distilled teachers fed different
batches drift apart, and their disagreement becomes a usable confidence."""
import numpy as np

from handadapt import nethead as nh
from handadapt import synthhands as sh
from handadapt import trainer as tr

src = sh.build_dataset(sh.source_domain(), 200)
tgt = sh.build_dataset(sh.target_domain(), 200)
init = nh.build_network(nh.ArchConfig(), seed=0)

for rule in ("ema", "distill"):
    cfg = tr.TrainConfig(method="cgac", teacher_update=rule, adapt_steps=100)
    st = tr.init_state(cfg, init)
    dist = []
    for step in range(100):
        row = tr.adapt_step(st, cfg, src, tgt)
        if step % 25 == 24:
            dist.append(st.teacher1.params.distance(st.teacher2.params))
    print(f"{rule:7s} teacher distance at steps 25/50/75/100: {np.round(dist, 6)}  last w_mean {row['w_mean']:.4f}")
