"""Focused recalibration: keyword with beta pressure; entailment redesigned."""
import time
import numpy as np
from adanas.data import toy_task_generator
from adanas.engine import SearchConfig, search, train_child
from adanas.ops import ALL_OPERATIONS, CellTopology, ChildGraph
from adanas.ops import OperationKind as OK
from adanas.teacher import (SyntheticTeacherSettings, synthetic_teacher,
                            train_probes)

def random_child(rng, embed_dim, task_type):
    topo = CellTopology(3)
    ops = {e: ALL_OPERATIONS[int(rng.integers(0, 10))] for e in topo.edges}
    return ChildGraph(k=int(rng.integers(1, 5)), n_nodes=3, ops=ops,
                      task_type=task_type, embed_dim=embed_dim)

def archetype(op, k, embed_dim, task_type):
    topo = CellTopology(3)
    return ChildGraph(k=k, n_nodes=3, ops={e: op for e in topo.edges},
                      task_type=task_type, embed_dim=embed_dim)

t0 = time.time()
SPECS = [
    ("keyword_sentiment", dict(size=400, vocab=40, child_epochs=7, beta=0.5)),
    ("pair_order_entailment", dict(size=800, vocab=40, child_epochs=15, beta=0.0)),
]
for kind, spec in SPECS:
    ds = toy_task_generator(kind, spec["size"], spec["vocab"], seed=0)
    view = synthetic_teacher(
        ds, num_layers=8, hidden_dim=48, seed=0,
        settings=SyntheticTeacherSettings(target_accuracy=0.95, max_epochs=400))
    ids = view.ids
    cut = int(0.8 * len(ids))
    probes = train_probes(view, ids[:cut], ids[cut:])
    base = dict(k_max=4, n_nodes=3, embed_dim=16, max_len=16, gamma=0.8,
                beta=spec["beta"], epochs=45, warmup_epochs=30, tau_start=2.5,
                tau_end=0.3, batch_size=32, child_epochs=spec["child_epochs"],
                arch_lr=1e-2, sgd_lr_max=3e-2)
    cfg0 = SearchConfig(**{**base, "seed": 0})
    print(f"== {kind} probes={[round(a,2) for a in probes.dev_accuracy]}", flush=True)
    for name, child in [("conv3-K1", archetype(OK.STD_CONV_3, 1, 16, ds.task_type)),
                        ("conv3-K2", archetype(OK.STD_CONV_3, 2, 16, ds.task_type)),
                        ("conv5-K1", archetype(OK.STD_CONV_5, 1, 16, ds.task_type)),
                        ("skip-K1", archetype(OK.SKIP, 1, 16, ds.task_type)),
                        ("maxpool-K1", archetype(OK.MAX_POOL_3, 1, 16, ds.task_type))]:
        accs = [train_child(child, ds, cfg0, seed=s)[1].final_dev_accuracy
                for s in (5, 6)]
        print(f"  archetype {name}: {[round(a,3) for a in accs]}", flush=True)
    for seed in (1, 2, 3):
        cfg = SearchConfig(**{**base, "seed": seed})
        child, rep = search(cfg, ds, view=view, probes=probes)
        _, sm = train_child(child, ds, cfg, seed=seed)
        rng = np.random.default_rng([seed, 999])
        rand = []
        for r in range(5):
            rc = random_child(rng, 16, ds.task_type)
            _, rm = train_child(rc, ds, cfg, seed=seed * 100 + r)
            rand.append(rm.final_dev_accuracy)
        verdict = "BEAT" if sm.final_dev_accuracy > np.mean(rand) else "no"
        print(f"  seed{seed}: searched={sm.final_dev_accuracy:.3f} (K{child.k}) "
              f"rand_mean={np.mean(rand):.3f} rands={[round(a,2) for a in rand]} "
              f"{verdict}", flush=True)
        print(f"    {child.encode()}", flush=True)
print(f"total {time.time()-t0:.0f}s", flush=True)
