"""Round 3: keyword with small beta; entailment with mild hard negatives;
plus beta-ablation and knowledge-ablation calibration."""
import time
import numpy as np
from adanas.data import toy_task_generator
from adanas.engine import SearchConfig, search, train_child
from adanas.losses import build_cost_table, child_cell_flops, child_op_param_count
from adanas.ops import ALL_OPERATIONS, CellTopology, ChildGraph
from adanas.teacher import (SyntheticTeacherSettings, synthetic_teacher,
                            train_probes)

def random_child(rng, embed_dim, task_type):
    topo = CellTopology(3)
    ops = {e: ALL_OPERATIONS[int(rng.integers(0, 10))] for e in topo.edges}
    return ChildGraph(k=int(rng.integers(1, 5)), n_nodes=3, ops=ops,
                      task_type=task_type, embed_dim=embed_dim)

def teacher_for(ds):
    view = synthetic_teacher(
        ds, num_layers=8, hidden_dim=48, seed=0,
        settings=SyntheticTeacherSettings(target_accuracy=0.95, max_epochs=400))
    ids = view.ids
    cut = int(0.8 * len(ids))
    return view, train_probes(view, ids[:cut], ids[cut:])

t0 = time.time()
BASE = dict(k_max=4, n_nodes=3, embed_dim=16, max_len=16, epochs=45,
            warmup_epochs=30, tau_start=2.5, tau_end=0.3, batch_size=32,
            arch_lr=1e-2, sgd_lr_max=3e-2, gamma=0.8)

print("### criterion 7", flush=True)
for kind, size, vocab, ch_ep, beta in (
        ("keyword_sentiment", 400, 40, 6, 0.15),
        ("pair_order_entailment", 800, 40, 12, 0.0)):
    ds = toy_task_generator(kind, size, vocab, seed=0)
    view, probes = teacher_for(ds)
    base = dict(BASE, beta=beta, child_epochs=ch_ep)
    print(f"== {kind} probes_last={probes.dev_accuracy[-1]:.2f}", flush=True)
    for seed in (1, 2, 3):
        cfg = SearchConfig(**{**base, "seed": seed})
        child, _ = search(cfg, ds, view=view, probes=probes)
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

print("### criterion 8 (beta ablation, keyword)", flush=True)
ds = toy_task_generator("keyword_sentiment", 400, 40, seed=0)
view, probes = teacher_for(ds)
table = build_cost_table(16, 16)
for seed in (1, 2, 3):
    row = {}
    for beta in (0.0, 8.0):
        cfg = SearchConfig(**{**BASE, "beta": beta, "child_epochs": 8, "seed": seed})
        child, _ = search(cfg, ds, view=view, probes=probes)
        _, m = train_child(child, ds, cfg, seed=seed)
        cost = child_op_param_count(child, 16) + child_cell_flops(child, table)
        row[beta] = (cost, m.final_dev_accuracy, child.k)
    c0, a0, k0 = row[0.0]
    c8, a8, k8 = row[8.0]
    print(f"  seed{seed}: b0 cost={c0} acc={a0:.2f} K{k0} | "
          f"b8 cost={c8} acc={a8:.2f} K{k8} | "
          f"cost_ok={c8 <= c0} acc_ok={a0 >= a8 - 0.02}", flush=True)

print("### criterion 9 (knowledge ablation, pair_overlap)", flush=True)
ds = toy_task_generator("pair_overlap_equivalence", 600, 30, seed=0)
view, probes = teacher_for(ds)
for seed in (1, 2, 3):
    accs = {}
    for gamma in (0.0, 0.8):
        cfg = SearchConfig(**{**BASE, "gamma": gamma, "beta": 0.0,
                              "child_epochs": 8, "seed": seed})
        child, _ = search(cfg, ds, view=view if gamma else None,
                          probes=probes if gamma else None)
        _, m = train_child(child, ds, cfg, seed=seed)
        accs[gamma] = m.final_dev_accuracy
    print(f"  seed{seed}: g0={accs[0.0]:.3f} g08={accs[0.8]:.3f} "
          f"improved={accs[0.8] > accs[0.0]} "
          f"within1pt={accs[0.8] >= accs[0.0] - 0.01}", flush=True)
print(f"total {time.time()-t0:.0f}s", flush=True)
