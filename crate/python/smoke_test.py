"""Smoke test for the `fantasy` extension module.

Build and install first:  pip install ./crates/python
Run:                      python python/smoke_test.py
"""

import os
import random
import tempfile

import fantasy


def mixture(n, dim, centers, seed):
    rng = random.Random(seed)
    means = [[rng.uniform(-10, 10) for _ in range(dim)] for _ in range(centers)]
    rng = random.Random(seed + 1)
    return [[x + rng.gauss(0, 1) for x in rng.choice(means)] for _ in range(n)]


def main():
    db = mixture(800, 16, 8, 1)
    queries = db[:20]

    index = fantasy.Index.build(db, num_clusters=8, out_degree=8, ranks=4, ranks_per_node=2, seed=3)
    assert index.dim == 16 and index.num_clusters == 8 and index.ranks == 4
    assert sum(index.partition_sizes()) == len(db)

    biggest = max(index.partition_sizes())
    res = index.query(queries, k=5, fan_out=8, iterations=biggest, beam_width=1, entry_count=biggest)
    for qi, (ids, dists) in enumerate(zip(res.ids, res.distances)):
        truth = fantasy.brute_force(db, queries[qi], 5)
        assert ids == [i for i, _ in truth], (qi, ids, truth)
        assert ids[0] == qi and dists[0] == 0.0
    assert res.timeline_csv.startswith("rank,lane,stage,mb,start,end")

    seq = index.query(queries, k=5, mode="sequential")
    two = index.query(queries, k=5, mode="two_microbatch")
    assert seq.ids == two.ids and two.makespan <= seq.makespan

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "index.fnsy")
        index.save(path)
        assert fantasy.Index.load(path).to_bytes() == index.to_bytes()
        fv = os.path.join(tmp, "db.fvecs")
        fantasy.save_fvecs(fv, db[:3])
        back = fantasy.load_fvecs(fv)
        assert all(abs(a - b) < 1e-5 for r, s in zip(back, db[:3]) for a, b in zip(r, s))

    report = fantasy.cost_report()
    assert report["bytes_per_query"] == 3538944
    assert abs(report["t_dispatch_s"] - 3.84e-3) < 1e-6
    assert report["t_combine_s"] == 3 * report["t_dispatch_s"]

    makespan, intervals = fantasy.replay_schedule((1, 1, 1, 1), (1, 1, 1, 1))
    assert makespan == 5.0 and len(intervals) == 8
    assert fantasy.replay_schedule((1, 1, 1, 1), (1, 1, 1, 1), "sequential")[0] == 8.0

    try:
        index.query([[0.0] * 3])
    except ValueError:
        pass
    else:
        raise AssertionError("dimension mismatch not rejected")

    print("smoke test passed")


if __name__ == "__main__":
    main()
