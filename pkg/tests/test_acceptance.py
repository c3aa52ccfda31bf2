"""The eleven acceptance criteria, each at its stated tolerance.

Every test records a pass/fail line that is printed in the terminal summary.
"""

import csv
import math
import shutil
import time

import numpy as np
import pytest

import oracles
from conftest import record
from sttree import cli
from sttree import tensor as T
from sttree.checkpoint import load_model
from sttree.data import Dataset, load_dataset, pad_dataset, z_normalize
from sttree.explain import dumps, explain, load_json, export_json, replay_similarity
from sttree.encoder import EncoderConfig
from sttree.gradcheck import check_model, tiny_model
from sttree.model import ModelConfig, STTreeModel
from sttree.params import ParamStore
from sttree.tensor import Tensor
from sttree.trainer import TrainConfig, evaluate, train
from sttree.tree import init_tree, proto_l2_distance_map, routing, traverse

pytestmark = pytest.mark.slow

# name: (train, test, channels, length, classes)
ARCHIVE = {
    "ArticularyWordRecognition": (275, 300, 9, 144, 25),
    "AtrialFibrillation": (15, 15, 2, 640, 3),
    "BasicMotions": (40, 40, 6, 100, 4),
    "CharacterTrajectories": (1422, 1436, 3, 182, 20),
    "HandMovementDirection": (160, 74, 10, 400, 4),
    "NATOPS": (180, 180, 24, 51, 6),
    "PenDigits": (7494, 3498, 2, 8, 10),
    "SelfRegulationSCP2": (200, 180, 7, 1152, 2),
    "SpokenArabicDigits": (6599, 2199, 13, 93, 10),
    "StandWalkJump": (12, 15, 4, 2500, 3),
}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, data_root):
    """Default-config BasicMotions run through the CLI."""
    out = tmp_path_factory.mktemp("bm_default")
    t0 = time.process_time()
    code = cli.main(["train", "--data-root", str(data_root), "--out", str(out), "--seed", "0"])
    cpu = time.process_time() - t0
    assert code == 0
    return out, cpu


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    model, x, y = tiny_model(num_channels=2, length=16, embed_dim=8, depth=2, proto_size=2,
                             num_classes=3, batch=2)
    rep = check_model(model, x, y)
    elapsed = time.perf_counter() - t0
    total = model.store.num_scalars()
    ok = rep.max_rel_err < 1e-4 and elapsed < 60 and rep.checked == total
    record(1, "gradient correctness", ok,
           f"max rel err {rep.max_rel_err:.2e} over {rep.checked}/{total} scalars in {elapsed:.1f}s")
    assert ok


def test_2_distance_oracle():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    pairs = 0
    for p, k in [(8, 2), (16, 3), (32, 5)]:
        for _ in range(1000):
            z = rng.uniform(-2, 2, size=p)
            proto = rng.uniform(0, 1, size=k)
            got = proto_l2_distance_map(Tensor(z.reshape(1, 1, p)), Tensor(proto.reshape(1, 1, k)))
            worst = max(worst, float(np.abs(got.data.ravel() - oracles.sliding_l2(z, proto)).max()))
            pairs += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    record(2, "distance oracle equivalence", ok,
           f"{pairs} pairs, max abs diff {worst:.1e}, {elapsed:.1f}s")
    assert ok


def _enumerate(tree, trav):
    b = trav.y_hat.shape[0]
    mix = np.zeros(trav.y_hat.shape)
    total = np.zeros(b)
    for leaf in tree.leaf_indices:
        rho = np.ones(b)
        node = leaf
        while node > 1:
            r = trav.routes[node // 2]
            rho = rho * (r.to_right.data if node % 2 else r.to_left.data)
            node //= 2
        total += rho
        mix += rho[:, None] * trav.leaf_probs[leaf].data
    return mix, total


def test_3_soft_partition():
    rng = np.random.default_rng(3)
    worst_rho = worst_rows = worst_mix = 0.0
    settings = 0
    with T.no_grad():
        for s in range(1000):
            depth = 1 + s % 4
            tree = init_tree(ParamStore(int(rng.integers(2**31))), depth, 3, 2, 4)
            # perturb projection so routing spans the clamp range, including saturation
            tree.proj_w.data *= rng.uniform(0.1, 10)
            tree.proj_b.data += rng.normal()
            patches = Tensor(rng.normal(scale=2, size=(3, 6, 4)))
            trav = traverse(tree, patches, Tensor(rng.normal(size=(3, 3))))
            mix, total = _enumerate(tree, trav)
            worst_rho = max(worst_rho, float(np.abs(trav.rho_matrix().sum(axis=1) - 1).max()),
                            float(np.abs(total - 1).max()))
            worst_rows = max(worst_rows, float(np.abs(trav.y_hat.data.sum(axis=1) - 1).max()))
            worst_mix = max(worst_mix, float(np.abs(trav.y_hat.data - mix).max()))
            settings += 1
    ok = worst_rho <= 1e-9 and worst_rows <= 1e-9 and worst_mix <= 1e-10
    record(3, "soft-partition invariant", ok,
           f"{settings} settings, |sum rho - 1| {worst_rho:.1e}, |sum y - 1| {worst_rows:.1e}, "
           f"recursive vs flat {worst_mix:.1e}")
    assert ok


def test_4_routing_normalization():
    rng = np.random.default_rng(4)
    exact = 0
    for _ in range(1000):
        r = routing(Tensor(rng.uniform(-3, 3, size=(4, 1, 10))), Tensor(rng.uniform(size=(1, 1, 3))))
        exact += int(np.all(r.to_left.data + r.to_right.data == 1.0))
    model = STTreeModel(ModelConfig(EncoderConfig(num_channels=3, num_classes=4, embed_dim=8,
                                                  mlp_hidden=16), depth=3, seed=4))
    model.tree.proj_w.data[:] = 0.0
    model.tree.proj_b.data[:] = 0.25
    model.tree.prototypes.data[:] = 0.25
    with T.no_grad():
        trav = model.forward(Tensor(rng.normal(size=(5, 3, 32)))).traversal
    hard = all(np.all(r.to_left.data == 1.0) for r in trav.routes.values())
    same = np.array_equal(trav.y_hat.data, trav.leaf_probs[8].data)
    ok = exact == 1000 and hard and same
    record(4, "routing normalization", ok,
           f"exact sum in {exact}/1000 batches; saturated routing reproduces leftmost leaf: {same}")
    assert ok


def test_5_parser_fidelity(data_root):
    found = {}
    for name, expected in ARCHIVE.items():
        if not (data_root / name).is_dir():
            continue
        train_ds, test_ds = load_dataset(data_root, name)
        found[name] = ((len(train_ds), len(test_ds), train_ds.num_channels, train_ds.series_length,
                        train_ds.num_classes), expected)
    ok = "BasicMotions" in found and all(got == exp for got, exp in found.values())
    detail = "; ".join(f"{n} {got}" for n, (got, _) in found.items())
    missing = len(ARCHIVE) - len(found)
    record(5, "parser fidelity", ok, f"{detail}; {missing} archive datasets not vendored")
    assert ok


def test_6_desk_scale_accuracy(trained_run, data_root):
    out, cpu = trained_run
    model = load_model(out / "model.ckpt")
    assert model.config.depth == 3
    train_ds, test_ds = load_dataset(data_root, "BasicMotions")
    train_ds, stats = z_normalize(train_ds)
    test_ds, _ = z_normalize(test_ds, stats)
    acc = evaluate(model, pad_dataset(test_ds, 4))["accuracy"]
    epochs = sum(1 for _ in open(out / "metrics.csv")) - 1
    ok = acc >= 0.75 and cpu < 20 * 60 and epochs == 50
    record(6, "desk-scale training", ok,
           f"test accuracy {acc:.3f} (floor 0.75, reference 0.950) after {epochs} epochs, "
           f"{cpu:.0f} CPU-s")
    assert ok


def test_7_overfit_sanity(data_root):
    train_ds, _ = load_dataset(data_root, "BasicMotions")
    train_ds, _ = z_normalize(train_ds)
    idx = np.concatenate([np.flatnonzero(train_ds.labels == c)[:2] for c in range(4)])
    subset = pad_dataset(train_ds.subset(idx), 4)
    model = STTreeModel(ModelConfig(EncoderConfig(num_channels=6, num_classes=4), depth=3, seed=0))
    reached = None

    def watch(row):
        nonlocal reached
        if reached is None and evaluate(model, subset)["accuracy"] == 1.0:
            reached = row["epoch"]

    train(model, subset, None, TrainConfig(epochs=200, batch_size=8), progress=watch)
    ok = reached is not None and reached <= 200
    record(7, "overfit sanity", ok, f"8 samples, 100% train accuracy at epoch {reached}")
    assert ok


def test_8_ablation_harness(tmp_path, data_root):
    code = cli.main(["ablate", "--data-root", str(data_root), "--out", str(tmp_path), "--repeats", "3"])
    rows = {r["variant"]: r for r in csv.DictReader(open(tmp_path / "ablation.csv"))}
    seeds = [c for c in rows["full"] if c.startswith("test_acc_seed")]
    acc = {v: [float(rows[v][c]) for c in seeds] for v in rows}
    wins = sum(all(acc["full"][i] >= acc[v][i] for v in ("no_tree", "no_attention"))
               for i in range(len(seeds)))
    ok = code == 0 and list(rows) == ["full", "no_tree", "no_attention"] and len(seeds) == 3 and wins >= 2
    record(8, "ablation harness", ok,
           "; ".join(f"{v} {acc[v]}" for v in acc) + f"; full >= both ablations in {wins}/3 seeds")
    assert ok


def test_9_depth_sweep(tmp_path, data_root):
    code = cli.main(["sweep-depth", "--data-root", str(data_root), "--out", str(tmp_path)])
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    depths = [int(r["depth"]) for r in rows]
    leaves = [int(r["leaves"]) for r in rows]
    ok = (code == 0 and depths == [3, 4, 5, 6] and leaves == [2 ** d for d in depths]
          and all(a < b for a, b in zip(leaves, leaves[1:])))
    record(9, "depth sweep", ok,
           ", ".join(f"d={r['depth']} leaves={r['leaves']} test={float(r['test_acc']):.3f}" for r in rows))
    assert ok


def test_10_explanation_faithfulness(trained_run, data_root, tmp_path):
    out, _ = trained_run
    model = load_model(out / "model.ckpt")
    train_ds, test_ds = load_dataset(data_root, "BasicMotions")
    train_ds, stats = z_normalize(train_ds)
    test_ds, _ = z_normalize(test_ds, stats)
    pool = np.concatenate([train_ds.values, test_ds.values])
    rng = np.random.default_rng(10)
    # 100 random instances: drawn from both splits and jittered so none repeats
    x = pool[rng.integers(0, len(pool), 100)] + rng.normal(scale=0.05, size=(100, 6, 100))
    ds = Dataset("Jitter", x, np.zeros(100, dtype=np.int64), train_ds.class_names)
    predicted = evaluate(model, ds)["predictions"]
    paths = explain(model, x, sample_ids=[f"r{i}" for i in range(100)])
    with T.no_grad():
        routes = model.forward(Tensor(x)).traversal.routes
    agree = replay_ok = round_trip = 0
    worst = 0.0
    for s, p in enumerate(paths):
        agree += int(np.argmax(p.leaf_distribution) == predicted[s] == p.predicted)
        errs = [abs(replay_similarity(routes[n.i].signal[s], model.tree.prototype(n.i).data.ravel(),
                                      n.patch_index) - n.similarity) for n in p.nodes]
        worst = max(worst, max(errs))
        replay_ok += int(max(errs) <= 1e-9)
        a = tmp_path / f"{s}.json"
        export_json(p, a)
        round_trip += int(dumps(load_json(a)) == a.read_text())
    ok = agree == replay_ok == round_trip == 100
    record(10, "explanation faithfulness", ok,
           f"argmax agrees {agree}/100, replay within 1e-9 {replay_ok}/100 (max {worst:.1e}), "
           f"byte round-trip {round_trip}/100")
    assert ok


def test_11_determinism(tmp_path, data_root):
    out = tmp_path / "run"
    saved = []
    for k in range(2):
        assert cli.main(["train", "--data-root", str(data_root), "--out", str(out), "--seed", "7"]) == 0
        keep = tmp_path / f"copy{k}"
        shutil.copytree(out, keep)
        shutil.rmtree(out)
        saved.append(keep)
    names = ["model.ckpt", "model.ckpt.json", "metrics.csv"]
    same = {n: (saved[0] / n).read_bytes() == (saved[1] / n).read_bytes() for n in names}
    ok = all(same.values())
    record(11, "determinism", ok, ", ".join(f"{n} {'identical' if v else 'DIFFERS'}" for n, v in same.items()))
    assert ok
