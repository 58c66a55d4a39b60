"""Acceptance gate: nine criteria, each one test, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
"""

import json
import sys
import time

import numpy as np
import pytest

import oracles
from finealign import diffcore as dc
from finealign import evalkit, losses, selfcheck, toyworld, trainer
from finealign.cli import main as cli_main
from finealign.curation import (
    AttributeLexicon,
    attribute_positions,
    generate_hard_negatives,
    nms_filter,
    sanitize_caption,
)
from finealign.encoders import DualEncoder, TextConfig, VisionConfig, Vocabulary, extend_position_embeddings
from finealign.regionops import RegionBox, roi_align_average, roi_weights


@pytest.fixture
def criterion(record_property):
    def note(number, title, detail):
        record_property("criterion", number)
        record_property("title", title)
        record_property("detail", detail)

    return note


# -- 1 --------------------------------------------------------------------------------------------


def test_gradient_correctness(criterion):
    start = time.perf_counter()
    model = selfcheck.tiny_model(0)
    images = np.random.default_rng(0).normal(0, 0.5, (2, 8, 8, 3))
    n = sum(p.data.size for p in model.params.values())
    # every coordinate of every parameter, no sampling
    err = dc.finite_difference_check(selfcheck.full_objective(model, images), model.params, h=1e-5)
    seconds = time.perf_counter() - start
    criterion(1, "gradient correctness", f"max rel err {err:.2e} over {n} entries in {seconds:.1f}s")
    assert err < 1e-4
    assert seconds < 60


# -- 2 --------------------------------------------------------------------------------------------


def test_loss_oracles(criterion):
    rng = np.random.default_rng(2)
    worst_global = worst_regional = worst_hard = 0.0
    for _ in range(100):
        n, d = int(rng.integers(1, 17)), int(rng.integers(2, 9))
        tau = float(rng.uniform(0.01, 1.0))
        v, t = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        want = oracles.symmetric_cross_entropy(v.tolist(), t.tolist(), tau)
        worst_global = max(worst_global, abs(float(losses.global_contrastive_loss(v, t, tau).data) - want))
        k = int(rng.integers(1, 17))
        r, p = rng.normal(size=(k, d)), rng.normal(size=(k, d))
        want = oracles.symmetric_cross_entropy(r.tolist(), p.tolist(), tau)
        worst_regional = max(worst_regional, abs(float(losses.regional_contrastive_loss(r, p, tau).data) - want))
        cands = [rng.normal(size=(int(rng.integers(1, 12)), d)) for _ in range(k)]
        want = oracles.hard_negative(r.tolist(), [c.tolist() for c in cands], tau)
        worst_hard = max(worst_hard, abs(float(losses.hard_negative_loss(r, cands, tau).data) - want))
    pair = float(losses.global_contrastive_loss(np.eye(2), np.eye(2), 1.0).data)
    cands = np.zeros((1, 11, 11))
    cands[0] = np.eye(11)
    ten = float(losses.hard_negative_loss(np.eye(11)[:1], cands, 1.0).data)
    criterion(
        2,
        "loss oracles",
        f"gaps global {worst_global:.1e} regional {worst_regional:.1e} hard {worst_hard:.1e}; "
        f"closed forms {pair:.4f} and {ten:.4f}",
    )
    assert max(worst_global, worst_regional, worst_hard) < 1e-10
    assert abs(pair - 0.3133) < 1e-3 and abs(ten - 1.543) < 1e-3


# -- 3 --------------------------------------------------------------------------------------------


def test_positional_extension(criterion):
    table = np.random.default_rng(3).normal(size=(77, 32))
    out = extend_position_embeddings(table)
    prefix = out.shape == (248, 32) and out[:20].tobytes() == table[:20].tobytes()
    # rows 20 + 4m are knots at source row 20 + m, up to the last source row
    knots = all(out[20 + 4 * m].tobytes() == table[20 + m].tobytes() for m in range(57))
    worst = 0.0
    for i in range(20, 248):
        want = np.array(oracles.interpolate_row(table.tolist(), i))
        worst = max(worst, float(np.abs(out[i] - want).max()))
    criterion(3, "positional extension", f"shape {out.shape}, prefix exact {prefix}, knots exact {knots}, interior gap {worst:.1e}")
    assert prefix and knots and worst < 1e-12


# -- 4 --------------------------------------------------------------------------------------------


def _random_boxes(rng, n):
    coords = np.linspace(0.0, 1.0, 6)  # coarse lattice so overlaps and exact duplicates are common
    confidences = [0.3, 0.4, 0.41, 0.5, 0.5, 0.7, 0.9, 0.9]
    boxes = []
    for _ in range(n):
        x = np.sort(rng.choice(coords, 2, replace=False))
        y = np.sort(rng.choice(coords, 2, replace=False))
        conf = confidences[int(rng.integers(len(confidences)))] if rng.random() < 0.5 else float(rng.uniform(0.2, 1.0))
        boxes.append(RegionBox(float(x[0]), float(y[0]), float(x[1]), float(y[1]), conf))
    return boxes


def test_roi_align_and_nms_oracles(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        w, g, d = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        grid = rng.normal(size=(w, w, d))
        x, y = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
        if x[1] - x[0] < 1e-6 or y[1] - y[0] < 1e-6:
            continue
        box = (float(x[0]), float(y[0]), float(x[1]), float(y[1]))
        worst = max(worst, float(np.abs(roi_align_average(grid, box, g).data - oracles.roi_mean(grid.tolist(), box, g)).max()))
    full_exact = True
    for w in range(1, 9):
        grid = rng.normal(size=(w, w, 3))
        flat = grid.reshape(w * w, 3)
        weights = roi_weights((0.0, 0.0, 1.0, 1.0), w, w)
        got = roi_align_average(grid, (0.0, 0.0, 1.0, 1.0), w).data
        # samples land on token centres, so the weights are exactly uniform; the
        # pooled vector is then the uniform sum, equal to np.mean up to summation order
        full_exact &= bool(np.array_equal(weights, np.full(w * w, 1.0 / (w * w))))
        full_exact &= bool(np.array_equal(got, (np.full((1, w * w), 1.0 / (w * w)) @ flat)[0]))
        full_exact &= bool(np.allclose(got, flat.mean(axis=0), rtol=0, atol=4 * np.finfo(float).eps))

    mismatches = 0
    gate_ok = True
    for _ in range(10_000):
        boxes = _random_boxes(rng, int(rng.integers(0, 9)))
        want = oracles.nms_subset_search([(b.x1, b.y1, b.x2, b.y2, b.confidence) for b in boxes])
        got = nms_filter(boxes)
        mismatches += got != [boxes[i] for i in want]
        gate_ok &= all(b.confidence > 0.4 for b in got)
    gate_ok &= nms_filter([RegionBox(0, 0, 1, 1, 0.4)]) == [] and len(nms_filter([RegionBox(0, 0, 1, 1, 0.41)])) == 1
    criterion(
        4,
        "RoIAlign and NMS oracles",
        f"roi gap {worst:.1e} on 1000 cases, full-box exact {full_exact}, NMS mismatches {mismatches}/10000, gate {gate_ok}",
    )
    assert worst < 1e-9 and full_exact and mismatches == 0 and gate_ok


# -- 5 --------------------------------------------------------------------------------------------


def _check_negatives(pos, negatives, difficulty, lexicon):
    """Same length, every lexicon noun untouched, exactly ``difficulty`` attribute
    slots changed, and nothing outside those slots changed."""
    p_tokens = pos.split(" ")
    nouns = [i for i, tok in enumerate(p_tokens) if tok.lower() in lexicon.nouns]
    attr = set(attribute_positions(pos, lexicon))
    if not nouns:
        return False
    for neg in negatives:
        n_tokens = neg.split(" ")
        if len(n_tokens) != len(p_tokens) or any(n_tokens[i] != p_tokens[i] for i in nouns):
            return False
        changed = {i for i in range(len(p_tokens)) if p_tokens[i] != n_tokens[i]}
        if len(changed) != difficulty or not changed <= attr:
            return False
    return True


def test_curation_determinism_and_contracts(criterion, tmp_path):
    raw_dir = tmp_path / "raw"
    assert cli_main(["toydata", "--kind", "scenes", "--count", "40", "--raw", "--seed", "5", "--out", str(raw_dir)]) == 0
    outputs = []
    for i in range(3):
        assert cli_main(["curate", "--input", str(raw_dir / "records.jsonl"), "--seed", "5", "--out", str(tmp_path / str(i))]) == 0
        outputs.append((tmp_path / str(i) / "curated.jsonl").read_bytes())
    identical = outputs[0] == outputs[1] == outputs[2] and len(outputs[0]) > 0

    toy = toyworld.toy_lexicon()
    default = AttributeLexicon.default()
    contract = True
    checked = 0
    for line in outputs[0].decode().splitlines():
        for region in json.loads(line)["regions"]:
            contract &= _check_negatives(region["positive_caption"], region["negative_captions"], 1, toy)
            checked += len(region["negative_captions"])
    for caption in ["A table made of dark brown wood", "A red plastic bucket", "a small blue ceramic vase", "a large red striped leather bag"]:
        for difficulty in (1, 2, 3):
            if len(attribute_positions(caption, default)) < difficulty:
                continue
            negs = generate_hard_negatives(caption, default, difficulty=difficulty, seed=difficulty)
            contract &= _check_negatives(caption, negs, difficulty, default)
            checked += len(negs)

    rng = np.random.default_rng(5)
    alphabet = list("abc ;,\n\r\x0b\x0c.  \x85")
    banned = set(";,\n\r\x0b\x0c  \x85")
    clean = True
    for _ in range(2000):
        text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 30))))
        clean &= not (set(sanitize_caption(text)) & banned)
    for line in outputs[0].decode().splitlines():
        rec = json.loads(line)
        fields = [rec["short_caption"], rec["long_caption"]]
        fields += [c for r in rec["regions"] for c in [r["positive_caption"], *r["negative_captions"]]]
        clean &= all(not (set(f) & banned) for f in fields)
    criterion(5, "curation determinism and contracts", f"3 runs identical {identical}, {checked} negatives valid {contract}, sanitized {clean}")
    assert identical and contract and clean


# -- 6 --------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_toy_stage_one_retrieval(criterion):
    start = time.perf_counter()
    records = toyworld.concept_dataset(64, seed=0)
    train = [r for r in records if int(r.image_id[-3:]) < 56]
    test = [r for r in records if int(r.image_id[-3:]) >= 56]
    cfg = trainer.TrainConfig(stage=1, batch_size=8, lr=5e-4, warmup_iters=5, seed=0)
    result = trainer.train_stage(train, cfg, vocab=trainer.build_vocab(records), text=TextConfig(vocab_size=64))
    images = np.stack([toyworld.load_image(r.image_source) for r in test])
    cls, _ = evalkit.encode_images(result.model, images, grid="tokens")
    scores = {}
    for split in ("short", "long"):
        captions = [getattr(r, f"{split}_caption") for r in test]
        rep = evalkit.grouped_retrieval(cls, evalkit.encode_texts(result.model, captions), evalkit.unique_caption_groups(captions))
        scores[f"{split} I2T"], scores[f"{split} T2I"] = rep.metrics["all"]["i2t_r1"], rep.metrics["all"]["t2i_r1"]
    seconds = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.3f}" for k, v in scores.items()) + f"; {len(test)} held-out images, {seconds:.0f}s"
    criterion(6, "toy stage-1 retrieval R@1 >= 0.9", detail)
    assert all(v >= 0.9 for v in scores.values())
    assert seconds < 600


# -- 7 --------------------------------------------------------------------------------------------


@pytest.mark.slow
def test_ablation_direction(criterion):
    seed = 0
    pre = toyworld.scene_dataset(512, seed=seed, prefix="pre")
    fine = toyworld.scene_dataset(1024, seed=seed + 100, prefix="ft")
    test = toyworld.scene_dataset(100, seed=seed + 200, prefix="test")
    vocab = trainer.build_vocab(pre + fine + test, extra=toyworld.box_categories())
    vision = VisionConfig(patch_size=4)
    text = TextConfig(vocab_size=max(64, len(vocab)))
    base = trainer.train_stage(
        pre, trainer.TrainConfig(stage=1, batch_size=8, lr=5e-4, warmup_iters=5, seed=seed), vision=vision, text=text, vocab=vocab
    )
    bench = toyworld.fgovd_benchmark(test, seed=seed)
    sources = [r.image_source for r in test for _ in r.regions]
    boxes = [b for r in test for b in r.regions]
    gold = [toyworld.box_category(b.positive_caption) for b in boxes]

    results = {}
    for name, regional, hard in (("G", False, False), ("GR", True, False), ("GRH", True, True)):
        cfg = trainer.TrainConfig(
            stage=2, batch_size=8, lr=2e-3, warmup_iters=5, epochs=4, seed=seed, use_regional=regional, use_hard=hard
        )
        model = trainer.train_stage(fine, cfg, init=base.checkpoint).model
        fg = evalkit.fgovd_accuracy(model, bench)
        bb = evalkit.bbox_classification(model, sources, boxes, gold, toyworld.box_categories())
        results[name] = (fg.metrics["hard"]["top1"], bb.metrics["all"]["top1"])
    hard_gain = results["GRH"][0] - results["GR"][0]
    bbox_gain = results["GR"][1] - results["G"][1]
    detail = (
        f"hard Top-1 {results['GR'][0]:.3f} -> {results['GRH'][0]:.3f} with hard term (+{100 * hard_gain:.1f} pp); "
        f"bbox Top-1 {results['G'][1]:.3f} -> {results['GR'][1]:.3f} with regional term"
    )
    criterion(7, "ablation direction", detail)
    assert hard_gain >= 0.10
    assert bbox_gain > 0


# -- 8 --------------------------------------------------------------------------------------------


def test_determinism(criterion):
    records = toyworld.scene_dataset(24, seed=8)
    vision = VisionConfig(embed_dim=16, num_layers=1, num_heads=2, proj_dim=16)
    text = TextConfig(vocab_size=64, embed_dim=16, num_layers=1, num_heads=2, proj_dim=16)
    vocab = trainer.build_vocab(records)

    def run():
        one = trainer.train_stage(records, trainer.TrainConfig(stage=1, batch_size=8, lr=1e-3, warmup_iters=1, seed=8), vision=vision, text=text, vocab=vocab)
        two = trainer.train_stage(records, trainer.TrainConfig(stage=2, batch_size=8, lr=1e-4, warmup_iters=1, seed=8), init=one.checkpoint)
        return [trainer.checkpoint_bytes(one.checkpoint), one.metrics_text(), trainer.checkpoint_bytes(two.checkpoint), two.metrics_text()]

    a, b = run(), run()
    same = [x == y for x, y in zip(a, b)]
    criterion(8, "determinism", f"stage-1 checkpoint {same[0]}, log {same[1]}; stage-2 checkpoint {same[2]}, log {same[3]}")
    assert all(same)


# -- 9 --------------------------------------------------------------------------------------------


def test_checkpoint_round_trip(criterion, tmp_path):
    rng = np.random.default_rng(9)
    exact = rejected = attempts = 0
    vocab = Vocabulary.build(["a red square"])
    for i in range(100):
        heads = int(rng.choice([1, 2]))
        dim = heads * int(rng.integers(2, 5))
        patch = int(rng.choice([4, 8]))
        vision = VisionConfig(image_size=patch * int(rng.integers(1, 4)), patch_size=patch, embed_dim=dim, num_layers=int(rng.integers(1, 3)), num_heads=heads, proj_dim=int(rng.integers(2, 6)))
        text = TextConfig(vocab_size=16, embed_dim=dim, num_layers=1, num_heads=heads, proj_dim=vision.proj_dim)
        model = DualEncoder.create(vision, text, vocab, seed=i)
        for p in model.params.values():
            p.data = rng.normal(size=p.data.shape) * float(rng.choice([1e-3, 1.0, 1e3]))
        model.params["log_inv_tau"].data = np.asarray(rng.uniform(0.0, np.log(100.0)))
        state = trainer.OptimizerState(
            {k: rng.normal(size=p.data.shape) for k, p in model.params.items()},
            {k: rng.random(size=p.data.shape) for k, p in model.params.items()},
            int(rng.integers(0, 1000)),
        )
        ckpt = trainer.make_checkpoint(model, state, {"train": {"seed": i}})
        path = tmp_path / f"m{i}.fack"
        trainer.save_checkpoint(ckpt, path)
        back = trainer.load_checkpoint(path)
        ok = sorted(back.tensors) == sorted(ckpt.tensors) and back.config == ckpt.config
        for k, v in ckpt.tensors.items():
            ok &= back.tensors[k].shape == v.shape and back.tensors[k].tobytes() == v.tobytes()
            ok &= back.tensors[k].tobytes() == model.params[k].data.astype("<f4").tobytes()
        for part in ("m", "v"):
            ok &= all(back.optimizer[part][k].tobytes() == v.tobytes() for k, v in ckpt.optimizer[part].items())
        exact += ok

        blob = path.read_bytes()
        corruptions = [blob[: int(rng.integers(0, len(blob)))], blob + b"\0"]
        for _ in range(3):
            flipped = bytearray(blob)
            flipped[int(rng.integers(len(blob)))] ^= 1 << int(rng.integers(8))
            corruptions.append(bytes(flipped))
        for bad in corruptions:
            attempts += 1
            try:
                trainer.parse_checkpoint(bad)
            except trainer.CheckpointError:
                rejected += 1
    criterion(9, "checkpoint round trip", f"{exact}/100 models bitwise exact, {rejected}/{attempts} corruptions rejected")
    assert exact == 100 and rejected == attempts


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
