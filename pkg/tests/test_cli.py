"""Command line interface tests, run in-process through main().

Fixtures are clean two-color images written as real PNGs, so expected
labels are exact and byte-level determinism can be asserted on outputs.
"""

import json

import numpy as np
import pytest
from PIL import Image

from otseg.cli import (EXIT_FAILURE, EXIT_MAXITER, EXIT_OK, EXIT_USAGE, main)
from otseg.features import Codebook
from otseg.pngio import (read_label_png, read_prob16_png, read_raw_prob,
                         write_label_png)

RED = (255, 0, 0)
BLUE = (0, 0, 255)
GREEN = (0, 255, 0)


def _write_rgb(path, pixels):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def _split_fixture(tmp_path):
    """20x20 image, left half red, right half blue; truth: right = 1."""
    img = np.zeros((20, 20, 3), dtype=np.uint8)
    img[:, :10] = RED
    img[:, 10:] = BLUE
    image_path = tmp_path / "img.png"
    _write_rgb(image_path, img)

    scribbles = np.zeros((20, 20), dtype=np.int32)
    scribbles[8:13, 2:5] = 3   # smaller label: background phase
    scribbles[8:13, 15:18] = 7  # larger label: foreground phase
    scr_path = tmp_path / "scribbles.png"
    write_label_png(scr_path, scribbles)

    truth = np.zeros((20, 20), dtype=np.int32)
    truth[:, 10:] = 1
    return str(image_path), str(scr_path), truth


def _run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    payload = None
    if out.out.strip():
        payload = json.loads(out.out.strip().splitlines()[-1])
    return code, payload, out.err


# ------------------------------------------------------------------ segment


def test_segment_split_image(tmp_path, capsys):
    image, scribbles, truth = _split_fixture(tmp_path)
    prob = tmp_path / "prob.png"
    labels = tmp_path / "labels.png"
    raw = tmp_path / "raw.prob"
    code, payload, _ = _run(capsys, [
        "segment", "--image", image, "--scribbles", scribbles,
        "--variant", "l1", "--rho", "0.05", "--bins", "2",
        "--out-prob", str(prob), "--out-labels", str(labels),
        "--out-raw", str(raw),
    ])
    assert code == EXIT_OK
    assert payload["converged"] is True
    assert payload["phases"] == 2
    assert payload["bins"] == 2
    assert payload["near_binarity"] <= 0.05

    out_labels = read_label_png(str(labels))
    assert np.array_equal(out_labels, truth)

    u = read_raw_prob(str(raw))
    assert u.shape == (20, 20)
    # foreground probability map belongs to the larger scribble label
    assert np.array_equal((u > 0.5).astype(np.int32), truth)
    u16 = read_prob16_png(str(prob))
    assert np.abs(u16 - u).max() <= 0.5 / 65535 + 1e-12


def test_segment_threshold_nesting(tmp_path, capsys):
    image, scribbles, _ = _split_fixture(tmp_path)
    masks = {}
    for t in ("0.3", "0.7"):
        labels = tmp_path / f"labels_{t}.png"
        code, _, _ = _run(capsys, [
            "segment", "--image", image, "--scribbles", scribbles,
            "--variant", "l1", "--bins", "2", "--threshold", t,
            "--out-labels", str(labels),
        ])
        assert code == EXIT_OK
        masks[t] = read_label_png(str(labels)) == 1
    assert np.all(masks["0.7"] <= masks["0.3"])  # raising t shrinks the set


def test_segment_precond_flags_do_not_change_labels(tmp_path, capsys):
    image, scribbles, truth = _split_fixture(tmp_path)
    for extra in ([], ["--precond-r", "0.5", "--precond-delta", "1.5"]):
        labels = tmp_path / "labels.png"
        code, _, _ = _run(capsys, [
            "segment", "--image", image, "--scribbles", scribbles,
            "--variant", "l1", "--bins", "2", "--out-labels", str(labels),
        ] + extra)
        assert code == EXIT_OK
        assert np.array_equal(read_label_png(str(labels)), truth)


def test_segment_three_phase_outputs(tmp_path, capsys):
    img = np.zeros((18, 18, 3), dtype=np.uint8)
    img[:, :6] = RED
    img[:, 6:12] = GREEN
    img[:, 12:] = BLUE
    image = tmp_path / "bands.png"
    _write_rgb(image, img)
    scribbles = np.zeros((18, 18), dtype=np.int32)
    scribbles[8:11, 1:4] = 1
    scribbles[8:11, 7:10] = 2
    scribbles[8:11, 13:16] = 4
    scr = tmp_path / "scr.png"
    write_label_png(scr, scribbles)

    prob = tmp_path / "p.png"
    labels = tmp_path / "l.png"
    code, payload, _ = _run(capsys, [
        "segment", "--image", str(image), "--scribbles", str(scr),
        "--variant", "l1", "--bins", "3",
        "--out-prob", str(prob), "--out-labels", str(labels),
    ])
    assert code == EXIT_OK
    assert payload["phases"] == 3
    out = read_label_png(str(labels))
    truth = np.zeros((18, 18), dtype=np.int32)
    truth[:, 6:12] = 1
    truth[:, 12:] = 2
    assert np.array_equal(out, truth)
    for k in range(3):
        phase = read_prob16_png(str(tmp_path / f"p_phase{k}.png"))
        assert np.array_equal(phase > 0.5, truth == k)


def test_segment_scribble_errors(tmp_path, capsys):
    image, _, _ = _split_fixture(tmp_path)
    one_label = np.zeros((20, 20), dtype=np.int32)
    one_label[5, 5] = 2
    scr1 = tmp_path / "one.png"
    write_label_png(scr1, one_label)
    code, _, err = _run(capsys, ["segment", "--image", image,
                                 "--scribbles", str(scr1)])
    assert code == EXIT_FAILURE
    assert "2 scribbled" in err

    small = np.zeros((5, 5), dtype=np.int32)
    small[0, 0] = 1
    small[4, 4] = 2
    scr2 = tmp_path / "small.png"
    write_label_png(scr2, small)
    code, _, err = _run(capsys, ["segment", "--image", image,
                                 "--scribbles", str(scr2)])
    assert code == EXIT_FAILURE
    assert "scribble mask" in err


def test_segment_missing_file(tmp_path, capsys):
    code, _, err = _run(capsys, [
        "segment", "--image", str(tmp_path / "nope.png"),
        "--scribbles", str(tmp_path / "also_nope.png")])
    assert code == EXIT_FAILURE
    assert "error" in err


def test_segment_maxiter_exit_code(tmp_path, capsys):
    image, scribbles, _ = _split_fixture(tmp_path)
    base = ["segment", "--image", image, "--scribbles", scribbles,
            "--variant", "l1", "--bins", "2", "--max-iter", "2"]
    code, payload, _ = _run(capsys, base)
    assert code == EXIT_MAXITER
    assert payload["converged"] is False
    code, payload, _ = _run(capsys, base + ["--allow-maxiter"])
    assert code == EXIT_OK
    assert payload["converged"] is False


# ------------------------------------------------------------------- config


def test_config_overrides_flags(tmp_path, capsys):
    image, scribbles, _ = _split_fixture(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_iter": 2}))
    # the flag asks for plenty of iterations; the config must win
    code, _, _ = _run(capsys, [
        "segment", "--image", image, "--scribbles", scribbles,
        "--variant", "l1", "--bins", "2", "--max-iter", "5000",
        "--config", str(cfg)])
    assert code == EXIT_MAXITER


def test_config_lambda_key_reaches_solver(tmp_path, capsys):
    image, scribbles, _ = _split_fixture(tmp_path)
    energies = {}
    for lam in (30.0, 3000.0):
        cfg = tmp_path / f"cfg{lam}.json"
        cfg.write_text(json.dumps({"lambda": lam}))
        code, payload, _ = _run(capsys, [
            "segment", "--image", image, "--scribbles", scribbles,
            "--variant", "sinkhorn_grad", "--bins", "2",
            "--config", str(cfg), "--allow-maxiter"])
        assert code == EXIT_OK
        energies[lam] = payload["energy"]
    # entropic smoothing depends on lambda, so the energies must differ
    assert energies[30.0] != pytest.approx(energies[3000.0], rel=1e-6)


def test_config_rejects_unknown_keys(tmp_path, capsys):
    image, scribbles, _ = _split_fixture(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rho_typo": 0.1}))
    code, _, err = _run(capsys, [
        "segment", "--image", image, "--scribbles", scribbles,
        "--config", str(cfg)])
    assert code == EXIT_USAGE
    assert "invalid --config" in err


def test_config_rejects_bad_values_and_bad_json(tmp_path, capsys):
    image, scribbles, _ = _split_fixture(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rho": -1.0}))
    code, _, err = _run(capsys, ["segment", "--image", image,
                                 "--scribbles", scribbles,
                                 "--config", str(cfg)])
    assert code == EXIT_USAGE

    cfg.write_text("{not json")
    code, _, err = _run(capsys, ["segment", "--image", image,
                                 "--scribbles", scribbles,
                                 "--config", str(cfg)])
    assert code == EXIT_USAGE
    assert "cannot load --config" in err

    code, _, err = _run(capsys, ["segment", "--image", image,
                                 "--scribbles", scribbles,
                                 "--config", str(tmp_path / "missing.json")])
    assert code == EXIT_USAGE


def test_threads_env_validation(tmp_path, capsys, monkeypatch):
    image, scribbles, _ = _split_fixture(tmp_path)
    monkeypatch.setenv("OTSEG_THREADS", "many")
    code, _, err = _run(capsys, ["segment", "--image", image,
                                 "--scribbles", scribbles])
    assert code == EXIT_USAGE
    assert "OTSEG_THREADS" in err


# ----------------------------------------------------------------- codebook


def test_codebook_deterministic_bytes(tmp_path, capsys):
    image, _, _ = _split_fixture(tmp_path)
    outs = []
    for name in ("cb1.json", "cb2.json"):
        out = tmp_path / name
        code, payload, _ = _run(capsys, [
            "codebook", "--image", image, "--bins", "2", "--out", str(out)])
        assert code == EXIT_OK
        assert payload["bins"] == 2
        assert payload["pixels"] == 400
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_codebook_pools_images_and_feeds_segment(tmp_path, capsys):
    image, scribbles, truth = _split_fixture(tmp_path)
    other = np.zeros((8, 8, 3), dtype=np.uint8)
    other[:, :] = GREEN
    other_path = tmp_path / "other.png"
    _write_rgb(other_path, other)
    cb_path = tmp_path / "cb.json"
    code, payload, _ = _run(capsys, [
        "codebook", "--image", image, "--image", str(other_path),
        "--bins", "3", "--out", str(cb_path)])
    assert code == EXIT_OK
    assert payload["pixels"] == 400 + 64
    cb = Codebook.load(cb_path)
    assert cb.n_bins == 3 and cb.dim == 3

    labels = tmp_path / "labels.png"
    code, payload, _ = _run(capsys, [
        "segment", "--image", image, "--scribbles", scribbles,
        "--variant", "l1", "--codebook", str(cb_path),
        "--out-labels", str(labels)])
    assert code == EXIT_OK
    assert payload["bins"] == 3
    assert np.array_equal(read_label_png(str(labels)), truth)


# -------------------------------------------------------------------- coseg


def _coseg_fixture(tmp_path):
    img1 = np.zeros((16, 16, 3), dtype=np.uint8)
    img1[:, :] = GREEN
    img1[3:8, 4:9] = RED
    img2 = np.zeros((16, 16, 3), dtype=np.uint8)
    img2[:, :] = BLUE
    img2[9:14, 6:11] = RED
    p1, p2 = tmp_path / "c1.png", tmp_path / "c2.png"
    _write_rgb(p1, img1)
    _write_rgb(p2, img2)
    t1 = np.zeros((16, 16), dtype=np.int32)
    t1[3:8, 4:9] = 1
    t2 = np.zeros((16, 16), dtype=np.int32)
    t2[9:14, 6:11] = 1
    return [str(p1), str(p2)], [t1, t2]


def test_coseg_pairwise_writes_masks(tmp_path, capsys):
    paths, truths = _coseg_fixture(tmp_path)
    out_dir = tmp_path / "out"
    code, payload, _ = _run(capsys, [
        "coseg", "--images", *paths, "--variant", "pairwise", "--dist", "l1",
        "--rho", "0.05", "--delta", "0.3", "--bins", "3",
        "--out-dir", str(out_dir)])
    assert code == EXIT_OK
    assert payload["images"] == 2
    assert "barycenter" not in payload
    for k, truth in enumerate(truths):
        mask = read_label_png(str(out_dir / f"mask_{k}.png"))
        assert np.array_equal(mask, truth)
        prob = read_prob16_png(str(out_dir / f"prob_{k}.png"))
        assert np.array_equal(prob > 0.5, truth == 1)


def test_coseg_barycentric_writes_histogram(tmp_path, capsys):
    paths, truths = _coseg_fixture(tmp_path)
    out_dir = tmp_path / "outb"
    code, payload, _ = _run(capsys, [
        "coseg", "--images", *paths, "--variant", "barycentric_l1",
        "--dist", "l1", "--rho", "0.05", "--delta", "0.3", "--bins", "3",
        "--out-dir", str(out_dir)])
    assert code == EXIT_OK
    with open(payload["barycenter"], "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    assert doc["n_bins"] == 3
    hist = np.asarray(doc["histogram"], dtype=float)
    # both planted squares hold 25 red pixels; the other bins carry nothing
    assert hist.max() == pytest.approx(25.0, abs=1.0)
    assert np.sort(hist)[:-1].sum() <= 1.0
    for k, truth in enumerate(truths):
        mask = read_label_png(str(out_dir / f"mask_{k}.png"))
        assert np.array_equal(mask, truth)


def test_coseg_needs_two_images(tmp_path, capsys):
    paths, _ = _coseg_fixture(tmp_path)
    code, _, err = _run(capsys, [
        "coseg", "--images", paths[0], "--out-dir", str(tmp_path / "x")])
    assert code == EXIT_FAILURE
    assert "at least 2" in err


# --------------------------------------------------------------------- eval


def test_eval_metrics(tmp_path, capsys):
    labels = np.zeros((4, 4), dtype=np.int32)
    labels[:, 0:2] = 1
    truth = np.zeros((4, 4), dtype=np.int32)
    truth[:, 1:3] = 1
    lp, tp = tmp_path / "l.png", tmp_path / "t.png"
    write_label_png(lp, labels)
    write_label_png(tp, truth)
    code, payload, _ = _run(capsys, ["eval", "--labels", str(lp),
                                     "--truth", str(tp)])
    assert code == EXIT_OK
    assert payload["pixel_accuracy"] == 0.5
    assert payload["jaccard"]["0"] == pytest.approx(1 / 3)
    assert payload["jaccard"]["1"] == pytest.approx(1 / 3)
    assert payload["mean_jaccard"] == pytest.approx(1 / 3)


def test_eval_perfect_match(tmp_path, capsys):
    labels = np.array([[0, 1], [2, 1]], dtype=np.int32)
    lp = tmp_path / "l.png"
    write_label_png(lp, labels)
    code, payload, _ = _run(capsys, ["eval", "--labels", str(lp),
                                     "--truth", str(lp)])
    assert code == EXIT_OK
    assert payload["pixel_accuracy"] == 1.0
    assert payload["mean_jaccard"] == 1.0


def test_eval_shape_mismatch(tmp_path, capsys):
    a = tmp_path / "a.png"
    b = tmp_path / "b.png"
    write_label_png(a, np.zeros((3, 3), dtype=np.int32))
    write_label_png(b, np.zeros((2, 2), dtype=np.int32))
    code, _, err = _run(capsys, ["eval", "--labels", str(a),
                                 "--truth", str(b)])
    assert code == EXIT_FAILURE
    assert "truth" in err
