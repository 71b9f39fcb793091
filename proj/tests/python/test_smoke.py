"""Smoke tests for the Python extension module.

Usage: test_smoke.py [path-to-built-module-dir]
"""

import sys

if len(sys.argv) > 1:
    sys.path.insert(0, sys.argv[1])

import numpy as np

import _verifscope as vs


def test_tokenizer_roundtrip():
    text = "40 * 14 / 20 = 560 / 20 = 28 (this works)\n"
    ids = vs.encode(text)
    assert vs.decode(ids) == text
    assert vs.vocab_size() > 2000
    assert 0 <= vs.eot_token() < vs.vocab_size()


def test_puzzles():
    inst = vs.generate_instance(seed=7, n_operands=3)
    assert len(inst.operands) == 3
    assert 10 <= inst.target <= 99
    sol = vs.brute_force_solve(inst.operands, inst.target)
    assert sol is not None
    assert vs.evaluate_left_to_right("40 * 14 / 20") == 28

    tokens, prompt_len = vs.synthesize_transcript(inst, seed=3, n_failures=2)
    parsed = vs.parse_transcript(tokens)
    assert parsed["target"] == inst.target
    assert len(parsed["attempts"]) == 3
    assert parsed["attempts"][-1]["valid_marker"]
    assert not parsed["out_of_range"]


def test_model_forward_and_generate():
    cfg = vs.ModelConfig()
    cfg.n_layers = 2
    cfg.d_model = 32
    cfg.n_heads = 2
    cfg.d_head = 16
    cfg.d_glu = 48
    cfg.max_seq_len = 128
    w = vs.Weights.random(cfg, seed=1)

    ids = vs.encode("1 + 2 = 3")
    logits = vs.forward(w, ids)
    assert logits.shape == (len(ids), vs.vocab_size())
    assert np.isfinite(logits).all()
    # Determinism: identical on repeat.
    assert (vs.forward(w, ids) == logits).all()

    out = vs.generate(w, ids, max_new=16)
    assert out[: len(ids)] == ids
    assert len(out) <= len(ids) + 16

    # Ablating with a gate that never fires reproduces plain generation.
    gated = vs.ablated_generate(w, [vs.HeadId(0, 0)], ids, max_new=16,
                                gate_at_markers=True)
    assert gated == out

    hidden = vs.capture_hidden(w, ids)
    assert len(hidden) == cfg.n_layers
    assert hidden[0].shape == (len(ids), cfg.d_model)

    ov = vs.ov_circuit(w, vs.HeadId(0, 1))
    assert ov.shape == (cfg.d_model, cfg.d_model)
    eye = np.eye(4, dtype=np.float32)
    assert abs(vs.composition_score(eye, eye) - 0.5) < 1e-6


def test_probe_and_embedding_map():
    rng = np.random.default_rng(0)
    d, n = 16, 400
    direction = rng.standard_normal(d).astype(np.float32)
    labels = (np.arange(n) % 2).astype(np.int32)
    x = (np.where(labels[:, None] == 1, 1.0, -1.0) * direction
         + 0.3 * rng.standard_normal((n, d))).astype(np.float32)
    probe = vs.train_probe(x, labels.tolist(), layer=0, seed=1)
    assert probe.shape == (2, d)
    acc = vs.eval_probe(probe, 0, x, labels.tolist())
    assert acc > 0.9

    src = rng.standard_normal((300, 8)).astype(np.float32)
    dst = np.roll(src, 1, axis=1) * 2.0
    t, residual, rank_warning = vs.fit_embedding_map(src, dst)
    assert residual < 1e-6
    assert not rank_warning
    assert np.allclose(src @ t.T, dst, atol=1e-3)


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"{t.__name__}: ok")
    print(f"{len(tests)} smoke tests passed")


if __name__ == "__main__":
    main()
