#include <doctest.h>

#include <cmath>

#include "verifscope/attn_analysis.hpp"
#include "verifscope/glu_analysis.hpp"
#include "verifscope/tokenizer.hpp"
#include "verifscope/trace.hpp"

using namespace verifscope;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_head = 16;
    c.d_glu = 48;
    c.vocab_size = tokenizer().size();
    c.max_seq_len = 256;
    return c;
}

Weights small_weights(uint64_t seed = 1) {
    Rng rng(seed);
    return Weights::init_random(small_config(), rng);
}

}  // namespace

TEST_CASE("final-layer lens equals the model's own output distribution") {
    Weights w = small_weights();
    Rng rng(3);
    std::vector<int> toks(12);
    for (int& t : toks) t = static_cast<int>(rng.uniform_int(0, w.cfg.vocab_size - 1));
    ActivationTrace tr = capture(w, toks, true, false, false);
    Matrix logits = forward(w, toks);
    int t = 7;
    Vector lens = logit_lens(w, tr, w.cfg.n_layers - 1, t);
    Vector direct(logits.row(t), logits.row(t) + logits.cols);
    softmax_inplace(direct.data(), logits.cols);
    double max_err = 0.0;
    for (int v = 0; v < logits.cols; ++v)
        max_err = std::max(max_err, std::abs(static_cast<double>(lens[v]) - direct[v]));
    CHECK(max_err < 1e-5);

    CHECK_THROWS_AS(logit_lens(w, tr, 99, t), VsError);
    CHECK_THROWS_AS(logit_lens(w, tr, 0, 99), VsError);
}

TEST_CASE("composition score of stacked identities is one half") {
    Matrix i4(4, 4);
    for (int i = 0; i < 4; ++i) i4.at(i, i) = 1.0f;
    CHECK(composition_score(i4, i4) == doctest::Approx(0.5));
    Matrix zero(4, 4);
    CHECK_THROWS_AS(composition_score(i4, zero), VsError);
}

TEST_CASE("principal direction matches the dominant eigenvector of a planted matrix") {
    // Rank-1 matrix: M = a bᵀ, principal right-singular vector is b/|b|.
    int n = 6, d = 5;
    Vector a = {1, -2, 0.5, 3, -1, 2};
    Vector b = {2, 0, -1, 1, 3};
    Matrix m(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) m.at(i, j) = a[i] * b[j];
    Vector p = principal_direction(m, 7);
    float bn = norm2(b.data(), d);
    double align = 0.0;
    for (int j = 0; j < d; ++j) align += static_cast<double>(p[j]) * (b[j] / bn);
    CHECK(std::abs(align) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("probe training separates linearly separable data") {
    Rng rng(5);
    int d = 16, n = 400;
    Vector dir(d);
    for (float& x : dir) x = static_cast<float>(rng.gaussian());
    ProbeDataset ds;
    ds.x = Matrix(n, d);
    for (int i = 0; i < n; ++i) {
        int label = i % 2;
        for (int j = 0; j < d; ++j) {
            float noise = 0.3f * static_cast<float>(rng.gaussian());
            ds.x.at(i, j) = (label ? 1.0f : -1.0f) * dir[j] + noise;
        }
        ds.labels.push_back(label);
    }
    ProbeHyper hp;
    hp.max_steps = 2000;
    hp.lr = 1e-2f;
    Probe p = train_probe(ds, 0, hp);
    CHECK(eval_probe(p, ds) > 0.95);
    CHECK(p.w.rows == 2);
    CHECK(p.w.cols == d);

    ProbeDataset bad = ds;
    for (int& l : bad.labels) l = 0;
    CHECK_THROWS_AS(train_probe(bad, 0, hp), VsError);
}

TEST_CASE("glu selection picks planted rows aligned with the probe") {
    Weights w = small_weights(11);
    int d = w.cfg.d_model;
    Rng rng(2);
    Vector vdir(d), idir(d);
    for (float& x : vdir) x = static_cast<float>(rng.gaussian());
    for (float& x : idir) x = static_cast<float>(rng.gaussian());
    // Plant strong copies of each probe row in known w_out rows of layer 1.
    for (int j = 0; j < d; ++j) {
        w.layers[1].w_out.at(5, j) = 10.0f * vdir[j];
        w.layers[1].w_out.at(9, j) = 10.0f * idir[j];
    }
    std::vector<Probe> probes(1);
    probes[0].layer = 1;
    probes[0].w = Matrix(2, d);
    for (int j = 0; j < d; ++j) {
        probes[0].w.at(0, j) = idir[j];
        probes[0].w.at(1, j) = vdir[j];
    }
    GluSelection sel = select_top_k(w, probes, 3, 1, 2);
    REQUIRE_FALSE(sel.valid.empty());
    REQUIRE_FALSE(sel.invalid.empty());
    CHECK(sel.valid[0].id.layer == 1);
    CHECK(sel.valid[0].id.row == 5);
    CHECK(sel.invalid[0].id.row == 9);
    CHECK(sel.valid[0].similarity == doctest::Approx(1.0).epsilon(1e-4));

    CHECK_THROWS_AS(select_top_k(w, probes, 0, 1, 2), VsError);
    CHECK_THROWS_AS(select_top_k(w, probes, 3, 2, 1), VsError);
}

TEST_CASE("nearest neighbors find a planted vocabulary direction") {
    Weights w = small_weights(13);
    Vector v = w.embedding.row_vec(42);
    std::vector<TokenNeighbor> nn = nearest_neighbor_tokens(w, v, 3);
    REQUIRE(nn.size() == 3);
    CHECK(nn[0].token == 42);
    CHECK(nn[0].similarity == doctest::Approx(1.0).epsilon(1e-5));
    // Antipode of the same vector ranks other tokens.
    Vector neg(v.size());
    for (size_t i = 0; i < v.size(); ++i) neg[i] = -v[i];
    std::vector<TokenNeighbor> an = nearest_neighbor_tokens(w, neg, 3);
    CHECK(an[0].token != 42);
}

TEST_CASE("silu keeps bounded negative-side output while relu clamps to zero") {
    Weights w = small_weights();
    AntipodalAudit audit = antipodal_audit(w, {GluVectorId{0, 1}}, 4);
    CHECK(audit.max_abs_silu_negative == doctest::Approx(0.27846).epsilon(1e-3));
    CHECK(audit.max_abs_silu_negative <= 0.2785);
    CHECK(audit.example_contribution == doctest::Approx(silu(-1.0f)));
    CHECK(audit.example_contribution < 0.0);
    CHECK(audit.relu_contrast == 0.0);
}

TEST_CASE("receptive field membership is the sign of the gated product") {
    Vector g = {1, 0}, u = {0, 1};
    ReceptiveFieldSpec spec;
    spec.neurons = {{g, u}};
    ReceptiveFieldResult in = receptive_field_contains({1.0f, 1.0f}, spec);
    CHECK(in.member);
    ReceptiveFieldResult out = receptive_field_contains({1.0f, -1.0f}, spec);
    CHECK_FALSE(out.member);
}

TEST_CASE("previous-token head detection flags a synthetic hard-attention head") {
    // Build one trace by hand: head (0,0) puts full mass on t_ans at every
    // marker position, head (0,1) attends uniformly.
    Rng rng(5);
    Instance inst = generate_instance(rng, 3);
    Transcript tr = synthesize_transcript(inst, rng, 1);
    int n = static_cast<int>(tr.tokens.size());

    ActivationTrace trace;
    trace.tokens = tr.tokens;
    trace.has_attn = true;
    trace.attn.resize(1);
    Matrix hard(n, n), soft(n, n);
    for (int q = 0; q < n; ++q) {
        for (int s = 0; s <= q; ++s) soft.at(q, s) = 1.0f / (q + 1);
        hard.at(q, 0) = 1.0f;
    }
    Transcript parsed = parse_transcript(tr.tokens);
    for (const Attempt& a : parsed.attempts) {
        if (a.marker_pos < 0) continue;
        for (int s = 0; s < n; ++s) hard.at(a.marker_pos, s) = 0.0f;
        hard.at(a.marker_pos, parsed.t_ans) = 1.0f;
    }
    trace.attn[0] = {hard, soft};

    std::vector<PrevTokenHeadReport> rep =
        detect_prev_token_heads({trace}, {parsed}, 0.10);
    REQUIRE(rep.size() == 2);
    CHECK(rep[0].mass == doctest::Approx(1.0));
    CHECK(rep[0].flagged);
    CHECK(rep[1].mass < 0.2);
}

TEST_CASE("weight-based head rankings are complete and deterministic") {
    Weights w = small_weights(3);
    std::vector<HeadId> cands = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    std::vector<std::pair<Vector, Vector>> refs;
    for (int r = 0; r < 6; ++r)
        refs.push_back({w.glu_gate_vec(1, r), w.glu_up_vec(1, r)});

    for (auto ranking : {rank_heads_eq8(w, cands, refs),
                         rank_gate_up_similarity(w, cands, refs),
                         rank_composition(w, cands, refs),
                         rank_probe_similarity(w, cands, w.embedding.row_vec(1))}) {
        REQUIRE(ranking.size() == cands.size());
        for (size_t i = 1; i < ranking.size(); ++i)
            CHECK(ranking[i - 1].score >= ranking[i].score);
    }
    // Pure function of the weights: identical on repeat.
    auto a = rank_heads_eq8(w, cands, refs);
    auto b = rank_heads_eq8(w, cands, refs);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].head == b[i].head);
        CHECK(a[i].score == b[i].score);
    }
}

TEST_CASE("greedy subset search stops at the first full-rate prefix") {
    std::vector<HeadScore> ranking;
    for (int i = 0; i < 6; ++i) ranking.push_back({{0, i}, 6.0 - i, RankMethod::Eq8});
    // Planted evaluator: rate grows with the prefix, full at 3 heads.
    auto evaluate = [](const std::vector<HeadId>& heads) {
        return heads.size() >= 3 ? 1.0 : heads.size() / 3.0;
    };
    SubsetSearchResult res = search_minimal_subset(ranking, evaluate, 6);
    CHECK(res.reached_full);
    CHECK(res.heads.size() == 3);
    CHECK(res.rate == 1.0);
    CHECK(res.log.size() == 3);
    CHECK_THROWS_AS(search_minimal_subset(ranking, evaluate, 0), VsError);
}

TEST_CASE("lens aggregation report is well formed") {
    Weights w = small_weights();
    Rng rng(9);
    std::vector<ActivationTrace> traces;
    std::vector<int> positions;
    for (int i = 0; i < 3; ++i) {
        std::vector<int> toks(10);
        for (int& t : toks) t = static_cast<int>(rng.uniform_int(0, w.cfg.vocab_size - 1));
        traces.push_back(capture(w, toks, true, false, false));
        positions.push_back(5);
    }
    LensReport rep = aggregate_lens(w, traces, positions, 4);
    REQUIRE(rep.per_layer.size() == static_cast<size_t>(w.cfg.n_layers));
    for (const auto& layer : rep.per_layer) {
        REQUIRE(layer.size() == 4);
        for (size_t r = 1; r < layer.size(); ++r)
            CHECK(layer[r - 1].mean_prob >= layer[r].mean_prob);
        for (const LensEntry& e : layer) {
            CHECK(e.mean_prob > 0.0);
            CHECK(e.mean_prob <= 1.0);
        }
    }
    CHECK(rep.to_tsv().find('\t') != std::string::npos);
}
