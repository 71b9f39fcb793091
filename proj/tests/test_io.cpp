#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <unistd.h>

#include "verifscope/emb2emb.hpp"
#include "verifscope/pipeline.hpp"
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
    c.max_seq_len = 128;
    return c;
}

}  // namespace

TEST_CASE("activation traces round-trip, including single-layer loads") {
    Rng rng(1);
    Weights w = Weights::init_random(small_config(), rng);
    std::vector<int> toks(14);
    for (int& t : toks) t = static_cast<int>(rng.uniform_int(0, w.cfg.vocab_size - 1));
    ActivationTrace tr = capture(w, toks, true, true, true);
    std::string path = "/tmp/vs_trace_test.bin";
    save_trace(tr, path, "deadbeef");

    std::string digest;
    ActivationTrace back = load_trace(path, &digest);
    CHECK(digest == "deadbeef");
    CHECK(back.tokens == toks);
    REQUIRE(back.hidden.size() == tr.hidden.size());
    for (size_t l = 0; l < tr.hidden.size(); ++l)
        CHECK(back.hidden[l].data == tr.hidden[l].data);
    REQUIRE(back.attn.size() == tr.attn.size());
    for (size_t l = 0; l < tr.attn.size(); ++l)
        for (size_t h = 0; h < tr.attn[l].size(); ++h)
            CHECK(back.attn[l][h].data == tr.attn[l][h].data);
    for (size_t l = 0; l < tr.glu_m.size(); ++l)
        CHECK(back.glu_m[l].data == tr.glu_m[l].data);

    // Partial load: only the requested layer is populated.
    ActivationTrace one = load_trace(path, nullptr, 1);
    CHECK(one.hidden[1].data == tr.hidden[1].data);
    CHECK(one.hidden[0].data.empty());

    CHECK_THROWS_AS(load_trace("/tmp/vs_missing_trace.bin"), VsError);
    long sz = static_cast<long>(std::ifstream(path, std::ios::ate | std::ios::binary).tellg());
    REQUIRE(truncate(path.c_str(), sz - 32) == 0);
    CHECK_THROWS_AS(load_trace(path), VsError);
}

TEST_CASE("probe containers round-trip") {
    Probe p;
    p.layer = 3;
    p.w = Matrix(2, 16);
    Rng rng(4);
    for (float& x : p.w.data) x = static_cast<float>(rng.gaussian());
    save_probe(p, "/tmp/vs_probe_test.bin", "abcd");
    std::string digest;
    Probe back = load_probe("/tmp/vs_probe_test.bin", &digest);
    CHECK(digest == "abcd");
    CHECK(back.layer == 3);
    CHECK(back.w.data == p.w.data);
}

TEST_CASE("embedding map fit recovers a planted rotation and round-trips") {
    Rng rng(6);
    int v = 300, d = 8;
    Matrix src(v, d);
    for (float& x : src.data) x = static_cast<float>(rng.gaussian());
    // Planted map: permute and scale coordinates.
    Matrix dst(v, d);
    for (int i = 0; i < v; ++i)
        for (int j = 0; j < d; ++j) dst.at(i, j) = 2.0f * src.at(i, (j + 1) % d);

    EmbeddingMap map = fit_map(src, dst, identity_pairing(v));
    CHECK(map.n_pairs == v);
    CHECK_FALSE(map.rank_warning);
    CHECK(map.residual < 1e-6);
    Vector probe = src.row_vec(0);
    Vector moved = transfer_vector(map, probe);
    for (int j = 0; j < d; ++j)
        CHECK(moved[j] == doctest::Approx(dst.at(0, j)).epsilon(1e-3));

    save_map(map, "/tmp/vs_map_test.bin");
    EmbeddingMap back = load_map("/tmp/vs_map_test.bin");
    CHECK(back.t.data == map.t.data);
    CHECK(back.residual == doctest::Approx(map.residual));

    // Too few pairs for the dimensionality: flagged, not silently wrong.
    EmbeddingMap tiny = fit_map(src, dst, {{0, 0}, {1, 1}, {2, 2}});
    CHECK(tiny.rank_warning);
    CHECK_THROWS_AS(fit_map(src, dst, {}), VsError);
}

TEST_CASE("run configuration round-trips and digests ignore the output dir") {
    RunConfig cfg = default_run_config();
    cfg.seed = 99;
    cfg.corpus_train = 123;
    cfg.train.steps = 77;
    save_run_config(cfg, "/tmp/vs_cfg_test.json");
    RunConfig back = load_run_config("/tmp/vs_cfg_test.json");
    CHECK(back.seed == 99);
    CHECK(back.corpus_train == 123);
    CHECK(back.train.steps == 77);
    CHECK(config_digest(back) == config_digest(cfg));

    RunConfig moved = cfg;
    moved.out_dir = "elsewhere";
    CHECK(config_digest(moved) == config_digest(cfg));
    RunConfig changed = cfg;
    changed.seed = 100;
    CHECK(config_digest(changed) != config_digest(cfg));

    CHECK_THROWS_AS(load_run_config("/tmp/vs_missing_cfg.json"), VsError);
    std::ofstream bad("/tmp/vs_bad_cfg.json");
    bad << "{ not json";
    bad.close();
    try {
        load_run_config("/tmp/vs_bad_cfg.json");
        FAIL("expected throw");
    } catch (const VsError& e) {
        CHECK(e.exit_code() == 2);
    }
}

TEST_CASE("error kinds map to the documented exit codes") {
    CHECK(VsError(ErrorKind::Config, "x").exit_code() == 2);
    CHECK(VsError(ErrorKind::Argument, "x").exit_code() == 2);
    CHECK(VsError(ErrorKind::Shape, "x").exit_code() == 2);
    CHECK(VsError(ErrorKind::Dependency, "x").exit_code() == 3);
    CHECK(VsError(ErrorKind::Data, "x").exit_code() == 4);
    CHECK(VsError(ErrorKind::Io, "x").exit_code() == 4);
    CHECK(VsError(ErrorKind::Numerical, "x").exit_code() == 5);
}

TEST_CASE("pipeline stages fail with dependency errors before their inputs exist") {
    RunConfig cfg = default_run_config();
    cfg.out_dir = "/tmp/vs_empty_out_dir";
    std::remove((cfg.out_dir + "/model.bin").c_str());
    try {
        stage_train(cfg);
        FAIL("expected throw");
    } catch (const VsError& e) {
        CHECK(e.exit_code() == 3);
        CHECK(std::string(e.what()).find("gen-data") != std::string::npos);
    }
    try {
        stage_capture(cfg);
        FAIL("expected throw");
    } catch (const VsError& e) {
        CHECK(e.exit_code() == 3);
        CHECK(std::string(e.what()).find("train") != std::string::npos);
    }
}
