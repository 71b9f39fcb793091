#include <doctest.h>

#include <cstdlib>
#include <vector>

#include "verifscope/tokenizer.hpp"
#include "verifscope/trainer.hpp"

using namespace verifscope;

namespace {

ModelConfig mini_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 24;
    c.n_heads = 2;
    c.d_head = 12;
    c.d_glu = 32;
    c.vocab_size = tokenizer().size();
    c.max_seq_len = 256;
    return c;
}

std::vector<CorpusRecord> mini_corpus(int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<CorpusRecord> recs;
    for (int i = 0; i < n; ++i) {
        Instance inst = generate_instance(rng, 3);
        Transcript t = synthesize_transcript(inst, rng, i % 2);
        CorpusRecord r;
        r.instance = inst;
        r.prompt = render_prompt(inst);
        std::vector<int> tail(t.tokens.begin() + t.prompt_len, t.tokens.end());
        r.completion = tokenizer().decode(tail);
        recs.push_back(r);
    }
    return recs;
}

}  // namespace

TEST_CASE("single-precision loss matches the double-precision reference") {
    Rng rng(4);
    Weights w = Weights::init_random(mini_config(), rng);
    std::vector<CorpusRecord> recs = mini_corpus(3, 12);
    for (const CorpusRecord& r : recs) {
        TokenizedSample s = tokenize_record(r);
        LossStats ls = next_token_loss(w, s.tokens, s.prompt_len, nullptr);
        double ref = reference_loss_f64(w, s.tokens, s.prompt_len);
        CHECK(ls.loss == doctest::Approx(ref).epsilon(1e-4));
        CHECK(ls.positions == static_cast<int>(s.tokens.size()) - s.prompt_len);
    }
}

TEST_CASE("analytic gradients match central differences") {
    Rng rng(6);
    Weights w = Weights::init_random(mini_config(), rng);
    TokenizedSample s = tokenize_record(mini_corpus(1, 21)[0]);
    Rng pick(3);
    GradCheckReport rep = grad_check(w, s.tokens, s.prompt_len, 12, 1e-3f, pick);
    INFO("worst tensor: ", rep.worst_tensor);
    CHECK(rep.max_rel_err < 1e-3);
    CHECK(rep.coords_checked >= 12 * 5);
}

TEST_CASE("tokenized records reproduce the raw token stream") {
    std::vector<CorpusRecord> recs = mini_corpus(4, 9);
    const Tokenizer& tok = tokenizer();
    for (const CorpusRecord& r : recs) {
        TokenizedSample s = tokenize_record(r);
        CHECK(tok.decode(s.tokens) == r.prompt + r.completion);
        CHECK(s.prompt_len == static_cast<int>(tok.encode(r.prompt).size()));
        CHECK_FALSE(s.marker_positions.empty());
        for (int p : s.marker_positions) {
            CHECK(p > s.prompt_len);
            CHECK((tok.is_word(s.tokens[p + 1], "this") ||
                   tok.is_word(s.tokens[p + 1], "not")));
        }
    }
}

TEST_CASE("evaluation statistics are independent of the thread count") {
    Rng rng(7);
    Weights w = Weights::init_random(mini_config(), rng);
    std::vector<TokenizedSample> samples;
    for (const CorpusRecord& r : mini_corpus(6, 31)) samples.push_back(tokenize_record(r));

    setenv("VERIFSCOPE_THREADS", "1", 1);
    EvalStats one = evaluate(w, samples);
    setenv("VERIFSCOPE_THREADS", "4", 1);
    EvalStats four = evaluate(w, samples);
    unsetenv("VERIFSCOPE_THREADS");
    CHECK(one.loss == four.loss);
    CHECK(one.token_accuracy == four.token_accuracy);
    CHECK(one.marker_accuracy == four.marker_accuracy);
}

TEST_CASE("a short training run reduces the validation loss deterministically") {
    std::vector<CorpusRecord> train = mini_corpus(24, 41);
    std::vector<CorpusRecord> val = mini_corpus(8, 42);
    TrainConfig tc;
    tc.steps = 30;
    tc.batch_size = 4;
    tc.eval_every = 10;
    tc.eval_samples = 8;
    tc.seed = 3;

    TrainResult a = train_toy_model(mini_config(), train, val, tc);
    CHECK(a.steps_run == 30);

    // Untrained baseline loss for the same validation set.
    Rng rng(tc.seed);
    std::vector<TokenizedSample> vs;
    for (const CorpusRecord& r : val) vs.push_back(tokenize_record(r));
    Rng wr(1);
    ModelConfig mc = mini_config();
    Weights fresh = Weights::init_random(mc, wr);
    EvalStats untrained = evaluate(fresh, vs);
    CHECK(a.final_eval.loss < untrained.loss);

    // Same config, same data: identical result.
    TrainResult b = train_toy_model(mini_config(), train, val, tc);
    CHECK(a.final_eval.loss == b.final_eval.loss);
    CHECK(a.best_val_loss == b.best_val_loss);
}
