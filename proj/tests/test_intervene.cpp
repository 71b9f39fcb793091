#include <doctest.h>

#include <cstdlib>

#include "verifscope/intervene.hpp"
#include "verifscope/tokenizer.hpp"

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
    c.max_seq_len = 320;
    return c;
}

Weights small_weights(uint64_t seed = 1) {
    Rng rng(seed);
    return Weights::init_random(small_config(), rng);
}

std::vector<int> ids(const std::string& s) { return tokenizer().encode(s); }

}  // namespace

TEST_CASE("trigger detection fires inside open attempt markers only") {
    // Inside the think region, after "N (" the marker is being written.
    CHECK(detect_trigger(ids("prompt\n<think>\n4 + 5 = 9 (")));
    CHECK(detect_trigger(ids("prompt\n<think>\n4 + 5 = 9 (this")));
    CHECK(detect_trigger(ids("prompt\n<think>\n4 + 5 = 9 (not")));
    // Closed marker: inactive again.
    CHECK_FALSE(detect_trigger(ids("prompt\n<think>\n4 + 5 = 9 (not 12)")));
    // A new line after the marker: inactive.
    CHECK_FALSE(detect_trigger(ids("prompt\n<think>\n4 + 5 = 9 (not 12)\n4 * 5")));
    // Outside the think region nothing fires.
    CHECK_FALSE(detect_trigger(ids("numbers 4, 5 (")));
    CHECK_FALSE(detect_trigger(ids("p\n<think>\nx\n</think> <answer> (")));
    // An opening parenthesis not preceded by a number is not a marker.
    CHECK_FALSE(detect_trigger(ids("p\n<think>\n(")));
    CHECK_FALSE(detect_trigger(ids("p\n<think>\n4 + (")));
}

TEST_CASE("plans validate identifiers and produce weight-free overlays") {
    Weights w = small_weights();
    InterventionPlan plan;
    plan.name = "x";
    plan.heads = {{1, 1}};
    plan.glu_vectors = {{0, 3}, {0, 1}, {0, 3}};
    Overlay ov = apply_plan(w, plan);
    CHECK(ov.head_off[1 * w.cfg.n_heads + 1] == 1);
    REQUIRE(ov.glu_off.size() == 2);
    CHECK(ov.glu_off[0] == std::vector<int>{1, 3});  // sorted, deduplicated
    CHECK(ov.scale == 0.0f);

    InterventionPlan bad_head = plan;
    bad_head.heads = {{9, 0}};
    CHECK_THROWS_AS(apply_plan(w, bad_head), VsError);
    InterventionPlan bad_scale = plan;
    bad_scale.scale = 2.0f;
    CHECK_THROWS_AS(apply_plan(w, bad_scale), VsError);
}

TEST_CASE("outcome classification from hand-written transcripts") {
    const Tokenizer& tok = tokenizer();
    Instance inst;
    inst.operands = {4, 5, 6};
    inst.target = 15;
    auto classify = [&](const std::string& body) {
        std::string text =
            "Using the numbers 4, 5, 6, create an equation that equals 15.\n<think>\n" +
            body;
        return classify_outcome(tok.encode(text), inst).label;
    };

    // Correct attempt marked valid: the verifier worked, so disabling failed.
    CHECK(classify("4 + 5 + 6 = 9 + 6 = 15 (this works)\n</think> "
                   "<answer> 4 + 5 + 6 </answer><eot>") == OutcomeLabel::Failure);
    // Correct attempt marked invalid, never revisited: full success.
    CHECK(classify("4 + 5 + 6 = 9 + 6 = 15 (not 15)\n6 * 5 - 4 = 30 - 4 = 26 (not 15)\n"
                   "</think> <answer> 6 - 5 + 4 </answer><eot>") ==
          OutcomeLabel::Success);
    // Correct attempt marked invalid but still claimed as the final answer.
    CHECK(classify("4 + 5 + 6 = 9 + 6 = 15 (not 15)\n</think> "
                   "<answer> 4 + 5 + 6 </answer><eot>") == OutcomeLabel::PartialSuccess);
    // No correct attempt at all.
    CHECK(classify("4 * 5 - 6 = 20 - 6 = 14 (not 15)\n</think> "
                   "<answer> 4 * 5 - 6 </answer><eot>") == OutcomeLabel::Failure);
    // Degenerate generation.
    CHECK(classify("gibberish gibberish") == OutcomeLabel::OutOfRange);
}

TEST_CASE("gated ablation leaves non-trigger generations untouched") {
    Weights w = small_weights(5);
    Rng rng(2);
    Instance inst = generate_instance(rng, 3);
    std::vector<int> prompt = ids(render_prompt(inst));

    InterventionPlan plan;
    plan.name = "heads";
    plan.heads = {{0, 0}, {1, 1}};
    std::vector<int> with = intervened_generate(w, plan, prompt, 40);
    GenOptions g;
    g.eot_token = tokenizer().eot_id();
    std::vector<int> without = generate(w, prompt, 40, g);
    // An untrained model never reaches an attempt marker, so the gate never
    // fires and the two generations are identical.
    bool fired = false;
    for (size_t t = prompt.size(); t <= with.size(); ++t)
        fired |= detect_trigger(std::vector<int>(with.begin(), with.begin() + t));
    if (!fired) CHECK(with == without);
}

TEST_CASE("experiments are deterministic and thread-count independent") {
    Weights w = small_weights(8);
    Rng rng(6);
    std::vector<Instance> insts;
    for (int i = 0; i < 4; ++i) insts.push_back(generate_instance(rng, 3));

    InterventionPlan plan;
    plan.name = "p";
    plan.heads = {{0, 0}};
    plan.gating = Gating::AlwaysOn;

    BaselineSpec bl;
    bl.runs = 2;
    bl.seed = 9;

    setenv("VERIFSCOPE_THREADS", "1", 1);
    InterventionReport a = run_experiment(w, {plan}, insts, 32, &bl, true);
    setenv("VERIFSCOPE_THREADS", "4", 1);
    InterventionReport b = run_experiment(w, {plan}, insts, 32, &bl, true);
    unsetenv("VERIFSCOPE_THREADS");

    REQUIRE(a.plans.size() == 1);
    CHECK(a.plans[0].samples == 4);
    CHECK(a.plans[0].success == b.plans[0].success);
    CHECK(a.plans[0].failure == b.plans[0].failure);
    CHECK(a.baseline_mean_rate == b.baseline_mean_rate);
    REQUIRE(a.evidence.size() == b.evidence.size());
    for (size_t i = 0; i < a.evidence.size(); ++i)
        CHECK(a.evidence[i].generated == b.evidence[i].generated);
    double total = a.plans[0].success + a.plans[0].partial + a.plans[0].failure +
                   a.plans[0].out_of_range;
    CHECK(total == doctest::Approx(1.0));

    CHECK_THROWS_AS(run_experiment(w, {plan}, {}, 32, nullptr), VsError);
}
