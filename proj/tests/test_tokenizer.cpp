#include <doctest.h>

#include "verifscope/tokenizer.hpp"

using namespace verifscope;

TEST_CASE("round-trip of a full puzzle transcript") {
    const Tokenizer& tok = tokenizer();
    std::string text =
        "Using the numbers 40, 14, 20, create an equation that equals 28.\n"
        "<think>\n"
        "40 * 14 / 20 = 560 / 20 = 28 (this works)\n"
        "40 - 14 - 20 = 26 - 20 = 6 (not 28)\n"
        "</think>\n"
        "<answer> 40 * 14 / 20 </answer><eot>";
    std::vector<int> ids = tok.encode(text);
    CHECK(tok.decode(ids) == text);
    CHECK(ids.back() == tok.eot_id());
}

TEST_CASE("all vocabulary pieces round-trip individually") {
    const Tokenizer& tok = tokenizer();
    for (int i = 0; i < tok.size(); ++i) {
        CHECK(tok.id(tok.piece(i)) == i);
    }
}

TEST_CASE("number tokens exist plain and spaced for 0..999") {
    const Tokenizer& tok = tokenizer();
    for (int v : {0, 1, 9, 10, 42, 99, 100, 560, 999}) {
        int plain = tok.number_id(v, false);
        int spaced = tok.number_id(v, true);
        CHECK(tok.number_value(plain) == v);
        CHECK(tok.number_value(spaced) == v);
        CHECK(tok.piece(spaced) == " " + std::to_string(v));
    }
    CHECK(Tokenizer::kMaxNumber == 999);
}

TEST_CASE("greedy encoding prefers the longest numeric piece") {
    const Tokenizer& tok = tokenizer();
    std::vector<int> ids = tok.encode("560");
    REQUIRE(ids.size() == 1);
    CHECK(tok.number_value(ids[0]) == 560);
    // 4-digit numbers fall back to shorter pieces but still round-trip.
    std::vector<int> big = tok.encode("1234");
    CHECK(tok.decode(big) == "1234");
    CHECK(big.size() > 1);
}

TEST_CASE("word helpers and structural tokens") {
    const Tokenizer& tok = tokenizer();
    std::vector<int> ids = tok.encode(" (this works)");
    bool found = false;
    for (int id : ids) found |= tok.is_word(id, "this");
    CHECK(found);
    CHECK(tok.piece(tok.think_open_id(false)) == "<think>");
    CHECK(tok.piece(tok.think_close_id(false)) == "</think>");
    CHECK(tok.try_id("<nonexistent-piece>") == std::nullopt);
}

TEST_CASE("unsupported characters raise a data error") {
    const Tokenizer& tok = tokenizer();
    CHECK_THROWS_AS(tok.encode("café"), VsError);
    try {
        tok.encode("\x01");
        FAIL("expected throw");
    } catch (const VsError& e) {
        CHECK(e.exit_code() == 4);
    }
}
