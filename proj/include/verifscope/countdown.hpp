#pragma once

#include <optional>
#include <string>
#include <vector>

#include "verifscope/common.hpp"
#include "verifscope/tokenizer.hpp"

namespace verifscope {

// A solvable puzzle: combine the operands (each exactly once) to reach target.
struct Instance {
    std::vector<int> operands;
    int target = 0;
};

enum class Marker { Valid, Invalid };

struct Attempt {
    std::string expression;   // text before the first '='
    long long value = 0;      // left-to-right evaluation of expression
    bool evaluable = false;
    Marker marker = Marker::Invalid;
    int stated = -1;          // the number inside "(not N)", -1 for valid markers
    int marker_pos = -1;      // token index of '(' right before "this"/"not"
    int span_begin = -1;      // token index range of the attempt line
    int span_end = -1;
};

struct Transcript {
    std::vector<int> tokens;           // prompt + completion
    int prompt_len = 0;                // 0 when unknown (parsed from raw tokens)
    std::vector<int> operands;
    int target = -1;
    int t_ans = -1;                    // prompt position of the target number token
    int think_begin = -1;              // index of the <think> token, -1 if absent
    int think_end = -1;                // index of </think>, or tokens.size()
    std::vector<Attempt> attempts;
    std::optional<std::string> answer;
    bool out_of_range = false;

    const Attempt* first_valid() const {
        for (const auto& a : attempts)
            if (a.marker == Marker::Valid) return &a;
        return nullptr;
    }
};

// One left-to-right evaluable expression over all operands (no parentheses).
struct ChainExpr {
    std::vector<int> nums;
    std::string ops;          // ops[i] combines prefix with nums[i+1]
    long long value = 0;

    std::string expression() const;
    // "40 * 14 / 20 = 560 / 20 = 28" style rendering with correct partials.
    std::string chain_text() const;
};

// Strict left-to-right fold; parentheses recurse (no operator precedence).
// Inexact division -> numerical error; malformed input -> data error.
long long evaluate_left_to_right(const std::string& expression);

// Exhaustive search over permutations, operators {+,-,*,/} and
// parenthesizations; division only when exact. Returns a canonical witness.
std::optional<std::string> brute_force_solve(const std::vector<int>& operands, int target);

// All chain expressions whose every prefix value stays in [0, 999].
std::vector<ChainExpr> enumerate_chains(const std::vector<int>& operands);
std::optional<ChainExpr> chain_witness(const Instance& inst);

// Rejection-samples operands in 1..99 and target in 10..99 until a chain
// witness exists (so transcripts can always be synthesized).
Instance generate_instance(Rng& rng, int n_operands);

// Byte-exact user-turn prompt.
std::string render_prompt(const Instance& inst);

// Assistant turn up to and including the "try different combinations:" line.
std::string assistant_prefix(const Instance& inst);

// n_failures wrong attempts (correct arithmetic, "(not N)" markers) followed
// by the witness marked "(this works)", conclusion, and the answer block.
Transcript synthesize_transcript(const Instance& inst, Rng& rng, int n_failures);

// Total function: malformed content sets out_of_range instead of failing.
Transcript parse_transcript(const std::vector<int>& tokens);

// Corpus persistence: one JSON record per line plus a sidecar timestep index.
struct CorpusRecord {
    Instance instance;
    std::string prompt;
    std::string completion;
};

void save_corpus(const std::string& path, const std::vector<CorpusRecord>& records,
                 const std::string& config_digest);
std::vector<CorpusRecord> load_corpus(const std::string& path);

}  // namespace verifscope
