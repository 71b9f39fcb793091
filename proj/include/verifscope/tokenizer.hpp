#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "verifscope/common.hpp"

namespace verifscope {

// Closed-vocabulary tokenizer for the structured CoT grammar.
//
// Tokens are (optional leading space +) one atom, where an atom is one of:
//   - a reserved tag: <think> </think> <answer> </answer> <eot>
//   - a reserved word from the task templates ("this", "not", "works", ...)
//   - an integer literal of up to 3 digits (longer digit runs split from the
//     left), so every number the grammar uses occupies a single position
//   - a single printable character (fallback; keeps encoding total)
//
// Encoding is greedy longest-match and decode(encode(s)) == s for any input
// made of printable ASCII and newlines.
class Tokenizer {
public:
    Tokenizer();

    const std::vector<std::string>& vocab() const { return vocab_; }
    int size() const { return static_cast<int>(vocab_.size()); }

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;
    const std::string& piece(int id) const;

    // Lookup; throws ErrorKind::Argument when the piece is not in the vocab.
    int id(const std::string& piece) const;
    std::optional<int> try_id(const std::string& piece) const;

    // Number token for value v (0..999), with or without a leading space.
    int number_id(int v, bool leading_space) const;
    // Value of a number token, ignoring any leading space; nullopt otherwise.
    std::optional<int> number_value(int id) const;

    bool is_word(int id, const std::string& word) const;

    int eot_id() const { return eot_id_; }
    int think_open_id(bool leading_space) const;
    int think_close_id(bool leading_space) const;

    static constexpr int kMaxNumber = 999;

private:
    void add(const std::string& piece);

    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> ids_;
    std::vector<int> number_plain_;   // value -> id
    std::vector<int> number_spaced_;  // value -> id
    int eot_id_ = -1;
};

// Process-wide tokenizer instance (the vocabulary is fixed).
const Tokenizer& tokenizer();

}  // namespace verifscope
