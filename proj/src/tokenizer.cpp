#include "verifscope/tokenizer.hpp"

#include <array>
#include <cctype>

namespace verifscope {

namespace {

constexpr std::array kTags = {"<think>", "</think>", "<answer>", "</answer>", "<eot>"};

// Every word used by the prompt / CoT templates, plus the marker words.
constexpr std::array kWords = {
    "A",       "conversation", "between",  "User",      "and",      "Assistant",
    "The",     "user",         "asks",     "a",         "question", "the",
    "solves",  "it",           "assistant", "first",    "thinks",   "about",
    "reasoning", "process",    "then",     "provides",  "with",     "answer",
    "Using",   "numbers",      "create",   "an",        "equation", "that",
    "equals",  "You",          "can",      "use",       "basic",    "arithmetic",
    "operations", "each",      "number",   "only",      "be",       "used",
    "once",    "Show",         "your",     "work",      "in",       "tags",
    "And",     "return",       "final",    "for",       "example",  "Let",
    "me",      "solve",        "this",     "step",      "by",       "We",
    "have",    "need",         "to",       "these",     "make",     "using",
    "Let's",   "try",          "different", "combinations", "not",  "works",
    "So",      "is",
};

bool is_word_char(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '\'';
}

}  // namespace

Tokenizer::Tokenizer() {
    number_plain_.assign(kMaxNumber + 1, -1);
    number_spaced_.assign(kMaxNumber + 1, -1);

    for (const char* tag : kTags) {
        add(tag);
        add(std::string(" ") + tag);
    }
    for (const char* w : kWords) {
        add(w);
        add(std::string(" ") + w);
    }
    for (int v = 0; v <= kMaxNumber; ++v) {
        std::string s = std::to_string(v);
        add(s);
        number_plain_[v] = ids_.at(s);
        add(" " + s);
        number_spaced_[v] = ids_.at(" " + s);
    }
    add("\n");
    for (char c = 32; c < 127; ++c) {
        add(std::string(1, c));
        if (c != ' ') add(std::string(" ") + c);
    }
    eot_id_ = ids_.at("<eot>");
}

void Tokenizer::add(const std::string& piece) {
    if (ids_.count(piece)) return;
    ids_.emplace(piece, static_cast<int>(vocab_.size()));
    vocab_.push_back(piece);
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    const size_t n = text.size();
    size_t i = 0;
    while (i < n) {
        if (text[i] == ' ' && (i + 1 == n || text[i + 1] == ' ')) {
            out.push_back(ids_.at(" "));
            ++i;
            continue;
        }
        bool sp = text[i] == ' ';
        size_t j = i + (sp ? 1 : 0);
        std::string atom;
        if (text[j] == '<') {
            for (const char* tag : kTags) {
                size_t len = std::char_traits<char>::length(tag);
                if (text.compare(j, len, tag) == 0) {
                    atom = tag;
                    break;
                }
            }
        }
        if (atom.empty() && is_word_char(text[j])) {
            size_t k = j;
            while (k < n && is_word_char(text[k])) ++k;
            atom = text.substr(j, k - j);
        } else if (atom.empty() && std::isdigit(static_cast<unsigned char>(text[j]))) {
            size_t k = j;
            while (k < n && k < j + 3 && std::isdigit(static_cast<unsigned char>(text[k])))
                ++k;
            atom = text.substr(j, k - j);
        } else if (atom.empty()) {
            atom = text.substr(j, 1);
        }
        std::string piece = (sp ? " " : "") + atom;
        auto it = ids_.find(piece);
        if (it != ids_.end()) {
            out.push_back(it->second);
            i = j + atom.size();
            continue;
        }
        // Fallback: emit the space (if any) then the atom character by character.
        if (sp) {
            out.push_back(ids_.at(" "));
            ++i;
        }
        for (char c : atom) {
            auto cit = ids_.find(std::string(1, c));
            if (cit == ids_.end()) {
                throw VsError(ErrorKind::Data,
                              "tokenizer: unsupported character in input");
            }
            out.push_back(cit->second);
            ++i;
        }
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) out += piece(id);
    return out;
}

const std::string& Tokenizer::piece(int id) const {
    if (id < 0 || id >= size()) {
        throw VsError(ErrorKind::Argument, "tokenizer: id out of range");
    }
    return vocab_[id];
}

int Tokenizer::id(const std::string& piece) const {
    auto it = ids_.find(piece);
    if (it == ids_.end()) {
        throw VsError(ErrorKind::Argument, "tokenizer: unknown piece '" + piece + "'");
    }
    return it->second;
}

std::optional<int> Tokenizer::try_id(const std::string& piece) const {
    auto it = ids_.find(piece);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
}

int Tokenizer::number_id(int v, bool leading_space) const {
    if (v < 0 || v > kMaxNumber) {
        throw VsError(ErrorKind::Argument, "tokenizer: number out of range");
    }
    return leading_space ? number_spaced_[v] : number_plain_[v];
}

std::optional<int> Tokenizer::number_value(int id) const {
    const std::string& p = piece(id);
    size_t start = (!p.empty() && p[0] == ' ') ? 1 : 0;
    if (start >= p.size()) return std::nullopt;
    int v = 0;
    for (size_t i = start; i < p.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(p[i]))) return std::nullopt;
        v = v * 10 + (p[i] - '0');
    }
    return v;
}

bool Tokenizer::is_word(int id, const std::string& word) const {
    const std::string& p = piece(id);
    return p == word || p == " " + word;
}

int Tokenizer::think_open_id(bool leading_space) const {
    return ids_.at(leading_space ? " <think>" : "<think>");
}

int Tokenizer::think_close_id(bool leading_space) const {
    return ids_.at(leading_space ? " </think>" : "</think>");
}

const Tokenizer& tokenizer() {
    static Tokenizer t;
    return t;
}

}  // namespace verifscope
