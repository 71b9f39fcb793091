#include "verifscope/countdown.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>

#include <json.hpp>

namespace verifscope {

namespace {

std::string number_list(const std::vector<int>& nums, bool with_and) {
    std::string out;
    for (size_t i = 0; i < nums.size(); ++i) {
        if (i > 0) out += ", ";
        if (with_and && i + 1 == nums.size()) out += "and ";
        out += std::to_string(nums[i]);
    }
    return out;
}

long long apply_op(long long a, char op, long long b) {
    switch (op) {
        case '+': return a + b;
        case '-': return a - b;
        case '*': return a * b;
        case '/':
            if (b == 0 || a % b != 0) {
                throw VsError(ErrorKind::Numerical, "evaluation error: inexact division");
            }
            return a / b;
    }
    throw VsError(ErrorKind::Data, "parse error: unknown operator");
}

struct ExprLexer {
    const std::string& s;
    size_t i = 0;

    void skip_ws() {
        while (i < s.size() && s[i] == ' ') ++i;
    }
    bool done() {
        skip_ws();
        return i >= s.size();
    }
    char peek() {
        skip_ws();
        return i < s.size() ? s[i] : '\0';
    }
};

long long parse_expr(ExprLexer& lx);

long long parse_term(ExprLexer& lx) {
    char c = lx.peek();
    if (c == '(') {
        ++lx.i;
        long long v = parse_expr(lx);
        if (lx.peek() != ')') throw VsError(ErrorKind::Data, "parse error: missing ')'");
        ++lx.i;
        return v;
    }
    bool neg = false;
    if (c == '-') {
        neg = true;
        ++lx.i;
        c = lx.peek();
    }
    if (!std::isdigit(static_cast<unsigned char>(c))) {
        throw VsError(ErrorKind::Data, "parse error: expected number");
    }
    long long v = 0;
    while (lx.i < lx.s.size() && std::isdigit(static_cast<unsigned char>(lx.s[lx.i]))) {
        v = v * 10 + (lx.s[lx.i] - '0');
        ++lx.i;
    }
    return neg ? -v : v;
}

long long parse_expr(ExprLexer& lx) {
    long long acc = parse_term(lx);
    while (true) {
        char c = lx.peek();
        if (c != '+' && c != '-' && c != '*' && c != '/') break;
        ++lx.i;
        acc = apply_op(acc, c, parse_term(lx));
    }
    return acc;
}

// Combines every unordered pair with every operator (both operand orders for
// the non-commutative ones), depth-first, deterministic order.
bool bf_search(std::vector<std::pair<long long, std::string>>& items, long long target,
               std::string& witness) {
    if (items.size() == 1) {
        if (items[0].first == target) {
            witness = items[0].second;
            return true;
        }
        return false;
    }
    for (size_t i = 0; i < items.size(); ++i) {
        for (size_t j = i + 1; j < items.size(); ++j) {
            auto a = items[i];
            auto b = items[j];
            std::vector<std::pair<long long, std::string>> rest;
            for (size_t k = 0; k < items.size(); ++k)
                if (k != i && k != j) rest.push_back(items[k]);
            struct Cand {
                long long v;
                std::string text;
                bool ok;
            };
            auto combine = [](const std::pair<long long, std::string>& x, char op,
                              const std::pair<long long, std::string>& y) -> Cand {
                Cand c{0, "", true};
                if (op == '/' && (y.first == 0 || x.first % y.first != 0)) {
                    c.ok = false;
                    return c;
                }
                c.v = op == '+'   ? x.first + y.first
                      : op == '-' ? x.first - y.first
                      : op == '*' ? x.first * y.first
                                  : x.first / y.first;
                c.text = "(" + x.second + " " + op + " " + y.second + ")";
                return c;
            };
            const char ops[] = {'+', '-', '*', '/'};
            for (char op : ops) {
                for (int order = 0; order < 2; ++order) {
                    if (order == 1 && (op == '+' || op == '*')) continue;
                    Cand c = order == 0 ? combine(a, op, b) : combine(b, op, a);
                    if (!c.ok) continue;
                    rest.push_back({c.v, c.text});
                    if (bf_search(rest, target, witness)) return true;
                    rest.pop_back();
                }
            }
        }
    }
    return false;
}

bool is_attempt_line(const std::string& line) {
    static const std::regex re(
        R"(^[-0-9+*/() ]+=[-0-9+*/()= ]+ \((this works|not -?[0-9]+)\)$)");
    return std::regex_match(line, re);
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(' ');
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(' ');
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string ChainExpr::expression() const {
    std::string out = std::to_string(nums[0]);
    for (size_t i = 0; i + 1 < nums.size(); ++i) {
        out += ' ';
        out += ops[i];
        out += ' ';
        out += std::to_string(nums[i + 1]);
    }
    return out;
}

std::string ChainExpr::chain_text() const {
    std::string out = expression();
    long long acc = nums[0];
    for (size_t i = 0; i + 1 < nums.size(); ++i) {
        acc = apply_op(acc, ops[i], nums[i + 1]);
        if (i + 2 == nums.size()) {
            out += " = " + std::to_string(acc);
        } else {
            out += " = " + std::to_string(acc);
            for (size_t j = i + 1; j + 1 < nums.size(); ++j) {
                out += ' ';
                out += ops[j];
                out += ' ';
                out += std::to_string(nums[j + 1]);
            }
        }
    }
    return out;
}

long long evaluate_left_to_right(const std::string& expression) {
    ExprLexer lx{expression};
    long long v = parse_expr(lx);
    if (!lx.done()) throw VsError(ErrorKind::Data, "parse error: trailing input");
    return v;
}

std::optional<std::string> brute_force_solve(const std::vector<int>& operands, int target) {
    if (operands.size() < 2 || operands.size() > 4) {
        throw VsError(ErrorKind::Argument, "brute_force_solve: need 2-4 operands");
    }
    for (int v : operands) {
        if (v < 1 || v > 999) {
            throw VsError(ErrorKind::Argument, "brute_force_solve: operands must be 1..999");
        }
    }
    std::vector<std::pair<long long, std::string>> items;
    for (int v : operands) items.push_back({v, std::to_string(v)});
    std::string witness;
    if (!bf_search(items, target, witness)) return std::nullopt;
    // Strip the outermost parentheses pair added by the combiner.
    if (witness.size() >= 2 && witness.front() == '(' && witness.back() == ')') {
        witness = witness.substr(1, witness.size() - 2);
    }
    return witness;
}

std::vector<ChainExpr> enumerate_chains(const std::vector<int>& operands) {
    std::vector<int> idx(operands.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<ChainExpr> out;
    std::vector<std::string> seen;
    std::sort(idx.begin(), idx.end());
    const char opset[] = {'+', '-', '*', '/'};
    do {
        std::vector<int> nums;
        for (int i : idx) nums.push_back(operands[i]);
        int n_ops = static_cast<int>(nums.size()) - 1;
        int combos = 1;
        for (int i = 0; i < n_ops; ++i) combos *= 4;
        for (int c = 0; c < combos; ++c) {
            ChainExpr e;
            e.nums = nums;
            int cc = c;
            for (int i = 0; i < n_ops; ++i) {
                e.ops += opset[cc & 3];
                cc >>= 2;
            }
            long long acc = nums[0];
            bool ok = acc >= 0 && acc <= Tokenizer::kMaxNumber;
            for (int i = 0; ok && i < n_ops; ++i) {
                try {
                    acc = apply_op(acc, e.ops[i], nums[i + 1]);
                } catch (const VsError&) {
                    ok = false;
                    break;
                }
                if (acc < 0 || acc > Tokenizer::kMaxNumber) ok = false;
            }
            if (!ok) continue;
            e.value = acc;
            std::string key = e.expression();
            if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
            seen.push_back(key);
            out.push_back(std::move(e));
        }
    } while (std::next_permutation(idx.begin(), idx.end()));
    return out;
}

std::optional<ChainExpr> chain_witness(const Instance& inst) {
    for (const auto& e : enumerate_chains(inst.operands)) {
        if (e.value == inst.target) return e;
    }
    return std::nullopt;
}

Instance generate_instance(Rng& rng, int n_operands) {
    if (n_operands < 3 || n_operands > 4) {
        throw VsError(ErrorKind::Argument, "generate_instance: n_operands must be 3 or 4");
    }
    for (int attempt = 0; attempt < 10000; ++attempt) {
        Instance inst;
        for (int i = 0; i < n_operands; ++i)
            inst.operands.push_back(static_cast<int>(rng.uniform_int(1, 99)));
        inst.target = static_cast<int>(rng.uniform_int(10, 99));
        if (chain_witness(inst)) return inst;
    }
    throw VsError(ErrorKind::Data, "generate_instance: retry cap exceeded");
}

std::string render_prompt(const Instance& inst) {
    return "A conversation between User and Assistant. The user asks a question, and the "
           "Assistant solves it. The assistant first thinks about the reasoning process "
           "and then provides the user with the answer.\nUser: Using the numbers [" +
           number_list(inst.operands, false) + "], create an equation that equals " +
           std::to_string(inst.target) +
           ". You can use basic arithmetic operations (+, -, *, /) and each number can "
           "only be used once. Show your work in <think> </think> tags. And return the "
           "final answer in <answer> </answer> tags, for example <answer> (1 + 2) / 3 "
           "</answer>.";
}

std::string assistant_prefix(const Instance& inst) {
    return "\nAssistant: Let me solve this step by step.\n<think> We have the numbers " +
           number_list(inst.operands, true) +
           ". We need to use these numbers to make an equation that equals " +
           std::to_string(inst.target) +
           " using basic arithmetic operations. Let's try different combinations:\n";
}

Transcript synthesize_transcript(const Instance& inst, Rng& rng, int n_failures) {
    auto chains = enumerate_chains(inst.operands);
    const ChainExpr* witness = nullptr;
    std::vector<const ChainExpr*> failures;
    for (const auto& e : chains) {
        if (e.value == inst.target) {
            if (!witness) witness = &e;
        } else {
            failures.push_back(&e);
        }
    }
    if (!witness) {
        throw VsError(ErrorKind::Data, "synthesize_transcript: instance has no chain witness");
    }
    rng.shuffle(failures);
    int n_fail = std::min<int>(n_failures, static_cast<int>(failures.size()));

    std::string text = assistant_prefix(inst);
    for (int i = 0; i < n_fail; ++i) {
        text += failures[i]->chain_text() + " (not " + std::to_string(inst.target) + ")\n";
    }
    text += witness->chain_text() + " (this works)\n";
    text += "So, the equation that equals " + std::to_string(inst.target) + " is " +
            witness->expression() + ".\n</think> <answer> " + witness->expression() +
            " </answer><eot>";

    std::string prompt = render_prompt(inst);
    Transcript tr = parse_transcript(tokenizer().encode(prompt + text));
    tr.prompt_len = static_cast<int>(tokenizer().encode(prompt).size());
    return tr;
}

Transcript parse_transcript(const std::vector<int>& tokens) {
    const Tokenizer& tk = tokenizer();
    Transcript tr;
    tr.tokens = tokens;
    const int n = static_cast<int>(tokens.size());

    auto piece_is = [&](int i, const char* w) {
        return i >= 0 && i < n && tk.is_word(tokens[i], w);
    };

    // <think> region. The prompt quotes an empty "<think> </think>" pair when
    // explaining the format, so the region is the first opening tag whose
    // closing tag is not immediately adjacent.
    tr.think_end = n;
    for (int i = 0; i < n && tr.think_begin < 0; ++i) {
        const std::string& p = tk.piece(tokens[i]);
        if (p != "<think>" && p != " <think>") continue;
        int close = n;
        for (int j = i + 1; j < n; ++j) {
            const std::string& q = tk.piece(tokens[j]);
            if (q == "</think>" || q == " </think>") {
                close = j;
                break;
            }
        }
        if (close == i + 1) continue;  // the quoted example pair
        tr.think_begin = i;
        tr.think_end = close;
    }

    // Prompt-side fields: target position and operand list.
    int prompt_end = tr.think_begin >= 0 ? tr.think_begin : n;
    bool in_brackets = false;
    for (int i = 0; i < prompt_end; ++i) {
        const std::string& p = tk.piece(tokens[i]);
        if (p == "[" || p == " [") in_brackets = true;
        if (p == "]" || p == " ]") in_brackets = false;
        if (in_brackets) {
            if (auto v = tk.number_value(tokens[i])) tr.operands.push_back(*v);
        }
        if (tr.t_ans < 0 && piece_is(i, "equals") && i + 1 < n) {
            if (auto v = tk.number_value(tokens[i + 1])) {
                tr.t_ans = i + 1;
                tr.target = *v;
            }
        }
    }

    // Attempts: each "(" whose next token is the marker word.
    int region_begin = tr.think_begin >= 0 ? tr.think_begin + 1 : 0;
    for (int i = region_begin; i < tr.think_end; ++i) {
        const std::string& p = tk.piece(tokens[i]);
        if (p != "(" && p != " (") continue;
        bool is_this = piece_is(i + 1, "this");
        bool is_not = piece_is(i + 1, "not");
        if (!is_this && !is_not) continue;
        Attempt a;
        a.marker = is_this ? Marker::Valid : Marker::Invalid;
        a.marker_pos = i;
        if (is_not && i + 2 < n) {
            if (auto v = tk.number_value(tokens[i + 2])) a.stated = *v;
        }
        int ls = i - 1;
        while (ls > region_begin && tk.piece(tokens[ls - 1]) != "\n") --ls;
        a.span_begin = ls;
        a.span_end = i;
        for (int j = i; j < tr.think_end && j < i + 5; ++j) {
            a.span_end = j;
            if (tk.piece(tokens[j]) == ")") break;
        }
        std::string line = tk.decode(std::vector<int>(tokens.begin() + ls, tokens.begin() + i));
        size_t eq = line.find('=');
        a.expression = trim(eq == std::string::npos ? line : line.substr(0, eq));
        try {
            a.value = evaluate_left_to_right(a.expression);
            a.evaluable = true;
        } catch (const VsError&) {
            a.evaluable = false;
            tr.out_of_range = true;
        }
        tr.attempts.push_back(std::move(a));
    }

    // Answer block.
    for (int i = tr.think_end; i < n; ++i) {
        const std::string& p = tk.piece(tokens[i]);
        if (p == "<answer>" || p == " <answer>") {
            int end = n;
            for (int j = i + 1; j < n; ++j) {
                const std::string& q = tk.piece(tokens[j]);
                if (q == "</answer>" || q == " </answer>") {
                    end = j;
                    break;
                }
            }
            tr.answer = trim(tk.decode(std::vector<int>(tokens.begin() + i + 1,
                                                        tokens.begin() + end)));
            break;
        }
    }

    // Line-level grammar audit of the think region.
    if (tr.think_begin >= 0) {
        std::string region = tk.decode(std::vector<int>(tokens.begin() + region_begin,
                                                        tokens.begin() + tr.think_end));
        bool truncated = tr.think_end == n;  // generation ran out before </think>
        std::vector<std::string> lines;
        std::stringstream ss(region);
        std::string line;
        while (std::getline(ss, line)) lines.push_back(line);
        for (size_t li = 0; li < lines.size(); ++li) {
            std::string l = trim(lines[li]);
            if (l.empty()) continue;
            bool last = li + 1 == lines.size();
            if (truncated && last) continue;  // allow a cut-off final line
            bool ok = is_attempt_line(l) ||
                      (l.rfind("We have the numbers", 0) == 0 && l.back() == ':') ||
                      l.rfind("So, the equation that equals", 0) == 0;
            if (!ok) tr.out_of_range = true;
        }
    }
    return tr;
}

void save_corpus(const std::string& path, const std::vector<CorpusRecord>& records,
                 const std::string& config_digest) {
    std::ofstream out(path);
    std::ofstream idx(path + ".index");
    if (!out || !idx) throw VsError(ErrorKind::Io, "save_corpus: cannot open " + path);
    nlohmann::json header = {{"config_digest", config_digest},
                             {"count", records.size()},
                             {"schema", "verifscope-corpus-v1"}};
    out << header.dump() << "\n";
    idx << header.dump() << "\n";
    for (const auto& r : records) {
        nlohmann::json j = {{"operands", r.instance.operands},
                            {"target", r.instance.target},
                            {"prompt", r.prompt},
                            {"completion", r.completion}};
        out << j.dump() << "\n";

        Transcript tr = parse_transcript(tokenizer().encode(r.prompt + r.completion));
        std::vector<int> t_valid, t_invalid;
        for (const auto& a : tr.attempts) {
            (a.marker == Marker::Valid ? t_valid : t_invalid).push_back(a.marker_pos);
        }
        nlohmann::json ji = {{"t_ans", tr.t_ans},
                             {"t_valid", t_valid},
                             {"t_invalid", t_invalid},
                             {"prompt_len", tokenizer().encode(r.prompt).size()}};
        idx << ji.dump() << "\n";
    }
}

std::vector<CorpusRecord> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw VsError(ErrorKind::Dependency, "load_corpus: missing " + path +
                                                      " (produce it with gen-data)");
    std::vector<CorpusRecord> out;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        if (first) {
            first = false;
            if (j.contains("schema")) continue;  // header row
        }
        CorpusRecord r;
        r.instance.operands = j.at("operands").get<std::vector<int>>();
        r.instance.target = j.at("target").get<int>();
        r.prompt = j.at("prompt").get<std::string>();
        r.completion = j.at("completion").get<std::string>();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace verifscope
