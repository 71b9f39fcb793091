#pragma once

#include <functional>
#include <string>
#include <vector>

#include "verifscope/countdown.hpp"
#include "verifscope/glu_analysis.hpp"

namespace verifscope {

struct PrevTokenHeadReport {
    HeadId head;
    double mass = 0.0;  // mean attention on t_ans at valid-attempt positions
    int samples = 0;
    bool flagged = false;
};

enum class RankMethod { Eq8, AttentionDensity, GateUpSimilarity, ProbeSimilarity,
                        Composition };

std::string rank_method_name(RankMethod m);

struct HeadScore {
    HeadId head;
    double score = 0.0;
    RankMethod method = RankMethod::Eq8;
};

// Per-sample mean of A[t_valid, t_ans] over the correct (Valid-marked)
// attempts, then averaged across samples; heads at or above `threshold`
// are flagged. Traces must carry attention patterns.
std::vector<PrevTokenHeadReport> detect_prev_token_heads(
    const std::vector<ActivationTrace>& traces, const std::vector<Transcript>& transcripts,
    double threshold = 0.10);

// Weights-only head score: mean over refs of <silu(g . OV), u . OV> where
// g . OV and u . OV are length-d row vectors through the head's OV circuit.
double score_head_eq8(const Weights& w, HeadId head,
                      const std::vector<std::pair<Vector, Vector>>& glu_refs);

// ||W1 W2||_F / (||W1||_F ||W2||_F).
double composition_score(const Matrix& w1, const Matrix& w2);

// Dominant right singular direction of a circuit, by power iteration on
// M^T M (100 iterations, seeded start).
Vector principal_direction(const Matrix& m, uint64_t seed = 1);

// (gate row, up row) pairs of the first n selected valid vectors.
std::vector<std::pair<Vector, Vector>> glu_refs_from_selection(
    const Weights& w, const GluSelection& sel, int n);

std::vector<HeadScore> rank_heads_eq8(const Weights& w,
                                      const std::vector<HeadId>& candidates,
                                      const std::vector<std::pair<Vector, Vector>>& refs);
std::vector<HeadScore> rank_attention_density(
    const std::vector<PrevTokenHeadReport>& reports);
std::vector<HeadScore> rank_gate_up_similarity(
    const Weights& w, const std::vector<HeadId>& candidates,
    const std::vector<std::pair<Vector, Vector>>& refs);
std::vector<HeadScore> rank_probe_similarity(const Weights& w,
                                             const std::vector<HeadId>& candidates,
                                             const Vector& probe_valid_row);
std::vector<HeadScore> rank_composition(const Weights& w,
                                        const std::vector<HeadId>& candidates,
                                        const std::vector<std::pair<Vector, Vector>>& refs);

struct SubsetSearchStep {
    std::vector<HeadId> heads;
    double rate = 0.0;  // success + partial
};

struct SubsetSearchResult {
    std::vector<HeadId> heads;   // best prefix found
    double rate = 0.0;
    bool reached_full = false;   // hit rate 1.0 before the budget ran out
    std::vector<SubsetSearchStep> log;
};

// Greedy prefix search: grow the ranked list one head at a time, evaluating
// each prefix with `evaluate` (success + partial rate in [0,1]); stops at
// rate 1.0 or after `budget` evaluations and returns the best prefix.
SubsetSearchResult search_minimal_subset(
    const std::vector<HeadScore>& ranking,
    const std::function<double(const std::vector<HeadId>&)>& evaluate, int budget);

}  // namespace verifscope
