#pragma once

#include <string>
#include <vector>

#include "verifscope/lens.hpp"

namespace verifscope {

struct GluPick {
    GluVectorId id;
    float similarity = 0.0f;
};

struct GluSelection {
    std::vector<GluPick> valid;    // rows of w_out most aligned with W[1]
    std::vector<GluPick> invalid;  // rows most aligned with W[0]
    int k = 0;
    int layer_begin = 0, layer_end = 0;      // [begin, end)
    std::vector<std::string> conflicts;      // rows claimed by both polarities

    std::vector<GluVectorId> valid_ids() const;
    std::vector<GluVectorId> invalid_ids() const;
    std::vector<std::vector<int>> rows_by_layer(int n_layers, bool with_valid,
                                                bool with_invalid) const;
};

// Top k rows per layer by cosine similarity to each probe row; a row that
// makes both lists keeps its higher-similarity polarity (conflict logged).
// probes[i] must cover layer i for i in [layer_begin, layer_end).
GluSelection select_top_k(const Weights& w, const std::vector<Probe>& probes, int k,
                          int layer_begin, int layer_end);

struct TokenNeighbor {
    int token = -1;
    float similarity = 0.0f;
};

// Top-k vocabulary rows by cosine similarity to v. The antipode report is the
// same query with -v.
std::vector<TokenNeighbor> nearest_neighbor_tokens(const Weights& w, const Vector& v,
                                                   int k);

struct ReceptiveFieldSpec {
    std::vector<std::pair<Vector, Vector>> neurons;  // (gate row, up row)
};

struct ReceptiveFieldResult {
    std::vector<uint8_t> active;  // per neuron: silu(g.x) * (u.x) > 0
    bool member = false;          // all active
};

ReceptiveFieldResult receptive_field_contains(const Vector& x,
                                              const ReceptiveFieldSpec& spec);

struct ActivationRow {
    GluVectorId id;
    double mean_before = 0.0;
    double mean_after = 0.0;  // NaN-free; equals mean_before when no after set
    double delta = 0.0;
};

// Mean GLU activation m_j per selected vector at positions[i] of traces[i];
// `after` (same layout) enables before/after deltas, pass empty to skip.
std::vector<ActivationRow> activation_report(const std::vector<ActivationTrace>& before,
                                             const std::vector<ActivationTrace>& after,
                                             const std::vector<int>& positions,
                                             const std::vector<GluVectorId>& selection);

struct AntipodeEntry {
    GluVectorId id;
    std::vector<TokenNeighbor> forward;   // neighbors of v
    std::vector<TokenNeighbor> antipode;  // neighbors of -v
};

struct AntipodalAudit {
    std::vector<AntipodeEntry> entries;
    // SiLU mechanism numbers: a negative preactivation contributes along -v
    // with bounded magnitude, while a ReLU clamp contributes nothing.
    double max_abs_silu_negative = 0.0;   // sup |silu(a)| over a < 0 (~0.2785)
    double example_contribution = 0.0;    // silu(-1) * 1
    double relu_contrast = 0.0;           // always exactly 0
};

AntipodalAudit antipodal_audit(const Weights& w, const std::vector<GluVectorId>& selection,
                               int nn_k = 8);

}  // namespace verifscope
