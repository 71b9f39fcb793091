#pragma once

#include <string>
#include <vector>

#include "verifscope/trace.hpp"

namespace verifscope {

// Binary linear classifier over hidden states at one layer.
// Row 0 is the "not" (invalid) direction, row 1 the "this" (valid) direction.
struct Probe {
    int layer = -1;
    Matrix w;  // 2 x d

    Vector invalid_row() const { return w.row_vec(0); }
    Vector valid_row() const { return w.row_vec(1); }
};

struct ProbeHyper {
    int max_steps = 4000;
    int batch_size = 8;
    int val_size = 256;
    float weight_decay = 0.01f;
    float lr = 1e-4f;
    int eval_every = 50;
    int patience = 10;
    uint64_t seed = 1;
};

// Raw unembedding logits of an arbitrary residual state (final norm applied).
Vector lens_logits(const Weights& w, const Vector& state);

// Token distribution read off layer `layer` at position t of a trace.
Vector logit_lens(const Weights& w, const ActivationTrace& trace, int layer, int t);

struct LensEntry {
    int token = -1;
    double mean_prob = 0.0;
};

// Per layer: top-k tokens by mean probability across samples.
struct LensReport {
    std::vector<std::vector<LensEntry>> per_layer;
    int top_k = 0;

    std::string to_tsv() const;  // layer, rank, token text, mean probability
};

// positions[i] = the timestep read from traces[i] (e.g., all t_valid).
LensReport aggregate_lens(const Weights& w, const std::vector<ActivationTrace>& traces,
                          const std::vector<int>& positions, int top_k = 10);

// Softmax regression with plain SGD; returns the best-validation probe.
// The validation split is carved off the dataset with the hyper seed.
Probe train_probe(const ProbeDataset& dataset, int layer, const ProbeHyper& hyper = {});

double eval_probe(const Probe& probe, const ProbeDataset& dataset);

// x^l += alpha * normalize(probe_row) at every listed layer, generated
// positions only.
std::vector<int> steer_generate(const Weights& w, const std::vector<int>& prompt,
                                const Vector& probe_row, const std::vector<int>& layers,
                                float alpha, int max_new, int eot_token);

// Toy-depth analog of the deep-model protocol: the last two thirds of layers.
std::vector<int> default_steer_layers(int n_layers);

void save_probe(const Probe& p, const std::string& path,
                const std::string& config_digest = "");
Probe load_probe(const std::string& path, std::string* config_digest = nullptr);

}  // namespace verifscope
