#pragma once

#include <string>
#include <vector>

#include "verifscope/countdown.hpp"
#include "verifscope/model.hpp"

namespace verifscope {

struct LossStats {
    double loss = 0.0;      // mean cross-entropy over masked positions
    int positions = 0;      // number of masked positions
    int correct = 0;        // greedy argmax matches at masked positions
};

// Cross-entropy of next-token prediction at positions [loss_start-1, T-2].
// When grads is non-null, accumulates (+=) d loss / d weights into it.
LossStats next_token_loss(const Weights& w, const std::vector<int>& tokens,
                          int loss_start, Weights* grads);

// Double-precision re-implementation of the forward loss, used as the
// numeric side of the gradient check so finite differences are not drowned
// by single-precision rounding.
double reference_loss_f64(const Weights& w, const std::vector<int>& tokens,
                          int loss_start);

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    int coords_checked = 0;
};

// Central differences on `coords_per_tensor` random coordinates of every
// tensor; relative error uses |a - b| / max(1, |a| + |b|).
GradCheckReport grad_check(const Weights& w, const std::vector<int>& tokens,
                           int loss_start, int coords_per_tensor, float eps, Rng& rng);

struct TrainConfig {
    int steps = 1500;
    int batch_size = 8;
    float lr = 0.02f;
    float weight_decay = 1e-4f;
    int eval_every = 50;
    int patience = 10;       // evals without val improvement before stopping
    int eval_samples = 64;   // validation subset per eval
    uint64_t seed = 1;
};

struct EvalStats {
    double loss = 0.0;
    double token_accuracy = 0.0;
    double marker_accuracy = 0.0;  // teacher-forced, at the "(" positions
    int samples = 0;
};

struct TokenizedSample {
    std::vector<int> tokens;
    int prompt_len = 0;
    std::vector<int> marker_positions;
};

TokenizedSample tokenize_record(const CorpusRecord& rec);

EvalStats evaluate(const Weights& w, const std::vector<TokenizedSample>& samples);

// Teacher-forced accuracy at attempt-marker positions only.
double marker_accuracy(const Weights& w, const std::vector<TokenizedSample>& samples);

// Fraction of greedy completions that keep the transcript structure intact
// (think region, well-formed attempt lines, an answer block).
double format_accuracy(const Weights& w, const std::vector<Instance>& instances,
                       int max_new);

struct TrainResult {
    Weights weights;        // best validation snapshot
    EvalStats final_eval;
    int steps_run = 0;
    double best_val_loss = 0.0;
};

// SGD with classical momentum and decoupled weight decay at a constant
// learning rate (no per-parameter adaptive scaling), early
// stopping on validation loss; deterministic for a fixed config/seed and
// independent of the thread count. log_path, when set, receives one JSON
// line per eval.
TrainResult train_toy_model(const ModelConfig& cfg,
                            const std::vector<CorpusRecord>& train,
                            const std::vector<CorpusRecord>& val, const TrainConfig& tc,
                            const std::string& log_path = "");

}  // namespace verifscope
