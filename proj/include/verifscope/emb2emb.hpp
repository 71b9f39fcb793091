#pragma once

#include <string>
#include <utility>
#include <vector>

#include "verifscope/numerics.hpp"

namespace verifscope {

struct EmbeddingMap {
    Matrix t;                // d_target x d_source
    double residual = 0.0;   // mean squared fit error
    int n_pairs = 0;
    bool rank_warning = false;  // fewer pairs than source dims: ridge carried the fit
    std::string pairing_digest;
};

// Least-squares map from source token embeddings (rows of source_emb) onto
// their paired target embeddings. n_sample <= 0 means use every pair
// (capped at 100000, sampled without replacement otherwise).
EmbeddingMap fit_map(const Matrix& source_emb, const Matrix& target_emb,
                     const std::vector<std::pair<int, int>>& pairing, int n_sample = 0,
                     uint64_t seed = 1);

// Identity pairing (i, i) over a shared vocabulary.
std::vector<std::pair<int, int>> identity_pairing(int vocab_size);

Vector transfer_vector(const EmbeddingMap& map, const Vector& v);

void save_map(const EmbeddingMap& map, const std::string& path);
EmbeddingMap load_map(const std::string& path);

}  // namespace verifscope
