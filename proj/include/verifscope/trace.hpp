#pragma once

#include <string>
#include <vector>

#include "verifscope/model.hpp"

namespace verifscope {

// Runs the model over one sequence and keeps the requested activations:
// post-block residual states, per-head attention patterns, GLU activations.
ActivationTrace capture(const Weights& w, const std::vector<int>& tokens,
                        bool hidden = true, bool attn = false, bool glu = false);

// Trace container: "VSTRACE1" magic, text manifest with one line per chunk
// ("layer{l}.hidden", "layer{l}.attn{h}", "layer{l}.glu"), raw little-endian
// f32 blob. Chunks are independently addressable so a single layer can be
// loaded without reading the rest.
void save_trace(const ActivationTrace& tr, const std::string& path,
                const std::string& config_digest = "");
ActivationTrace load_trace(const std::string& path, std::string* config_digest = nullptr,
                           int only_layer = -1);

struct ProbeDataset {
    Matrix x;                 // one hidden state per row
    std::vector<int> labels;  // value each row should decode to
};

// Row i = traces[i]'s layer-`layer` hidden state at positions[i], labelled
// labels[i]. Sizes must agree; positions must be in range.
ProbeDataset build_probe_dataset(const std::vector<ActivationTrace>& traces,
                                 const std::vector<int>& positions,
                                 const std::vector<int>& labels, int layer);

}  // namespace verifscope
