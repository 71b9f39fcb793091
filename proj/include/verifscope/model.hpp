#pragma once

#include <functional>
#include <string>
#include <vector>

#include "verifscope/numerics.hpp"

namespace verifscope {

struct ModelConfig {
    int n_layers = 6;
    int d_model = 128;
    int n_heads = 4;
    int d_head = 32;
    int d_glu = 256;
    int vocab_size = 0;
    int max_seq_len = 384;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
    int layer = 0;
    int head = 0;

    std::string str() const {
        return "L" + std::to_string(layer) + "H" + std::to_string(head);
    }
    bool operator==(const HeadId&) const = default;
};

struct GluVectorId {
    int layer = 0;
    int row = 0;

    std::string str() const {
        return "(" + std::to_string(layer) + ", " + std::to_string(row) + ")";
    }
    bool operator==(const GluVectorId&) const = default;
};

// All linear maps are stored row-vector style, shape (in_dim x out_dim), so a
// forward application is x @ W with contiguous rows. The math-convention
// matrices of the usual column notation are the transposes of these.
struct LayerWeights {
    Matrix wq, wk, wv;      // d x d, head h occupies columns [h*d_head, (h+1)*d_head)
    Matrix wo;              // d x d, head h occupies rows    [h*d_head, (h+1)*d_head)
    Matrix w_gate, w_up;    // d x d_glu
    Matrix w_out;           // d_glu x d, row j is the output vector v_j
    Matrix attn_norm, glu_norm;  // 1 x d scale vectors
};

// Weight-ablation overlay. Never mutates the base weights; the forward pass
// consults it per position.
struct Overlay {
    std::vector<uint8_t> head_off;           // n_layers * n_heads flags
    std::vector<std::vector<int>> glu_off;   // per layer, rows of w_out
    float scale = 0.0f;                      // 0 = ablate, 1 = no-op

    bool empty() const;
};

struct Steering {
    std::vector<int> layers;
    Vector direction;   // normalized to unit length at application time
    float alpha = 0.0f;
};

// Backprop tape: everything the trainer's reverse pass needs.
struct LayerTape {
    Matrix resid_in, normed_attn, q, k, v, mix, resid_mid, normed_glu, zg, zu, m;
    std::vector<Matrix> probs;  // per head, T x T (zero above the diagonal)
    Vector inv_rms_attn, inv_rms_glu;
};

struct Tape {
    std::vector<int> tokens;
    std::vector<LayerTape> layers;
    Matrix final_in, final_normed;
    Vector inv_rms_final;
};

struct ActivationTrace {
    std::vector<int> tokens;
    bool has_hidden = false, has_attn = false, has_glu = false;
    std::vector<Matrix> hidden;              // per layer, T x d (post-block residual)
    std::vector<std::vector<Matrix>> attn;   // per layer per head, T x T
    std::vector<Matrix> glu_m;               // per layer, T x d_glu
};

struct FwdOptions {
    const Overlay* overlay = nullptr;
    const std::vector<uint8_t>* overlay_active = nullptr;  // per position; null = all
    const Steering* steer = nullptr;
    const std::vector<uint8_t>* steer_active = nullptr;    // per position; null = all
    ActivationTrace* trace = nullptr;
    bool cap_hidden = false, cap_attn = false, cap_glu = false;
    Tape* tape = nullptr;
};

struct Weights {
    ModelConfig cfg;
    Matrix embedding;                 // V x d, row = token embedding (tied unembedding)
    Matrix pos;                       // max_seq_len x d
    std::vector<LayerWeights> layers;
    Matrix final_norm;                // 1 x d

    static Weights init_random(const ModelConfig& cfg, Rng& rng);
    Weights zeros_like() const;

    Vector glu_gate_vec(int layer, int row) const;  // length-d gating vector g_row
    Vector glu_up_vec(int layer, int row) const;    // length-d up vector u_row
    Vector glu_out_vec(int layer, int row) const;   // length-d output vector v_row
    void check_head(const HeadId& h) const;
};

// Full-sequence forward; returns logits (T x V).
Matrix forward(const Weights& w, const std::vector<int>& tokens,
               const FwdOptions& opts = {});

// Per-head forward on raw input states (pattern + output), mostly for audits.
std::pair<Matrix, Matrix> attention_head_forward(const Weights& w,
                                                 const Matrix& layer_input, HeadId head);

// GLU block applied to one vector: (output, activations M).
std::pair<Vector, Vector> glu_forward(const Weights& w, int layer, const Vector& x);

// Math-convention circuits: W_O * W_V and W_Q^T * W_K, both d x d.
Matrix ov_circuit(const Weights& w, HeadId head);
Matrix qk_circuit(const Weights& w, HeadId head);

// Incremental greedy decoder with per-layer KV cache. Produces logits
// bit-identical to the full forward pass for the same activity flags.
class Decoder {
public:
    Decoder(const Weights& w, const Overlay* overlay = nullptr,
            const Steering* steer = nullptr);

    void push(int token, bool overlay_active, bool steer_active);
    const Vector& last_logits() const { return logits_; }
    int argmax() const;
    int length() const { return len_; }

private:
    const Weights& w_;
    const Overlay* overlay_;
    const Steering* steer_;
    Vector steer_unit_;
    std::vector<Matrix> k_cache_, v_cache_;
    Matrix embedding_t_;  // E^T, shared unembedding kernel with forward()
    Vector logits_;
    int len_ = 0;
};

struct GenOptions {
    const Overlay* overlay = nullptr;
    // Evaluated on the token prefix (inclusive of the position being computed);
    // unset means the overlay is active everywhere, including the prompt.
    std::function<bool(const std::vector<int>&)> overlay_gate;
    const Steering* steer = nullptr;   // applied at generated positions only
    int eot_token = -1;
};

std::vector<int> generate(const Weights& w, const std::vector<int>& prompt, int max_new,
                          const GenOptions& opts = {});

// Weight container: "VSCOPE1" magic, text manifest, raw little-endian f32 blob.
void save_weights(const Weights& w, const std::string& path,
                  const std::string& config_digest = "");
Weights load_weights(const std::string& path, std::string* config_digest = nullptr);

// Enumerates every tensor (SGD and IO walk the same list).
void visit_tensors(Weights& w,
                   const std::function<void(const std::string&, Matrix&)>& fn);
void visit_tensors(const Weights& w,
                   const std::function<void(const std::string&, const Matrix&)>& fn);

}  // namespace verifscope
