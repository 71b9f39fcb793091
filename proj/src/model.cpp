#include "verifscope/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace verifscope {

namespace {

constexpr float kNormEps = 1e-6f;

// y = x * scale / rms(x); returns 1/rms for the backward pass.
float rmsnorm_row(float* dst, const float* x, const float* scale, int d) {
    float ms = dot(x, x, d) / static_cast<float>(d);
    float inv = 1.0f / std::sqrt(ms + kNormEps);
    for (int i = 0; i < d; ++i) dst[i] = x[i] * inv * scale[i];
    return inv;
}

// out = x @ w for a single row vector x (length w.rows).
void apply_linear_row(float* out, const float* x, const Matrix& w) {
    std::fill(out, out + w.cols, 0.0f);
    for (int k = 0; k < w.rows; ++k) axpy(out, x[k], w.row(k), w.cols);
}

Matrix apply_linear(const Matrix& x, const Matrix& w) {
    Matrix out(x.rows, w.cols);
    matmul_into(x, w, out);
    return out;
}

Matrix col_slice(const Matrix& m, int c0, int c1) {
    Matrix out(m.rows, c1 - c0);
    for (int i = 0; i < m.rows; ++i)
        std::memcpy(out.row(i), m.row(i) + c0, sizeof(float) * (c1 - c0));
    return out;
}

Matrix row_slice(const Matrix& m, int r0, int r1) {
    Matrix out(r1 - r0, m.cols);
    std::memcpy(out.data.data(), m.row(r0), sizeof(float) * out.data.size());
    return out;
}

bool head_is_off(const Overlay* ov, int layer, int n_heads, int head) {
    if (!ov || ov->head_off.empty()) return false;
    return ov->head_off[static_cast<size_t>(layer) * n_heads + head] != 0;
}

Matrix init_matrix(int rows, int cols, float bound, Rng& rng) {
    Matrix m(rows, cols);
    for (float& v : m.data) v = rng.uniform_float(-bound, bound);
    return m;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_head < 1 || d_glu < 1 ||
        vocab_size < 1 || max_seq_len < 1) {
        throw VsError(ErrorKind::Config, "ModelConfig: all counts must be >= 1");
    }
    if (n_heads * d_head != d_model) {
        throw VsError(ErrorKind::Config, "ModelConfig: n_heads * d_head != d_model");
    }
}

bool Overlay::empty() const {
    if (scale == 1.0f) return true;
    for (uint8_t f : head_off)
        if (f) return false;
    for (const auto& rows : glu_off)
        if (!rows.empty()) return false;
    return true;
}

Weights Weights::init_random(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Weights w;
    w.cfg = cfg;
    const float demb = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
    w.embedding = init_matrix(cfg.vocab_size, cfg.d_model, demb, rng);
    w.pos = init_matrix(cfg.max_seq_len, cfg.d_model, demb, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        const float din = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
        lw.wq = init_matrix(cfg.d_model, cfg.d_model, din, rng);
        lw.wk = init_matrix(cfg.d_model, cfg.d_model, din, rng);
        lw.wv = init_matrix(cfg.d_model, cfg.d_model, din, rng);
        lw.wo = init_matrix(cfg.d_model, cfg.d_model, din, rng);
        lw.w_gate = init_matrix(cfg.d_model, cfg.d_glu, din, rng);
        lw.w_up = init_matrix(cfg.d_model, cfg.d_glu, din, rng);
        lw.w_out = init_matrix(cfg.d_glu, cfg.d_model,
                               1.0f / std::sqrt(static_cast<float>(cfg.d_glu)), rng);
        lw.attn_norm = Matrix(1, cfg.d_model);
        lw.glu_norm = Matrix(1, cfg.d_model);
        std::fill(lw.attn_norm.data.begin(), lw.attn_norm.data.end(), 1.0f);
        std::fill(lw.glu_norm.data.begin(), lw.glu_norm.data.end(), 1.0f);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Matrix(1, cfg.d_model);
    std::fill(w.final_norm.data.begin(), w.final_norm.data.end(), 1.0f);
    return w;
}

Weights Weights::zeros_like() const {
    Weights z = *this;
    visit_tensors(z, [](const std::string&, Matrix& m) {
        std::fill(m.data.begin(), m.data.end(), 0.0f);
    });
    return z;
}

Vector Weights::glu_gate_vec(int layer, int row) const {
    return layers[layer].w_gate.col_vec(row);
}

Vector Weights::glu_up_vec(int layer, int row) const {
    return layers[layer].w_up.col_vec(row);
}

Vector Weights::glu_out_vec(int layer, int row) const {
    return layers[layer].w_out.row_vec(row);
}

void Weights::check_head(const HeadId& h) const {
    if (h.layer < 0 || h.layer >= cfg.n_layers || h.head < 0 || h.head >= cfg.n_heads) {
        throw VsError(ErrorKind::Argument, "invalid head " + h.str());
    }
}

Matrix forward(const Weights& w, const std::vector<int>& tokens, const FwdOptions& opts) {
    const ModelConfig& cfg = w.cfg;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int H = cfg.n_heads;
    if (T > cfg.max_seq_len) {
        throw VsError(ErrorKind::Data, "forward: sequence longer than max_seq_len");
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw VsError(ErrorKind::Data, "forward: token id outside vocabulary");
        }
    }
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Vector steer_unit;
    if (opts.steer && opts.steer->alpha != 0.0f) {
        steer_unit = opts.steer->direction;
        float n = norm2(steer_unit.data(), static_cast<int>(steer_unit.size()));
        if (n == 0.0f) throw VsError(ErrorKind::Numerical, "steering: zero direction");
        for (float& v : steer_unit) v /= n;
    }

    if (opts.trace) {
        opts.trace->tokens = tokens;
        opts.trace->has_hidden = opts.cap_hidden;
        opts.trace->has_attn = opts.cap_attn;
        opts.trace->has_glu = opts.cap_glu;
        opts.trace->hidden.clear();
        opts.trace->attn.clear();
        opts.trace->glu_m.clear();
    }
    if (opts.tape) {
        opts.tape->tokens = tokens;
        opts.tape->layers.assign(cfg.n_layers, LayerTape{});
    }

    auto overlay_on = [&](int t) {
        if (!opts.overlay) return false;
        if (!opts.overlay_active) return true;
        return (*opts.overlay_active)[t] != 0;
    };
    auto steer_on = [&](int t) {
        if (!opts.steer || opts.steer->alpha == 0.0f) return false;
        if (!opts.steer_active) return true;
        return (*opts.steer_active)[t] != 0;
    };

    Matrix x(T, d);
    for (int t = 0; t < T; ++t) {
        const float* e = w.embedding.row(tokens[t]);
        const float* p = w.pos.row(t);
        float* xr = x.row(t);
        for (int i = 0; i < d; ++i) xr[i] = e[i] + p[i];
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        LayerTape* tape = opts.tape ? &opts.tape->layers[l] : nullptr;
        if (tape) tape->resid_in = x;

        Matrix normed(T, d);
        Vector inv_rms(T);
        for (int t = 0; t < T; ++t)
            inv_rms[t] = rmsnorm_row(normed.row(t), x.row(t), lw.attn_norm.row(0), d);
        Matrix q = apply_linear(normed, lw.wq);
        Matrix k = apply_linear(normed, lw.wk);
        Matrix v = apply_linear(normed, lw.wv);

        Matrix mix(T, d);
        std::vector<Matrix>* probs_sink = nullptr;
        std::vector<Matrix> probs_local;
        if (tape) {
            tape->probs.assign(H, Matrix(T, T));
            probs_sink = &tape->probs;
        } else if (opts.trace && opts.cap_attn) {
            probs_local.assign(H, Matrix(T, T));
            probs_sink = &probs_local;
        }

        Vector scores(T);
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            const bool off_head = head_is_off(opts.overlay, l, H, h);
            for (int t = 0; t < T; ++t) {
                for (int s = 0; s <= t; ++s)
                    scores[s] = dot(q.row(t) + off, k.row(s) + off, dh) * att_scale;
                softmax_inplace(scores.data(), t + 1);
                float* out = mix.row(t) + off;
                for (int s = 0; s <= t; ++s) axpy(out, scores[s], v.row(s) + off, dh);
                if (off_head && overlay_on(t)) {
                    for (int i = 0; i < dh; ++i) out[i] *= opts.overlay->scale;
                }
                if (probs_sink) {
                    std::memcpy((*probs_sink)[h].row(t), scores.data(),
                                sizeof(float) * (t + 1));
                }
            }
        }
        if (opts.trace && opts.cap_attn) {
            opts.trace->attn.push_back(tape ? tape->probs : std::move(probs_local));
        }
        if (tape) {
            tape->normed_attn = std::move(normed);
            tape->q = std::move(q);
            tape->k = std::move(k);
            tape->v = std::move(v);
            tape->inv_rms_attn = std::move(inv_rms);
            tape->mix = mix;
        }

        Matrix attn_out = apply_linear(mix, lw.wo);
        for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += attn_out.data[i];
        if (tape) tape->resid_mid = x;

        Matrix normed2(T, d);
        Vector inv_rms2(T);
        for (int t = 0; t < T; ++t)
            inv_rms2[t] = rmsnorm_row(normed2.row(t), x.row(t), lw.glu_norm.row(0), d);
        Matrix zg = apply_linear(normed2, lw.w_gate);
        Matrix zu = apply_linear(normed2, lw.w_up);
        Matrix m(T, cfg.d_glu);
        for (size_t i = 0; i < m.data.size(); ++i)
            m.data[i] = silu(zg.data[i]) * zu.data[i];
        if (opts.trace && opts.cap_glu) opts.trace->glu_m.push_back(m);

        const std::vector<int>* glu_rows = nullptr;
        if (opts.overlay && l < static_cast<int>(opts.overlay->glu_off.size()) &&
            !opts.overlay->glu_off[l].empty()) {
            glu_rows = &opts.overlay->glu_off[l];
        }
        if (!glu_rows) {
            Matrix glu_out = apply_linear(m, lw.w_out);
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += glu_out.data[i];
        } else {
            Vector m_eff(cfg.d_glu);
            for (int t = 0; t < T; ++t) {
                const float* mrow = m.row(t);
                if (overlay_on(t)) {
                    std::memcpy(m_eff.data(), mrow, sizeof(float) * cfg.d_glu);
                    for (int r : *glu_rows) m_eff[r] *= opts.overlay->scale;
                    mrow = m_eff.data();
                }
                float* xr = x.row(t);
                Vector out(d, 0.0f);
                for (int j = 0; j < cfg.d_glu; ++j)
                    axpy(out.data(), mrow[j], lw.w_out.row(j), d);
                for (int i = 0; i < d; ++i) xr[i] += out[i];
            }
        }
        if (tape) {
            tape->normed_glu = std::move(normed2);
            tape->zg = std::move(zg);
            tape->zu = std::move(zu);
            tape->m = std::move(m);
            tape->inv_rms_glu = std::move(inv_rms2);
        }

        for (int t = 0; t < T; ++t) {
            if (!steer_on(t)) continue;
            if (std::find(opts.steer->layers.begin(), opts.steer->layers.end(), l) ==
                opts.steer->layers.end())
                continue;
            axpy(x.row(t), opts.steer->alpha, steer_unit.data(), d);
        }
        if (opts.trace && opts.cap_hidden) opts.trace->hidden.push_back(x);
    }

    Matrix y(T, d);
    Vector inv_rms_f(T);
    for (int t = 0; t < T; ++t)
        inv_rms_f[t] = rmsnorm_row(y.row(t), x.row(t), w.final_norm.row(0), d);
    if (opts.tape) {
        opts.tape->final_in = x;
        opts.tape->final_normed = y;
        opts.tape->inv_rms_final = std::move(inv_rms_f);
    }

    // Tied unembedding as y @ E^T via the tiled kernel; Decoder::push uses
    // the same kernel so incremental decoding stays bit-identical.
    Matrix logits(T, cfg.vocab_size);
    matmul_into(y, transpose(w.embedding), logits);
    return logits;
}

std::pair<Matrix, Matrix> attention_head_forward(const Weights& w,
                                                 const Matrix& layer_input, HeadId head) {
    w.check_head(head);
    const ModelConfig& cfg = w.cfg;
    const int T = layer_input.rows;
    const int dh = cfg.d_head;
    const int off = head.head * dh;
    if (T > cfg.max_seq_len) {
        throw VsError(ErrorKind::Data, "attention_head_forward: sequence too long");
    }
    const LayerWeights& lw = w.layers[head.layer];
    Matrix q = apply_linear(layer_input, lw.wq);
    Matrix k = apply_linear(layer_input, lw.wk);
    Matrix v = apply_linear(layer_input, lw.wv);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Matrix pattern(T, T);
    Matrix mix(T, cfg.d_model);
    Vector scores(T);
    for (int t = 0; t < T; ++t) {
        for (int s = 0; s <= t; ++s)
            scores[s] = dot(q.row(t) + off, k.row(s) + off, dh) * scale;
        softmax_inplace(scores.data(), t + 1);
        std::memcpy(pattern.row(t), scores.data(), sizeof(float) * (t + 1));
        for (int s = 0; s <= t; ++s)
            axpy(mix.row(t) + off, scores[s], v.row(s) + off, dh);
    }
    Matrix out = apply_linear(mix, lw.wo);
    return {out, pattern};
}

std::pair<Vector, Vector> glu_forward(const Weights& w, int layer, const Vector& x) {
    const ModelConfig& cfg = w.cfg;
    if (static_cast<int>(x.size()) != cfg.d_model) {
        throw VsError(ErrorKind::Shape, "glu_forward: input dim != d_model");
    }
    const LayerWeights& lw = w.layers[layer];
    Vector zg(cfg.d_glu), zu(cfg.d_glu), m(cfg.d_glu), out(cfg.d_model, 0.0f);
    apply_linear_row(zg.data(), x.data(), lw.w_gate);
    apply_linear_row(zu.data(), x.data(), lw.w_up);
    for (int j = 0; j < cfg.d_glu; ++j) {
        m[j] = silu(zg[j]) * zu[j];
        axpy(out.data(), m[j], lw.w_out.row(j), cfg.d_model);
    }
    return {out, m};
}

Matrix ov_circuit(const Weights& w, HeadId head) {
    w.check_head(head);
    const LayerWeights& lw = w.layers[head.layer];
    const int dh = w.cfg.d_head;
    Matrix wv_h = col_slice(lw.wv, head.head * dh, (head.head + 1) * dh);
    Matrix wo_h = row_slice(lw.wo, head.head * dh, (head.head + 1) * dh);
    return transpose(matmul(wv_h, wo_h));
}

Matrix qk_circuit(const Weights& w, HeadId head) {
    w.check_head(head);
    const LayerWeights& lw = w.layers[head.layer];
    const int dh = w.cfg.d_head;
    Matrix wq_h = col_slice(lw.wq, head.head * dh, (head.head + 1) * dh);
    Matrix wk_h = col_slice(lw.wk, head.head * dh, (head.head + 1) * dh);
    return matmul(wq_h, transpose(wk_h));
}

Decoder::Decoder(const Weights& w, const Overlay* overlay, const Steering* steer)
    : w_(w), overlay_(overlay), steer_(steer), embedding_t_(transpose(w.embedding)) {
    const ModelConfig& cfg = w.cfg;
    k_cache_.assign(cfg.n_layers, Matrix(cfg.max_seq_len, cfg.d_model));
    v_cache_.assign(cfg.n_layers, Matrix(cfg.max_seq_len, cfg.d_model));
    logits_.assign(cfg.vocab_size, 0.0f);
    if (steer_ && steer_->alpha != 0.0f) {
        steer_unit_ = steer_->direction;
        float n = norm2(steer_unit_.data(), static_cast<int>(steer_unit_.size()));
        if (n == 0.0f) throw VsError(ErrorKind::Numerical, "steering: zero direction");
        for (float& v : steer_unit_) v /= n;
    }
}

void Decoder::push(int token, bool overlay_active, bool steer_active) {
    const ModelConfig& cfg = w_.cfg;
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int H = cfg.n_heads;
    const int t = len_;
    if (t >= cfg.max_seq_len) {
        throw VsError(ErrorKind::Data, "decode: context overflow");
    }
    if (token < 0 || token >= cfg.vocab_size) {
        throw VsError(ErrorKind::Data, "decode: token id outside vocabulary");
    }
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    Vector x(d);
    {
        const float* e = w_.embedding.row(token);
        const float* p = w_.pos.row(t);
        for (int i = 0; i < d; ++i) x[i] = e[i] + p[i];
    }
    Vector normed(d), q(d), mix(d), scores(t + 1), tmp(std::max(d, cfg.d_glu));
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w_.layers[l];
        rmsnorm_row(normed.data(), x.data(), lw.attn_norm.row(0), d);
        apply_linear_row(q.data(), normed.data(), lw.wq);
        apply_linear_row(k_cache_[l].row(t), normed.data(), lw.wk);
        apply_linear_row(v_cache_[l].row(t), normed.data(), lw.wv);

        std::fill(mix.begin(), mix.end(), 0.0f);
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int s = 0; s <= t; ++s)
                scores[s] = dot(q.data() + off, k_cache_[l].row(s) + off, dh) * att_scale;
            softmax_inplace(scores.data(), t + 1);
            float* out = mix.data() + off;
            for (int s = 0; s <= t; ++s)
                axpy(out, scores[s], v_cache_[l].row(s) + off, dh);
            if (overlay_active && head_is_off(overlay_, l, H, h)) {
                for (int i = 0; i < dh; ++i) out[i] *= overlay_->scale;
            }
        }
        apply_linear_row(tmp.data(), mix.data(), lw.wo);
        for (int i = 0; i < d; ++i) x[i] += tmp[i];

        rmsnorm_row(normed.data(), x.data(), lw.glu_norm.row(0), d);
        Vector zg(cfg.d_glu), zu(cfg.d_glu);
        apply_linear_row(zg.data(), normed.data(), lw.w_gate);
        apply_linear_row(zu.data(), normed.data(), lw.w_up);
        for (int j = 0; j < cfg.d_glu; ++j) zg[j] = silu(zg[j]) * zu[j];
        if (overlay_active && overlay_ && l < static_cast<int>(overlay_->glu_off.size())) {
            for (int r : overlay_->glu_off[l]) zg[r] *= overlay_->scale;
        }
        Vector out(d, 0.0f);
        for (int j = 0; j < cfg.d_glu; ++j) axpy(out.data(), zg[j], lw.w_out.row(j), d);
        for (int i = 0; i < d; ++i) x[i] += out[i];

        if (steer_active && steer_ && steer_->alpha != 0.0f &&
            std::find(steer_->layers.begin(), steer_->layers.end(), l) !=
                steer_->layers.end()) {
            axpy(x.data(), steer_->alpha, steer_unit_.data(), d);
        }
    }
    Matrix y1(1, d);
    rmsnorm_row(y1.row(0), x.data(), w_.final_norm.row(0), d);
    Matrix out1(1, cfg.vocab_size);
    matmul_into(y1, embedding_t_, out1);
    std::copy(out1.row(0), out1.row(0) + cfg.vocab_size, logits_.begin());
    ++len_;
}

int Decoder::argmax() const {
    int best = 0;
    for (int i = 1; i < static_cast<int>(logits_.size()); ++i)
        if (logits_[i] > logits_[best]) best = i;
    return best;
}

std::vector<int> generate(const Weights& w, const std::vector<int>& prompt, int max_new,
                          const GenOptions& opts) {
    if (static_cast<int>(prompt.size()) + max_new > w.cfg.max_seq_len) {
        throw VsError(ErrorKind::Data, "generate: prompt + max_new exceeds context");
    }
    Decoder dec(w, opts.overlay, opts.steer);
    std::vector<int> ctx;
    ctx.reserve(prompt.size() + max_new);
    for (int tok : prompt) {
        ctx.push_back(tok);
        bool ov = opts.overlay && (!opts.overlay_gate || opts.overlay_gate(ctx));
        dec.push(tok, ov, false);
    }
    for (int i = 0; i < max_new; ++i) {
        int next = dec.argmax();
        ctx.push_back(next);
        if (next == opts.eot_token) break;
        if (i + 1 == max_new) break;
        bool ov = opts.overlay && (!opts.overlay_gate || opts.overlay_gate(ctx));
        dec.push(next, ov, true);
    }
    return ctx;
}

void visit_tensors(Weights& w,
                   const std::function<void(const std::string&, Matrix&)>& fn) {
    fn("embedding", w.embedding);
    fn("pos", w.pos);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "wq", w.layers[l].wq);
        fn(p + "wk", w.layers[l].wk);
        fn(p + "wv", w.layers[l].wv);
        fn(p + "wo", w.layers[l].wo);
        fn(p + "w_gate", w.layers[l].w_gate);
        fn(p + "w_up", w.layers[l].w_up);
        fn(p + "w_out", w.layers[l].w_out);
        fn(p + "attn_norm", w.layers[l].attn_norm);
        fn(p + "glu_norm", w.layers[l].glu_norm);
    }
    fn("final_norm", w.final_norm);
}

void visit_tensors(const Weights& w,
                   const std::function<void(const std::string&, const Matrix&)>& fn) {
    visit_tensors(const_cast<Weights&>(w),
                  [&fn](const std::string& n, Matrix& m) { fn(n, m); });
}

void save_weights(const Weights& w, const std::string& path,
                  const std::string& config_digest) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw VsError(ErrorKind::Io, "save_weights: cannot open " + path);
    nlohmann::json cfg = {{"n_layers", w.cfg.n_layers},   {"d_model", w.cfg.d_model},
                          {"n_heads", w.cfg.n_heads},     {"d_head", w.cfg.d_head},
                          {"d_glu", w.cfg.d_glu},         {"vocab_size", w.cfg.vocab_size},
                          {"max_seq_len", w.cfg.max_seq_len}};
    out << "VSCOPE1\n";
    out << "endian little\n";
    out << "config " << cfg.dump() << "\n";
    if (!config_digest.empty()) out << "digest " << config_digest << "\n";
    size_t offset = 0;
    visit_tensors(w, [&](const std::string& name, const Matrix& m) {
        out << "tensor " << name << " " << m.rows << " " << m.cols << " f32 " << offset
            << "\n";
        offset += m.data.size() * sizeof(float);
    });
    out << "blob " << offset << "\n";
    visit_tensors(w, [&](const std::string&, const Matrix& m) {
        out.write(reinterpret_cast<const char*>(m.data.data()),
                  static_cast<std::streamsize>(m.data.size() * sizeof(float)));
    });
    if (!out) throw VsError(ErrorKind::Io, "save_weights: write failed for " + path);
}

Weights load_weights(const std::string& path, std::string* config_digest) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VsError(ErrorKind::Dependency, "load_weights: missing " + path);
    std::string line;
    if (!std::getline(in, line) || line != "VSCOPE1") {
        throw VsError(ErrorKind::Io, "load_weights: bad magic in " + path);
    }
    if (!std::getline(in, line) || line != "endian little") {
        throw VsError(ErrorKind::Io, "load_weights: unsupported endianness marker");
    }
    if (!std::getline(in, line) || line.rfind("config ", 0) != 0) {
        throw VsError(ErrorKind::Io, "load_weights: missing config line");
    }
    nlohmann::json cfg = nlohmann::json::parse(line.substr(7));
    ModelConfig mc;
    mc.n_layers = cfg.at("n_layers");
    mc.d_model = cfg.at("d_model");
    mc.n_heads = cfg.at("n_heads");
    mc.d_head = cfg.at("d_head");
    mc.d_glu = cfg.at("d_glu");
    mc.vocab_size = cfg.at("vocab_size");
    mc.max_seq_len = cfg.at("max_seq_len");
    mc.validate();

    struct Entry {
        std::string name;
        int rows, cols;
        size_t offset;
    };
    std::vector<Entry> entries;
    size_t blob_size = 0;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string kind;
        ss >> kind;
        if (kind == "digest") {
            std::string dg;
            ss >> dg;
            if (config_digest) *config_digest = dg;
        } else if (kind == "tensor") {
            Entry e;
            std::string dtype;
            ss >> e.name >> e.rows >> e.cols >> dtype >> e.offset;
            if (!ss || dtype != "f32") {
                throw VsError(ErrorKind::Io, "load_weights: bad tensor line: " + line);
            }
            entries.push_back(e);
        } else if (kind == "blob") {
            ss >> blob_size;
            break;
        } else {
            throw VsError(ErrorKind::Io, "load_weights: unknown manifest line: " + line);
        }
    }
    std::vector<char> blob(blob_size);
    in.read(blob.data(), static_cast<std::streamsize>(blob_size));
    if (static_cast<size_t>(in.gcount()) != blob_size) {
        throw VsError(ErrorKind::Io, "load_weights: truncated blob in " + path);
    }

    Rng dummy(0);
    Weights w = Weights::init_random(mc, dummy);
    size_t idx = 0;
    visit_tensors(w, [&](const std::string& name, Matrix& m) {
        if (idx >= entries.size()) {
            throw VsError(ErrorKind::Io, "load_weights: manifest missing tensor " + name);
        }
        const Entry& e = entries[idx++];
        if (e.name != name || e.rows != m.rows || e.cols != m.cols) {
            throw VsError(ErrorKind::Io, "load_weights: shape/manifest mismatch for tensor " +
                                             name + " (manifest has " + e.name + " " +
                                             std::to_string(e.rows) + "x" +
                                             std::to_string(e.cols) + ")");
        }
        if (e.offset + m.data.size() * sizeof(float) > blob_size) {
            throw VsError(ErrorKind::Io, "load_weights: tensor " + name + " overruns blob");
        }
        std::memcpy(m.data.data(), blob.data() + e.offset, m.data.size() * sizeof(float));
    });
    return w;
}

}  // namespace verifscope
