#include "verifscope/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include <json.hpp>

namespace verifscope {

namespace {

constexpr float kNormEps = 1e-6f;

// Classical (heavy-ball) momentum for the SGD update. A fixed constant, not
// a per-parameter adaptive rate.
constexpr float kMomentum = 0.9f;

// dX += dOut @ W^T via the tiled kernel.
void linear_bwd_input(Matrix& dx, const Matrix& dout, const Matrix& w) {
    matmul_into(dout, transpose(w), dx);
}

// dW += X^T @ dOut via the tiled kernel; per element the sum over timesteps
// runs in ascending order, so the result is deterministic.
void linear_bwd_weight(Matrix& dw, const Matrix& x, const Matrix& dout) {
    matmul_into(transpose(x), dout, dw);
}

// Backward of y = x * inv_rms(x) * g. Adds into dx and dg.
void rmsnorm_bwd(const float* x, const float* g, const float* dy, float inv, int d,
                 float* dx, float* dg) {
    float dot_hx = 0.0f;
    {
        // h = dy * g; two passes keep the reduction in the deterministic dot.
        thread_local std::vector<float> h;
        h.resize(d);
        for (int i = 0; i < d; ++i) h[i] = dy[i] * g[i];
        dot_hx = dot(h.data(), x, d);
        const float c = inv * inv * inv * dot_hx / static_cast<float>(d);
        for (int i = 0; i < d; ++i) {
            dx[i] += h[i] * inv - c * x[i];
            dg[i] += dy[i] * x[i] * inv;
        }
    }
}

int first_masked(int loss_start) { return std::max(loss_start - 1, 0); }

}  // namespace

LossStats next_token_loss(const Weights& w, const std::vector<int>& tokens,
                          int loss_start, Weights* grads) {
    const ModelConfig& cfg = w.cfg;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int H = cfg.n_heads;
    if (T < 2) throw VsError(ErrorKind::Data, "next_token_loss: need >= 2 tokens");
    const int p0 = first_masked(loss_start);
    if (p0 > T - 2) throw VsError(ErrorKind::Data, "next_token_loss: empty loss mask");
    const int n_mask = T - 1 - p0;

    Tape tape;
    FwdOptions opts;
    opts.tape = &tape;
    Matrix logits = forward(w, tokens, opts);

    LossStats stats;
    stats.positions = n_mask;
    Matrix dlogits(T, cfg.vocab_size);
    double loss = 0.0;
    for (int p = p0; p <= T - 2; ++p) {
        float* lr = logits.row(p);
        int target = tokens[p + 1];
        int best = 0;
        float mx = lr[0];
        for (int v = 1; v < cfg.vocab_size; ++v) {
            if (lr[v] > mx) {
                mx = lr[v];
                best = v;
            }
        }
        if (best == target) ++stats.correct;
        double z = 0.0;
        for (int v = 0; v < cfg.vocab_size; ++v) z += std::exp(static_cast<double>(lr[v] - mx));
        double logz = std::log(z) + mx;
        loss += logz - lr[target];
        if (grads) {
            float* dlr = dlogits.row(p);
            const float invn = 1.0f / static_cast<float>(n_mask);
            for (int v = 0; v < cfg.vocab_size; ++v) {
                dlr[v] = static_cast<float>(std::exp(static_cast<double>(lr[v]) - logz)) *
                         invn;
            }
            dlr[target] -= invn;
        }
    }
    stats.loss = loss / n_mask;
    if (!grads) return stats;

    // --- backward ---
    // Unembedding (tied): logits = y @ E^T, so dy = dlogits @ E and
    // dE += dlogits^T @ y; rows outside the loss mask hold zeros.
    Matrix dy = matmul(dlogits, w.embedding);
    {
        Matrix de = matmul(transpose(dlogits), tape.final_normed);
        for (size_t j = 0; j < de.data.size(); ++j)
            grads->embedding.data[j] += de.data[j];
    }

    Matrix dx(T, d);
    for (int t = 0; t < T; ++t) {
        rmsnorm_bwd(tape.final_in.row(t), w.final_norm.row(0), dy.row(t),
                    tape.inv_rms_final[t], d, dx.row(t), grads->final_norm.row(0));
    }

    Vector dblk(dh);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[l];
        LayerWeights& gl = grads->layers[l];
        const LayerTape& tp = tape.layers[l];

        // GLU block: x_out = resid_mid + m @ w_out.
        Matrix dm(T, cfg.d_glu);
        linear_bwd_input(dm, dx, lw.w_out);
        linear_bwd_weight(gl.w_out, tp.m, dx);
        Matrix dzg(T, cfg.d_glu), dzu(T, cfg.d_glu);
        for (size_t i = 0; i < dm.data.size(); ++i) {
            dzg.data[i] = dm.data[i] * tp.zu.data[i] * silu_grad(tp.zg.data[i]);
            dzu.data[i] = dm.data[i] * silu(tp.zg.data[i]);
        }
        Matrix dn2(T, d);
        linear_bwd_input(dn2, dzg, lw.w_gate);
        linear_bwd_input(dn2, dzu, lw.w_up);
        linear_bwd_weight(gl.w_gate, tp.normed_glu, dzg);
        linear_bwd_weight(gl.w_up, tp.normed_glu, dzu);
        for (int t = 0; t < T; ++t) {
            rmsnorm_bwd(tp.resid_mid.row(t), lw.glu_norm.row(0), dn2.row(t),
                        tp.inv_rms_glu[t], d, dx.row(t), gl.glu_norm.row(0));
        }

        // Attention: resid_mid = resid_in + mix @ wo.
        Matrix dmix(T, d);
        linear_bwd_input(dmix, dx, lw.wo);
        linear_bwd_weight(gl.wo, tp.mix, dx);
        Matrix dq(T, d), dk(T, d), dv(T, d);
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        Vector da(T), ds(T);
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            const Matrix& A = tp.probs[h];
            for (int t = 0; t < T; ++t) {
                const float* dmr = dmix.row(t) + off;
                const float* ar = A.row(t);
                for (int s = 0; s <= t; ++s) {
                    da[s] = dot(dmr, tp.v.row(s) + off, dh);
                    axpy(dv.row(s) + off, ar[s], dmr, dh);
                }
                float sum = 0.0f;
                for (int s = 0; s <= t; ++s) sum += ar[s] * da[s];
                for (int s = 0; s <= t; ++s) ds[s] = ar[s] * (da[s] - sum) * scale;
                float* dqr = dq.row(t) + off;
                for (int s = 0; s <= t; ++s) {
                    axpy(dqr, ds[s], tp.k.row(s) + off, dh);
                    axpy(dk.row(s) + off, ds[s], tp.q.row(t) + off, dh);
                }
            }
        }
        Matrix dn1(T, d);
        linear_bwd_input(dn1, dq, lw.wq);
        linear_bwd_input(dn1, dk, lw.wk);
        linear_bwd_input(dn1, dv, lw.wv);
        linear_bwd_weight(gl.wq, tp.normed_attn, dq);
        linear_bwd_weight(gl.wk, tp.normed_attn, dk);
        linear_bwd_weight(gl.wv, tp.normed_attn, dv);
        for (int t = 0; t < T; ++t) {
            rmsnorm_bwd(tp.resid_in.row(t), lw.attn_norm.row(0), dn1.row(t),
                        tp.inv_rms_attn[t], d, dx.row(t), gl.attn_norm.row(0));
        }
    }

    for (int t = 0; t < T; ++t) {
        axpy(grads->embedding.row(tokens[t]), 1.0f, dx.row(t), d);
        axpy(grads->pos.row(t), 1.0f, dx.row(t), d);
    }
    return stats;
}

double reference_loss_f64(const Weights& w, const std::vector<int>& tokens,
                          int loss_start) {
    const ModelConfig& cfg = w.cfg;
    const int T = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int dh = cfg.d_head;
    const int H = cfg.n_heads;
    const int p0 = first_masked(loss_start);

    auto lin = [](const std::vector<std::vector<double>>& x, const Matrix& w_) {
        std::vector<std::vector<double>> out(x.size(),
                                             std::vector<double>(w_.cols, 0.0));
        for (size_t t = 0; t < x.size(); ++t)
            for (int k = 0; k < w_.rows; ++k)
                for (int c = 0; c < w_.cols; ++c)
                    out[t][c] += x[t][k] * static_cast<double>(w_.at(k, c));
        return out;
    };
    auto rms = [&](const std::vector<double>& x, const Matrix& g) {
        double ms = 0.0;
        for (double v : x) ms += v * v;
        double inv = 1.0 / std::sqrt(ms / x.size() + static_cast<double>(kNormEps));
        std::vector<double> y(x.size());
        for (size_t i = 0; i < x.size(); ++i)
            y[i] = x[i] * inv * static_cast<double>(g.at(0, static_cast<int>(i)));
        return y;
    };

    std::vector<std::vector<double>> x(T, std::vector<double>(d));
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < d; ++i)
            x[t][i] = static_cast<double>(w.embedding.at(tokens[t], i)) +
                      static_cast<double>(w.pos.at(t, i));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        std::vector<std::vector<double>> n1(T);
        for (int t = 0; t < T; ++t) n1[t] = rms(x[t], lw.attn_norm);
        auto q = lin(n1, lw.wq), k = lin(n1, lw.wk), v = lin(n1, lw.wv);
        std::vector<std::vector<double>> mix(T, std::vector<double>(d, 0.0));
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int t = 0; t < T; ++t) {
                std::vector<double> sc(t + 1);
                double mx = -1e300;
                for (int s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    for (int i = 0; i < dh; ++i) acc += q[t][off + i] * k[s][off + i];
                    sc[s] = acc * scale;
                    mx = std::max(mx, sc[s]);
                }
                double z = 0.0;
                for (int s = 0; s <= t; ++s) z += std::exp(sc[s] - mx);
                for (int s = 0; s <= t; ++s) {
                    double a = std::exp(sc[s] - mx) / z;
                    for (int i = 0; i < dh; ++i) mix[t][off + i] += a * v[s][off + i];
                }
            }
        }
        auto attn_out = lin(mix, lw.wo);
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < d; ++i) x[t][i] += attn_out[t][i];

        std::vector<std::vector<double>> n2(T);
        for (int t = 0; t < T; ++t) n2[t] = rms(x[t], lw.glu_norm);
        auto zg = lin(n2, lw.w_gate), zu = lin(n2, lw.w_up);
        std::vector<std::vector<double>> m(T, std::vector<double>(cfg.d_glu));
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < cfg.d_glu; ++j)
                m[t][j] = zg[t][j] / (1.0 + std::exp(-zg[t][j])) * zu[t][j];
        auto glu_out = lin(m, lw.w_out);
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < d; ++i) x[t][i] += glu_out[t][i];
    }

    double loss = 0.0;
    const int n_mask = T - 1 - p0;
    for (int p = p0; p <= T - 2; ++p) {
        std::vector<double> y = rms(x[p], w.final_norm);
        double mx = -1e300;
        std::vector<double> lg(cfg.vocab_size);
        for (int vt = 0; vt < cfg.vocab_size; ++vt) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i)
                acc += y[i] * static_cast<double>(w.embedding.at(vt, i));
            lg[vt] = acc;
            mx = std::max(mx, acc);
        }
        double z = 0.0;
        for (int vt = 0; vt < cfg.vocab_size; ++vt) z += std::exp(lg[vt] - mx);
        loss += std::log(z) + mx - lg[tokens[p + 1]];
    }
    return loss / n_mask;
}

GradCheckReport grad_check(const Weights& w, const std::vector<int>& tokens,
                           int loss_start, int coords_per_tensor, float eps, Rng& rng) {
    Weights grads = w.zeros_like();
    next_token_loss(w, tokens, loss_start, &grads);

    GradCheckReport rep;
    Weights pert = w;
    visit_tensors(pert, [&](const std::string& name, Matrix& m) {
        Matrix& g = [&]() -> Matrix& {
            Matrix* out = nullptr;
            visit_tensors(grads, [&](const std::string& n2, Matrix& m2) {
                if (n2 == name) out = &m2;
            });
            return *out;
        }();
        for (int c = 0; c < coords_per_tensor; ++c) {
            size_t idx = static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(m.data.size()) - 1));
            float saved = m.data[idx];
            m.data[idx] = saved + eps;
            double fp = reference_loss_f64(pert, tokens, loss_start);
            m.data[idx] = saved - eps;
            double fm = reference_loss_f64(pert, tokens, loss_start);
            m.data[idx] = saved;
            double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
            double analytic = static_cast<double>(g.data[idx]);
            double rel = std::abs(numeric - analytic) /
                         std::max(1.0, std::abs(numeric) + std::abs(analytic));
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_tensor = name;
            }
            ++rep.coords_checked;
        }
    });
    return rep;
}

TokenizedSample tokenize_record(const CorpusRecord& rec) {
    const Tokenizer& tok = tokenizer();
    TokenizedSample s;
    std::vector<int> prompt_ids = tok.encode(rec.prompt);
    s.tokens = tok.encode(rec.prompt + rec.completion);
    s.prompt_len = static_cast<int>(prompt_ids.size());
    if (s.prompt_len > static_cast<int>(s.tokens.size()) ||
        !std::equal(prompt_ids.begin(), prompt_ids.end(), s.tokens.begin())) {
        throw VsError(ErrorKind::Data, "tokenize_record: prompt is not a token prefix");
    }
    Transcript t = parse_transcript(s.tokens);
    for (const Attempt& a : t.attempts)
        if (a.marker_pos >= 0) s.marker_positions.push_back(a.marker_pos);
    return s;
}

EvalStats evaluate(const Weights& w, const std::vector<TokenizedSample>& samples) {
    struct Per {
        double loss = 0.0;
        int positions = 0, correct = 0, markers = 0, markers_ok = 0;
    };
    std::vector<Per> per(samples.size());
    parallel_for(static_cast<int>(samples.size()), [&](int i) {
        const TokenizedSample& s = samples[i];
        Matrix logits = forward(w, s.tokens);
        const int T = static_cast<int>(s.tokens.size());
        const int p0 = std::max(s.prompt_len - 1, 0);
        double loss = 0.0;
        for (int p = p0; p <= T - 2; ++p) {
            const float* lr = logits.row(p);
            int best = 0;
            float mx = lr[0];
            for (int v = 1; v < logits.cols; ++v)
                if (lr[v] > mx) mx = lr[v], best = v;
            double z = 0.0;
            for (int v = 0; v < logits.cols; ++v)
                z += std::exp(static_cast<double>(lr[v] - mx));
            loss += std::log(z) + mx - lr[s.tokens[p + 1]];
            ++per[i].positions;
            if (best == s.tokens[p + 1]) ++per[i].correct;
        }
        per[i].loss = loss;
        for (int mp : s.marker_positions) {
            if (mp + 1 >= T) continue;
            const float* lr = logits.row(mp);
            int best = 0;
            float mx = lr[0];
            for (int v = 1; v < logits.cols; ++v)
                if (lr[v] > mx) mx = lr[v], best = v;
            ++per[i].markers;
            if (best == s.tokens[mp + 1]) ++per[i].markers_ok;
        }
    });
    EvalStats st;
    st.samples = static_cast<int>(samples.size());
    long positions = 0, correct = 0, markers = 0, markers_ok = 0;
    double loss = 0.0;
    for (const Per& p : per) {
        loss += p.loss;
        positions += p.positions;
        correct += p.correct;
        markers += p.markers;
        markers_ok += p.markers_ok;
    }
    st.loss = positions ? loss / positions : 0.0;
    st.token_accuracy = positions ? static_cast<double>(correct) / positions : 0.0;
    st.marker_accuracy = markers ? static_cast<double>(markers_ok) / markers : 1.0;
    return st;
}

double marker_accuracy(const Weights& w, const std::vector<TokenizedSample>& samples) {
    return evaluate(w, samples).marker_accuracy;
}

double format_accuracy(const Weights& w, const std::vector<Instance>& instances,
                       int max_new) {
    const Tokenizer& tok = tokenizer();
    std::vector<uint8_t> ok(instances.size(), 0);
    parallel_for(static_cast<int>(instances.size()), [&](int i) {
        std::vector<int> prompt = tok.encode(render_prompt(instances[i]));
        GenOptions g;
        g.eot_token = tok.eot_id();
        std::vector<int> out = generate(w, prompt, max_new, g);
        Transcript t = parse_transcript(out);
        ok[i] = (!t.out_of_range && t.answer.has_value() && !t.attempts.empty()) ? 1 : 0;
    });
    long n_ok = 0;
    for (uint8_t v : ok) n_ok += v;
    return instances.empty() ? 0.0 : static_cast<double>(n_ok) / instances.size();
}

TrainResult train_toy_model(const ModelConfig& cfg, const std::vector<CorpusRecord>& train,
                            const std::vector<CorpusRecord>& val, const TrainConfig& tc,
                            const std::string& log_path) {
    if (train.empty() || val.empty()) {
        throw VsError(ErrorKind::Data, "train_toy_model: empty corpus");
    }
    Rng rng(tc.seed);
    Rng init_rng = rng.fork(1);
    Rng batch_rng = rng.fork(2);
    Weights w = Weights::init_random(cfg, init_rng);

    std::vector<TokenizedSample> train_tok(train.size()), val_tok;
    parallel_for(static_cast<int>(train.size()),
                 [&](int i) { train_tok[i] = tokenize_record(train[i]); });
    int n_val = std::min<int>(tc.eval_samples, static_cast<int>(val.size()));
    val_tok.resize(n_val);
    parallel_for(n_val, [&](int i) { val_tok[i] = tokenize_record(val[i]); });

    std::vector<Weights> grads(tc.batch_size, w.zeros_like());
    Weights velocity = w.zeros_like();

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw VsError(ErrorKind::Io, "train_toy_model: cannot open " + log_path);
    }

    Weights best = w;
    double best_val = 1e300;
    int stale = 0, steps_run = 0;

    for (int step = 1; step <= tc.steps; ++step) {
        std::vector<int> batch(tc.batch_size);
        for (int& b : batch)
            b = static_cast<int>(
                batch_rng.uniform_int(0, static_cast<int64_t>(train.size()) - 1));

        std::vector<double> losses(tc.batch_size, 0.0);
        parallel_for(tc.batch_size, [&](int i) {
            Weights& g = grads[i];
            visit_tensors(g, [](const std::string&, Matrix& m) {
                std::fill(m.data.begin(), m.data.end(), 0.0f);
            });
            const TokenizedSample& s = train_tok[batch[i]];
            losses[i] = next_token_loss(w, s.tokens, s.prompt_len, &g).loss;
        });

        const float lr = tc.lr;
        const float inv_batch = 1.0f / tc.batch_size;

        // Gradient merge and the optimizer update are elementwise, so thread
        // count cannot change the result.
        std::vector<Matrix*> gmats(tc.batch_size);
        visit_tensors(w, [&](const std::string& name, Matrix& wm) {
            Matrix* vel = nullptr;
            visit_tensors(velocity, [&](const std::string& n2, Matrix& m2) {
                if (n2 == name) vel = &m2;
            });
            for (int i = 0; i < tc.batch_size; ++i) {
                visit_tensors(grads[i], [&](const std::string& n2, Matrix& m2) {
                    if (n2 == name) gmats[i] = &m2;
                });
            }
            const bool decay = name.find("norm") == std::string::npos;
            for (size_t j = 0; j < wm.data.size(); ++j) {
                float g = 0.0f;
                for (int i = 0; i < tc.batch_size; ++i) g += gmats[i]->data[j];
                float update = g * inv_batch;
                if (decay) update += tc.weight_decay * wm.data[j];
                float& v = vel->data[j];
                v = kMomentum * v + update;
                wm.data[j] -= lr * v;
            }
        });

        if (step % tc.eval_every == 0 || step == tc.steps) {
            EvalStats ev = evaluate(w, val_tok);
            double train_loss = 0.0;
            for (double l : losses) train_loss += l;
            train_loss /= tc.batch_size;
            if (log) {
                nlohmann::json j = {{"step", step},
                                    {"lr", lr},
                                    {"train_loss", train_loss},
                                    {"val_loss", ev.loss},
                                    {"val_token_acc", ev.token_accuracy},
                                    {"val_marker_acc", ev.marker_accuracy}};
                log << j.dump() << "\n";
                log.flush();
            }
            if (ev.loss < best_val - 1e-5) {
                best_val = ev.loss;
                best = w;
                stale = 0;
            } else {
                ++stale;
            }
            steps_run = step;
            if (stale >= tc.patience) break;
        }
        steps_run = step;
    }

    TrainResult res;
    res.weights = std::move(best);
    res.best_val_loss = best_val;
    res.steps_run = steps_run;
    res.final_eval = evaluate(res.weights, val_tok);
    return res;
}

}  // namespace verifscope
