#include "verifscope/lens.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "verifscope/tokenizer.hpp"

namespace verifscope {

Vector lens_logits(const Weights& w, const Vector& state) {
    const int d = w.cfg.d_model;
    if (static_cast<int>(state.size()) != d) {
        throw VsError(ErrorKind::Shape, "lens_logits: state dim != d_model");
    }
    float ms = dot(state.data(), state.data(), d) / static_cast<float>(d);
    float inv = 1.0f / std::sqrt(ms + 1e-6f);
    Vector y(d);
    for (int i = 0; i < d; ++i) y[i] = state[i] * inv * w.final_norm.at(0, i);
    Vector logits(w.cfg.vocab_size);
    for (int v = 0; v < w.cfg.vocab_size; ++v)
        logits[v] = dot(y.data(), w.embedding.row(v), d);
    return logits;
}

Vector logit_lens(const Weights& w, const ActivationTrace& trace, int layer, int t) {
    if (layer < 0 || layer >= static_cast<int>(trace.hidden.size()) ||
        trace.hidden[layer].rows == 0) {
        throw VsError(ErrorKind::Argument, "logit_lens: layer not in trace");
    }
    const Matrix& h = trace.hidden[layer];
    if (t < 0 || t >= h.rows) {
        throw VsError(ErrorKind::Argument, "logit_lens: timestep out of range");
    }
    Vector logits = lens_logits(w, h.row_vec(t));
    softmax_inplace(logits.data(), static_cast<int>(logits.size()));
    return logits;
}

std::string LensReport::to_tsv() const {
    const Tokenizer& tok = tokenizer();
    std::ostringstream out;
    out << "layer\trank\ttoken\tmean_prob\n";
    for (size_t l = 0; l < per_layer.size(); ++l) {
        for (size_t r = 0; r < per_layer[l].size(); ++r) {
            const LensEntry& e = per_layer[l][r];
            std::string piece = tok.piece(e.token);
            for (char& c : piece)
                if (c == '\n' || c == '\t') c = ' ';
            out << l << "\t" << r << "\t" << piece << "\t" << e.mean_prob << "\n";
        }
    }
    return out.str();
}

LensReport aggregate_lens(const Weights& w, const std::vector<ActivationTrace>& traces,
                          const std::vector<int>& positions, int top_k) {
    if (traces.empty() || traces.size() != positions.size()) {
        throw VsError(ErrorKind::Argument, "aggregate_lens: need one position per trace");
    }
    const int L = static_cast<int>(traces[0].hidden.size());
    const int V = w.cfg.vocab_size;
    LensReport rep;
    rep.top_k = top_k;
    rep.per_layer.resize(L);
    parallel_for(L, [&](int l) {
        std::vector<double> mean(V, 0.0);
        for (size_t i = 0; i < traces.size(); ++i) {
            Vector dist = logit_lens(w, traces[i], l, positions[i]);
            for (int v = 0; v < V; ++v) mean[v] += dist[v];
        }
        for (double& m : mean) m /= static_cast<double>(traces.size());
        std::vector<int> idx(V);
        for (int v = 0; v < V; ++v) idx[v] = v;
        std::partial_sort(idx.begin(), idx.begin() + std::min(top_k, V), idx.end(),
                          [&](int a, int b) {
                              if (mean[a] != mean[b]) return mean[a] > mean[b];
                              return a < b;
                          });
        for (int r = 0; r < std::min(top_k, V); ++r)
            rep.per_layer[l].push_back({idx[r], mean[idx[r]]});
    });
    return rep;
}

namespace {

double probe_val_loss(const Matrix& w, const Matrix& x_scaled,
                      const std::vector<int>& labels,
                      const std::vector<int>& idx, int begin, int end, double* acc) {
    double loss = 0.0;
    int correct = 0;
    const int d = x_scaled.cols;
    for (int i = begin; i < end; ++i) {
        const float* x = x_scaled.row(idx[i]);
        double z0 = dot(w.row(0), x, d);
        double z1 = dot(w.row(1), x, d);
        double mx = std::max(z0, z1);
        double lse = mx + std::log(std::exp(z0 - mx) + std::exp(z1 - mx));
        int label = labels[idx[i]];
        loss += lse - (label == 0 ? z0 : z1);
        if ((z1 > z0 ? 1 : 0) == label) ++correct;
    }
    if (acc) *acc = static_cast<double>(correct) / std::max(1, end - begin);
    return loss / std::max(1, end - begin);
}

}  // namespace

Probe train_probe(const ProbeDataset& dataset, int layer, const ProbeHyper& hyper) {
    const int n = static_cast<int>(dataset.labels.size());
    const int d = dataset.x.cols;
    if (n < 2) throw VsError(ErrorKind::Data, "train_probe: need >= 2 examples");
    bool has0 = false, has1 = false;
    for (int l : dataset.labels) {
        if (l == 0) has0 = true;
        else if (l == 1) has1 = true;
        else throw VsError(ErrorKind::Data, "train_probe: labels must be 0 or 1");
    }
    if (!has0 || !has1) {
        throw VsError(ErrorKind::Data, "train_probe: dataset has a single class");
    }

    Rng rng(hyper.seed);
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx);
    const int n_val = std::max(1, std::min(hyper.val_size, n / 4));
    const int n_train = n - n_val;
    if (n_train < 1) throw VsError(ErrorKind::Data, "train_probe: dataset too small");

    // Per-dimension scaling (fit on the training split) conditions the
    // problem so the fixed learning rate makes progress regardless of the
    // raw activation magnitudes; the scaling is folded back into the
    // returned weights so the probe applies directly to raw states.
    Vector inv_sd(d, 0.0f);
    {
        Vector mean(d, 0.0f), var(d, 0.0f);
        for (int i = 0; i < n_train; ++i) {
            const float* x = dataset.x.row(idx[i]);
            for (int j = 0; j < d; ++j) mean[j] += x[j];
        }
        for (int j = 0; j < d; ++j) mean[j] /= static_cast<float>(n_train);
        for (int i = 0; i < n_train; ++i) {
            const float* x = dataset.x.row(idx[i]);
            for (int j = 0; j < d; ++j) {
                float dlt = x[j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        for (int j = 0; j < d; ++j) {
            inv_sd[j] = 1.0f / (std::sqrt(var[j] / static_cast<float>(n_train)) + 1e-6f);
        }
    }
    Matrix x_scaled = dataset.x;
    for (int i = 0; i < n; ++i) {
        float* x = x_scaled.row(i);
        for (int j = 0; j < d; ++j) x[j] *= inv_sd[j];
    }

    Probe probe;
    probe.layer = layer;
    probe.w = Matrix(2, d);
    Matrix best = probe.w;
    double best_loss =
        probe_val_loss(probe.w, x_scaled, dataset.labels, idx, n_train, n, nullptr);
    int stale = 0;

    for (int step = 1; step <= hyper.max_steps; ++step) {
        Vector g0(d, 0.0f), g1(d, 0.0f);
        for (int b = 0; b < hyper.batch_size; ++b) {
            int i = idx[static_cast<size_t>(rng.uniform_int(0, n_train - 1))];
            const float* x = x_scaled.row(i);
            float z0 = dot(probe.w.row(0), x, d);
            float z1 = dot(probe.w.row(1), x, d);
            float mx = std::max(z0, z1);
            float e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
            float p1 = e1 / (e0 + e1);
            int label = dataset.labels[i];
            float err1 = p1 - (label == 1 ? 1.0f : 0.0f);
            axpy(g1.data(), err1, x, d);
            axpy(g0.data(), -err1, x, d);
        }
        const float scale = hyper.lr / hyper.batch_size;
        for (int j = 0; j < d; ++j) {
            probe.w.at(0, j) -=
                scale * g0[j] + hyper.lr * hyper.weight_decay * probe.w.at(0, j);
            probe.w.at(1, j) -=
                scale * g1[j] + hyper.lr * hyper.weight_decay * probe.w.at(1, j);
        }
        if (step % hyper.eval_every == 0) {
            double loss =
                probe_val_loss(probe.w, x_scaled, dataset.labels, idx, n_train, n, nullptr);
            if (loss < best_loss - 1e-7) {
                best_loss = loss;
                best = probe.w;
                stale = 0;
            } else if (++stale >= hyper.patience) {
                break;
            }
        }
    }
    probe.w = best;
    for (int j = 0; j < d; ++j) {
        probe.w.at(0, j) *= inv_sd[j];
        probe.w.at(1, j) *= inv_sd[j];
    }
    for (float v : probe.w.data) {
        if (!std::isfinite(v)) {
            throw VsError(ErrorKind::Numerical, "train_probe: non-finite weights");
        }
    }
    return probe;
}

double eval_probe(const Probe& probe, const ProbeDataset& dataset) {
    const int n = static_cast<int>(dataset.labels.size());
    if (n == 0) throw VsError(ErrorKind::Argument, "eval_probe: empty dataset");
    const int d = dataset.x.cols;
    if (probe.w.cols != d) throw VsError(ErrorKind::Shape, "eval_probe: dim mismatch");
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        const float* x = dataset.x.row(i);
        float z0 = dot(probe.w.row(0), x, d);
        float z1 = dot(probe.w.row(1), x, d);
        if ((z1 > z0 ? 1 : 0) == dataset.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / n;
}

std::vector<int> steer_generate(const Weights& w, const std::vector<int>& prompt,
                                const Vector& probe_row, const std::vector<int>& layers,
                                float alpha, int max_new, int eot_token) {
    if (layers.empty()) throw VsError(ErrorKind::Argument, "steer_generate: empty layers");
    for (int l : layers) {
        if (l < 0 || l >= w.cfg.n_layers) {
            throw VsError(ErrorKind::Argument, "steer_generate: layer out of range");
        }
    }
    Steering st;
    st.layers = layers;
    st.direction = probe_row;
    st.alpha = alpha;
    GenOptions g;
    g.steer = &st;
    g.eot_token = eot_token;
    return generate(w, prompt, max_new, g);
}

std::vector<int> default_steer_layers(int n_layers) {
    std::vector<int> out;
    for (int l = n_layers / 3; l < n_layers; ++l) out.push_back(l);
    return out;
}

void save_probe(const Probe& p, const std::string& path,
                const std::string& config_digest) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw VsError(ErrorKind::Io, "save_probe: cannot open " + path);
    out << "VSPROBE1\n";
    out << "endian little\n";
    if (!config_digest.empty()) out << "digest " << config_digest << "\n";
    out << "layer " << p.layer << "\n";
    out << "shape " << p.w.rows << " " << p.w.cols << "\n";
    out.write(reinterpret_cast<const char*>(p.w.data.data()),
              static_cast<std::streamsize>(p.w.data.size() * sizeof(float)));
    if (!out) throw VsError(ErrorKind::Io, "save_probe: write failed for " + path);
}

Probe load_probe(const std::string& path, std::string* config_digest) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VsError(ErrorKind::Dependency, "load_probe: missing " + path);
    std::string line;
    if (!std::getline(in, line) || line != "VSPROBE1") {
        throw VsError(ErrorKind::Io, "load_probe: bad magic in " + path);
    }
    if (!std::getline(in, line) || line != "endian little") {
        throw VsError(ErrorKind::Io, "load_probe: unsupported endianness marker");
    }
    Probe p;
    int rows = 0, cols = 0;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string kind;
        ss >> kind;
        if (kind == "digest") {
            std::string dg;
            ss >> dg;
            if (config_digest) *config_digest = dg;
        } else if (kind == "layer") {
            ss >> p.layer;
        } else if (kind == "shape") {
            ss >> rows >> cols;
            break;
        } else {
            throw VsError(ErrorKind::Io, "load_probe: unknown manifest line: " + line);
        }
    }
    if (rows != 2 || cols < 1) throw VsError(ErrorKind::Io, "load_probe: bad shape");
    p.w = Matrix(rows, cols);
    in.read(reinterpret_cast<char*>(p.w.data.data()),
            static_cast<std::streamsize>(p.w.data.size() * sizeof(float)));
    if (static_cast<size_t>(in.gcount()) != p.w.data.size() * sizeof(float)) {
        throw VsError(ErrorKind::Io, "load_probe: truncated data in " + path);
    }
    return p;
}

}  // namespace verifscope
