#include "verifscope/glu_analysis.hpp"

#include <algorithm>
#include <cmath>

namespace verifscope {

std::vector<GluVectorId> GluSelection::valid_ids() const {
    std::vector<GluVectorId> out;
    for (const GluPick& p : valid) out.push_back(p.id);
    return out;
}

std::vector<GluVectorId> GluSelection::invalid_ids() const {
    std::vector<GluVectorId> out;
    for (const GluPick& p : invalid) out.push_back(p.id);
    return out;
}

std::vector<std::vector<int>> GluSelection::rows_by_layer(int n_layers, bool with_valid,
                                                          bool with_invalid) const {
    std::vector<std::vector<int>> out(n_layers);
    auto add = [&](const std::vector<GluPick>& picks) {
        for (const GluPick& p : picks) {
            if (p.id.layer >= 0 && p.id.layer < n_layers) out[p.id.layer].push_back(p.id.row);
        }
    };
    if (with_valid) add(valid);
    if (with_invalid) add(invalid);
    for (auto& rows : out) {
        std::sort(rows.begin(), rows.end());
        rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    }
    return out;
}

GluSelection select_top_k(const Weights& w, const std::vector<Probe>& probes, int k,
                          int layer_begin, int layer_end) {
    if (k < 1 || k > w.cfg.d_glu) {
        throw VsError(ErrorKind::Argument, "select_top_k: k out of range");
    }
    if (layer_begin < 0 || layer_end > w.cfg.n_layers || layer_begin >= layer_end) {
        throw VsError(ErrorKind::Argument, "select_top_k: bad layer range");
    }
    GluSelection sel;
    sel.k = k;
    sel.layer_begin = layer_begin;
    sel.layer_end = layer_end;

    for (int l = layer_begin; l < layer_end; ++l) {
        const Probe* probe = nullptr;
        for (const Probe& p : probes)
            if (p.layer == l) probe = &p;
        if (!probe) {
            throw VsError(ErrorKind::Dependency,
                          "select_top_k: no probe for layer " + std::to_string(l));
        }
        Vector w0 = probe->w.row_vec(0);
        Vector w1 = probe->w.row_vec(1);
        const int n = w.cfg.d_glu;
        std::vector<float> sim0(n), sim1(n);
        for (int j = 0; j < n; ++j) {
            Vector vj = w.glu_out_vec(l, j);
            sim0[j] = cosine_sim(vj, w0);
            sim1[j] = cosine_sim(vj, w1);
        }
        auto top = [&](const std::vector<float>& sim) {
            std::vector<int> idx(n);
            for (int j = 0; j < n; ++j) idx[j] = j;
            std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
                if (sim[a] != sim[b]) return sim[a] > sim[b];
                return a < b;  // deterministic tie-break by ascending row
            });
            idx.resize(k);
            return idx;
        };
        std::vector<int> top1 = top(sim1), top0 = top(sim0);
        std::vector<uint8_t> in_valid(n, 0);
        for (int j : top1) in_valid[j] = 1;
        for (int j : top1) {
            // A row claimed by both polarities keeps the stronger similarity.
            bool also0 = std::find(top0.begin(), top0.end(), j) != top0.end();
            if (also0) {
                sel.conflicts.push_back(GluVectorId{l, j}.str());
                if (sim0[j] > sim1[j]) continue;
            }
            sel.valid.push_back({GluVectorId{l, j}, sim1[j]});
        }
        for (int j : top0) {
            bool also1 = in_valid[j] != 0;
            if (also1 && sim1[j] >= sim0[j]) continue;
            sel.invalid.push_back({GluVectorId{l, j}, sim0[j]});
        }
    }
    return sel;
}

std::vector<TokenNeighbor> nearest_neighbor_tokens(const Weights& w, const Vector& v,
                                                   int k) {
    const int V = w.cfg.vocab_size;
    std::vector<float> sim(V);
    for (int t = 0; t < V; ++t) {
        float n1 = norm2(v.data(), static_cast<int>(v.size()));
        float n2 = norm2(w.embedding.row(t), w.cfg.d_model);
        if (n1 == 0.0f || n2 == 0.0f) {
            sim[t] = 0.0f;
        } else {
            sim[t] = dot(v.data(), w.embedding.row(t), w.cfg.d_model) / (n1 * n2);
        }
    }
    std::vector<int> idx(V);
    for (int t = 0; t < V; ++t) idx[t] = t;
    const int kk = std::min(k, V);
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](int a, int b) {
        if (sim[a] != sim[b]) return sim[a] > sim[b];
        return a < b;
    });
    std::vector<TokenNeighbor> out;
    for (int r = 0; r < kk; ++r) out.push_back({idx[r], sim[idx[r]]});
    return out;
}

ReceptiveFieldResult receptive_field_contains(const Vector& x,
                                              const ReceptiveFieldSpec& spec) {
    if (spec.neurons.empty()) {
        throw VsError(ErrorKind::Argument, "receptive_field_contains: empty spec");
    }
    ReceptiveFieldResult res;
    res.member = true;
    const int d = static_cast<int>(x.size());
    for (const auto& [g, u] : spec.neurons) {
        if (static_cast<int>(g.size()) != d || static_cast<int>(u.size()) != d) {
            throw VsError(ErrorKind::Shape, "receptive_field_contains: dim mismatch");
        }
        float a = dot(g.data(), x.data(), d);
        float b = dot(u.data(), x.data(), d);
        bool active = silu(a) * b > 0.0f;
        res.active.push_back(active ? 1 : 0);
        res.member = res.member && active;
    }
    return res;
}

std::vector<ActivationRow> activation_report(const std::vector<ActivationTrace>& before,
                                             const std::vector<ActivationTrace>& after,
                                             const std::vector<int>& positions,
                                             const std::vector<GluVectorId>& selection) {
    if (before.empty() || before.size() != positions.size()) {
        throw VsError(ErrorKind::Argument, "activation_report: need one position per trace");
    }
    if (!after.empty() && after.size() != before.size()) {
        throw VsError(ErrorKind::Argument, "activation_report: before/after size mismatch");
    }
    auto mean_at = [&](const std::vector<ActivationTrace>& traces, const GluVectorId& id) {
        double acc = 0.0;
        for (size_t i = 0; i < traces.size(); ++i) {
            const ActivationTrace& tr = traces[i];
            if (id.layer >= static_cast<int>(tr.glu_m.size()) ||
                tr.glu_m[id.layer].rows == 0) {
                throw VsError(ErrorKind::Data, "activation_report: no GLU trace for layer " +
                                                   std::to_string(id.layer));
            }
            const Matrix& m = tr.glu_m[id.layer];
            int pos = positions[i];
            if (pos < 0 || pos >= m.rows || id.row >= m.cols) {
                throw VsError(ErrorKind::Data, "activation_report: index out of range");
            }
            acc += m.at(pos, id.row);
        }
        return acc / static_cast<double>(traces.size());
    };
    std::vector<ActivationRow> rows;
    for (const GluVectorId& id : selection) {
        ActivationRow r;
        r.id = id;
        r.mean_before = mean_at(before, id);
        r.mean_after = after.empty() ? r.mean_before : mean_at(after, id);
        r.delta = r.mean_after - r.mean_before;
        rows.push_back(r);
    }
    return rows;
}

AntipodalAudit antipodal_audit(const Weights& w, const std::vector<GluVectorId>& selection,
                               int nn_k) {
    AntipodalAudit audit;
    for (const GluVectorId& id : selection) {
        AntipodeEntry e;
        e.id = id;
        Vector v = w.glu_out_vec(id.layer, id.row);
        e.forward = nearest_neighbor_tokens(w, v, nn_k);
        Vector nv(v.size());
        for (size_t i = 0; i < v.size(); ++i) nv[i] = -v[i];
        e.antipode = nearest_neighbor_tokens(w, nv, nn_k);
        audit.entries.push_back(std::move(e));
    }
    // silu(a) = a * sigmoid(a) on a fine negative grid; the minimum sits near
    // a ~= -1.2785 with |silu| ~= 0.2785.
    double mx = 0.0;
    for (int i = 1; i <= 1000000; ++i) {
        double a = -10.0 * i / 1000000.0;
        double s = a / (1.0 + std::exp(-a));
        mx = std::max(mx, std::abs(s));
    }
    audit.max_abs_silu_negative = mx;
    audit.example_contribution = static_cast<double>(silu(-1.0f)) * 1.0;
    audit.relu_contrast = std::max(-1.0, 0.0) * 1.0;  // clamped branch emits zero
    return audit;
}

}  // namespace verifscope
