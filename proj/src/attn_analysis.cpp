#include "verifscope/attn_analysis.hpp"

#include <algorithm>
#include <cmath>

namespace verifscope {

std::string rank_method_name(RankMethod m) {
    switch (m) {
        case RankMethod::Eq8: return "eq8";
        case RankMethod::AttentionDensity: return "attention_density";
        case RankMethod::GateUpSimilarity: return "gate_up_similarity";
        case RankMethod::ProbeSimilarity: return "probe_similarity";
        case RankMethod::Composition: return "composition";
    }
    return "?";
}

std::vector<PrevTokenHeadReport> detect_prev_token_heads(
    const std::vector<ActivationTrace>& traces, const std::vector<Transcript>& transcripts,
    double threshold) {
    if (traces.empty() || traces.size() != transcripts.size()) {
        throw VsError(ErrorKind::Argument,
                      "detect_prev_token_heads: need one transcript per trace");
    }
    int L = 0, H = 0;
    for (const ActivationTrace& tr : traces) {
        if (!tr.has_attn || tr.attn.empty()) {
            throw VsError(ErrorKind::Data,
                          "detect_prev_token_heads: trace lacks attention patterns");
        }
        L = static_cast<int>(tr.attn.size());
        H = static_cast<int>(tr.attn[0].size());
    }

    std::vector<std::vector<double>> sums(L, std::vector<double>(H, 0.0));
    int n_samples = 0;
    for (size_t i = 0; i < traces.size(); ++i) {
        const Transcript& t = transcripts[i];
        if (t.t_ans < 0) continue;
        std::vector<int> query_pos;
        for (const Attempt& a : t.attempts) {
            if (a.marker == Marker::Valid && a.evaluable && a.value == t.target &&
                a.marker_pos >= 0) {
                query_pos.push_back(a.marker_pos);
            }
        }
        if (query_pos.empty()) continue;
        ++n_samples;
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < H; ++h) {
                const Matrix& A = traces[i].attn[l][h];
                double per_sample = 0.0;
                for (int qp : query_pos) {
                    if (qp >= A.rows || t.t_ans >= A.cols) {
                        throw VsError(ErrorKind::Data,
                                      "detect_prev_token_heads: position outside trace");
                    }
                    per_sample += A.at(qp, t.t_ans);
                }
                sums[l][h] += per_sample / query_pos.size();
            }
        }
    }
    if (n_samples == 0) {
        throw VsError(ErrorKind::Data, "detect_prev_token_heads: no correct attempts");
    }
    std::vector<PrevTokenHeadReport> out;
    for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h) {
            PrevTokenHeadReport r;
            r.head = {l, h};
            r.mass = sums[l][h] / n_samples;
            r.samples = n_samples;
            r.flagged = r.mass >= threshold;
            out.push_back(r);
        }
    }
    return out;
}

double score_head_eq8(const Weights& w, HeadId head,
                      const std::vector<std::pair<Vector, Vector>>& glu_refs) {
    if (glu_refs.empty()) throw VsError(ErrorKind::Argument, "score_head_eq8: no refs");
    const int d = w.cfg.d_model;
    // Transposed so each OV column is contiguous for the dot products below.
    Matrix ovt = transpose(ov_circuit(w, head));
    double score = 0.0;
    Vector gv(d), uv(d);
    for (const auto& [g, u] : glu_refs) {
        if (static_cast<int>(g.size()) != d || static_cast<int>(u.size()) != d) {
            throw VsError(ErrorKind::Shape, "score_head_eq8: ref dim mismatch");
        }
        // row vector g^T . OV
        for (int c = 0; c < d; ++c) {
            gv[c] = silu(dot(g.data(), ovt.row(c), d));
            uv[c] = dot(u.data(), ovt.row(c), d);
        }
        score += dot(gv.data(), uv.data(), d);
    }
    return score / static_cast<double>(glu_refs.size());
}

double composition_score(const Matrix& w1, const Matrix& w2) {
    double n1 = frobenius_norm(w1);
    double n2 = frobenius_norm(w2);
    if (n1 == 0.0 || n2 == 0.0) {
        throw VsError(ErrorKind::Numerical, "composition_score: zero matrix");
    }
    return frobenius_norm(matmul(w1, w2)) / (n1 * n2);
}

Vector principal_direction(const Matrix& m, uint64_t seed) {
    Rng rng(seed);
    Vector v(m.cols);
    for (float& x : v) x = rng.uniform_float(-1.0f, 1.0f);
    Vector mv(m.rows), next(m.cols);
    for (int it = 0; it < 100; ++it) {
        for (int r = 0; r < m.rows; ++r) mv[r] = dot(m.row(r), v.data(), m.cols);
        for (int c = 0; c < m.cols; ++c) {
            double acc = 0.0;
            for (int r = 0; r < m.rows; ++r) acc += static_cast<double>(m.at(r, c)) * mv[r];
            next[c] = static_cast<float>(acc);
        }
        float n = norm2(next.data(), m.cols);
        if (n == 0.0f) {
            throw VsError(ErrorKind::Numerical, "principal_direction: zero iterate");
        }
        for (int c = 0; c < m.cols; ++c) v[c] = next[c] / n;
    }
    return v;
}

std::vector<std::pair<Vector, Vector>> glu_refs_from_selection(const Weights& w,
                                                               const GluSelection& sel,
                                                               int n) {
    std::vector<std::pair<Vector, Vector>> refs;
    for (const GluPick& p : sel.valid) {
        if (static_cast<int>(refs.size()) >= n) break;
        refs.emplace_back(w.glu_gate_vec(p.id.layer, p.id.row),
                          w.glu_up_vec(p.id.layer, p.id.row));
    }
    if (refs.empty()) {
        throw VsError(ErrorKind::Data, "glu_refs_from_selection: empty selection");
    }
    return refs;
}

namespace {

std::vector<HeadScore> sorted_scores(std::vector<HeadScore> scores) {
    std::stable_sort(scores.begin(), scores.end(), [](const HeadScore& a,
                                                      const HeadScore& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.head.layer != b.head.layer) return a.head.layer < b.head.layer;
        return a.head.head < b.head.head;
    });
    return scores;
}

}  // namespace

std::vector<HeadScore> rank_heads_eq8(const Weights& w,
                                      const std::vector<HeadId>& candidates,
                                      const std::vector<std::pair<Vector, Vector>>& refs) {
    std::vector<HeadScore> scores(candidates.size());
    parallel_for(static_cast<int>(candidates.size()), [&](int i) {
        scores[i] = {candidates[i], score_head_eq8(w, candidates[i], refs),
                     RankMethod::Eq8};
    });
    return sorted_scores(std::move(scores));
}

std::vector<HeadScore> rank_attention_density(
    const std::vector<PrevTokenHeadReport>& reports) {
    std::vector<HeadScore> scores;
    for (const PrevTokenHeadReport& r : reports) {
        scores.push_back({r.head, r.mass, RankMethod::AttentionDensity});
    }
    return sorted_scores(std::move(scores));
}

std::vector<HeadScore> rank_gate_up_similarity(
    const Weights& w, const std::vector<HeadId>& candidates,
    const std::vector<std::pair<Vector, Vector>>& refs) {
    if (refs.empty()) {
        throw VsError(ErrorKind::Argument, "rank_gate_up_similarity: no refs");
    }
    const int d = w.cfg.d_model;
    Vector mean(d, 0.0f);
    for (const auto& [g, u] : refs) {
        axpy(mean.data(), 1.0f, g.data(), d);
        axpy(mean.data(), 1.0f, u.data(), d);
    }
    for (float& v : mean) v /= static_cast<float>(2 * refs.size());
    std::vector<HeadScore> scores(candidates.size());
    parallel_for(static_cast<int>(candidates.size()), [&](int i) {
        Vector dir = principal_direction(ov_circuit(w, candidates[i]));
        scores[i] = {candidates[i], std::abs(cosine_sim(mean, dir)),
                     RankMethod::GateUpSimilarity};
    });
    return sorted_scores(std::move(scores));
}

std::vector<HeadScore> rank_probe_similarity(const Weights& w,
                                             const std::vector<HeadId>& candidates,
                                             const Vector& probe_valid_row) {
    std::vector<HeadScore> scores(candidates.size());
    parallel_for(static_cast<int>(candidates.size()), [&](int i) {
        Vector dir = principal_direction(ov_circuit(w, candidates[i]));
        scores[i] = {candidates[i], std::abs(cosine_sim(probe_valid_row, dir)),
                     RankMethod::ProbeSimilarity};
    });
    return sorted_scores(std::move(scores));
}

std::vector<HeadScore> rank_composition(
    const Weights& w, const std::vector<HeadId>& candidates,
    const std::vector<std::pair<Vector, Vector>>& refs) {
    if (refs.empty()) throw VsError(ErrorKind::Argument, "rank_composition: no refs");
    const int d = w.cfg.d_model;
    // Columns are the gate/up reference vectors, so CS(OV, G) measures how
    // much of the head's write lands in the span the GLU set reads.
    Matrix g(d, static_cast<int>(2 * refs.size()));
    for (size_t i = 0; i < refs.size(); ++i) {
        for (int r = 0; r < d; ++r) {
            g.at(r, static_cast<int>(2 * i)) = refs[i].first[r];
            g.at(r, static_cast<int>(2 * i + 1)) = refs[i].second[r];
        }
    }
    std::vector<HeadScore> scores(candidates.size());
    parallel_for(static_cast<int>(candidates.size()), [&](int i) {
        scores[i] = {candidates[i], composition_score(ov_circuit(w, candidates[i]), g),
                     RankMethod::Composition};
    });
    return sorted_scores(std::move(scores));
}

SubsetSearchResult search_minimal_subset(
    const std::vector<HeadScore>& ranking,
    const std::function<double(const std::vector<HeadId>&)>& evaluate, int budget) {
    if (ranking.empty()) {
        throw VsError(ErrorKind::Argument, "search_minimal_subset: empty ranking");
    }
    if (budget < 1) {
        throw VsError(ErrorKind::Argument, "search_minimal_subset: budget must be >= 1");
    }
    SubsetSearchResult res;
    std::vector<HeadId> prefix;
    for (size_t i = 0; i < ranking.size() && static_cast<int>(i) < budget; ++i) {
        prefix.push_back(ranking[i].head);
        double rate = evaluate(prefix);
        res.log.push_back({prefix, rate});
        if (rate > res.rate || res.heads.empty()) {
            res.rate = rate;
            res.heads = prefix;
        }
        if (rate >= 1.0) {
            res.reached_full = true;
            break;
        }
    }
    return res;
}

}  // namespace verifscope
