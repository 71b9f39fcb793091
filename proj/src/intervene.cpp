#include "verifscope/intervene.hpp"

#include <algorithm>

#include "verifscope/tokenizer.hpp"

namespace verifscope {

Overlay apply_plan(const Weights& w, const InterventionPlan& plan) {
    if (plan.scale < 0.0f || plan.scale > 1.0f) {
        throw VsError(ErrorKind::Argument, "apply_plan: scale must be in [0, 1]");
    }
    Overlay ov;
    ov.scale = plan.scale;
    ov.head_off.assign(static_cast<size_t>(w.cfg.n_layers) * w.cfg.n_heads, 0);
    ov.glu_off.assign(w.cfg.n_layers, {});
    for (const HeadId& h : plan.heads) {
        w.check_head(h);
        ov.head_off[static_cast<size_t>(h.layer) * w.cfg.n_heads + h.head] = 1;
    }
    for (const GluVectorId& g : plan.glu_vectors) {
        if (g.layer < 0 || g.layer >= w.cfg.n_layers || g.row < 0 ||
            g.row >= w.cfg.d_glu) {
            throw VsError(ErrorKind::Argument, "apply_plan: invalid GLU vector " + g.str());
        }
        ov.glu_off[g.layer].push_back(g.row);
    }
    for (auto& rows : ov.glu_off) {
        std::sort(rows.begin(), rows.end());
        rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    }
    return ov;
}

bool detect_trigger(const std::vector<int>& prefix) {
    const Tokenizer& tok = tokenizer();
    static const int open_sp = *tok.try_id(" (");
    static const int open = *tok.try_id("(");
    static const int close = *tok.try_id(")");
    static const int newline = *tok.try_id("\n");

    // Inside the think region?
    bool in_think = false;
    for (int id : prefix) {
        if (id == tok.think_open_id(false) || id == tok.think_open_id(true)) {
            in_think = true;
        } else if (id == tok.think_close_id(false) || id == tok.think_close_id(true)) {
            in_think = false;
        }
    }
    if (!in_think) return false;

    // Find the opening parenthesis of the current (unclosed) span on this line.
    int open_pos = -1;
    for (int i = static_cast<int>(prefix.size()) - 1; i >= 0; --i) {
        int id = prefix[i];
        if (id == close || id == newline) return false;
        if (id == open_sp || id == open) {
            open_pos = i;
            break;
        }
    }
    if (open_pos <= 0) return false;
    // The "(" must follow a completed equation, i.e. a stated value.
    return tok.number_value(prefix[open_pos - 1]).has_value();
}

std::vector<int> intervened_generate(const Weights& w, const InterventionPlan& plan,
                                     const std::vector<int>& prompt, int max_new) {
    Overlay ov = apply_plan(w, plan);
    GenOptions g;
    g.eot_token = tokenizer().eot_id();
    if (!plan.empty()) {
        g.overlay = &ov;
        if (plan.gating == Gating::AtAttemptMarkers) g.overlay_gate = detect_trigger;
    }
    return generate(w, prompt, max_new, g);
}

std::string outcome_name(OutcomeLabel l) {
    switch (l) {
        case OutcomeLabel::Success: return "success";
        case OutcomeLabel::PartialSuccess: return "partial_success";
        case OutcomeLabel::Failure: return "failure";
        case OutcomeLabel::OutOfRange: return "out_of_range";
    }
    return "?";
}

Outcome classify_outcome(const std::vector<int>& generated, const Instance& inst) {
    const Tokenizer& tok = tokenizer();
    Outcome out;
    out.transcript = parse_transcript(generated);
    const Transcript& t = out.transcript;

    const Attempt* correct = nullptr;
    for (const Attempt& a : t.attempts) {
        if (a.evaluable && a.value == inst.target) {
            correct = &a;
            break;
        }
    }
    if (!correct) {
        // A generation with no parseable attempt and no answer block never
        // engaged with the task at all.
        bool degenerate = t.out_of_range || (t.attempts.empty() && !t.answer);
        out.label = degenerate ? OutcomeLabel::OutOfRange : OutcomeLabel::Failure;
        return out;
    }
    if (correct->marker == Marker::Valid) {
        out.label = OutcomeLabel::Failure;
        return out;
    }

    // Correct attempt marked invalid — check for a later solution claim.
    bool claimed = false;
    if (correct->span_end >= 0 && correct->span_end < static_cast<int>(generated.size())) {
        std::vector<int> tail(generated.begin() + correct->span_end, generated.end());
        std::string rest = tok.decode(tail);
        if (rest.find("So, the equation that equals") != std::string::npos ||
            rest.find("answer is") != std::string::npos) {
            claimed = true;
        }
    }
    if (!claimed && t.answer) {
        try {
            claimed = evaluate_left_to_right(*t.answer) == inst.target;
        } catch (const VsError&) {
            // Unevaluable answer block is not a solution claim.
        }
    }
    out.label = claimed ? OutcomeLabel::PartialSuccess : OutcomeLabel::Success;
    return out;
}

std::vector<Instance> filter_originally_validated(const Weights& w,
                                                  const std::vector<Instance>& candidates,
                                                  int max_new) {
    const Tokenizer& tok = tokenizer();
    std::vector<uint8_t> keep(candidates.size(), 0);
    parallel_for(static_cast<int>(candidates.size()), [&](int i) {
        std::vector<int> prompt = tok.encode(render_prompt(candidates[i]));
        GenOptions g;
        g.eot_token = tok.eot_id();
        std::vector<int> gen = generate(w, prompt, max_new, g);
        Transcript t = parse_transcript(gen);
        bool validated = false;
        for (const Attempt& a : t.attempts) {
            if (a.evaluable && a.value == candidates[i].target &&
                a.marker == Marker::Valid) {
                validated = true;
            }
        }
        if (!validated || !t.answer) return;
        try {
            keep[i] = evaluate_left_to_right(*t.answer) == candidates[i].target ? 1 : 0;
        } catch (const VsError&) {
        }
    });
    std::vector<Instance> out;
    for (size_t i = 0; i < candidates.size(); ++i)
        if (keep[i]) out.push_back(candidates[i]);
    return out;
}

namespace {

PlanReport run_plan(const Weights& w, const InterventionPlan& plan,
                    const std::vector<Instance>& eval_set, int max_new,
                    std::vector<EvidenceEntry>* evidence) {
    const Tokenizer& tok = tokenizer();
    std::vector<OutcomeLabel> labels(eval_set.size());
    std::vector<std::vector<int>> gens(evidence ? eval_set.size() : 0);
    parallel_for(static_cast<int>(eval_set.size()), [&](int i) {
        std::vector<int> prompt = tok.encode(render_prompt(eval_set[i]));
        std::vector<int> gen = intervened_generate(w, plan, prompt, max_new);
        labels[i] = classify_outcome(gen, eval_set[i]).label;
        if (evidence) gens[i] = std::move(gen);
    });
    PlanReport rep;
    rep.name = plan.name;
    rep.samples = static_cast<int>(eval_set.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        switch (labels[i]) {
            case OutcomeLabel::Success: rep.success += 1.0; break;
            case OutcomeLabel::PartialSuccess: rep.partial += 1.0; break;
            case OutcomeLabel::Failure: rep.failure += 1.0; break;
            case OutcomeLabel::OutOfRange: rep.out_of_range += 1.0; break;
        }
        if (evidence) {
            evidence->push_back({plan.name, eval_set[i], std::move(gens[i]), labels[i]});
        }
    }
    rep.success /= rep.samples;
    rep.partial /= rep.samples;
    rep.failure /= rep.samples;
    rep.out_of_range /= rep.samples;
    return rep;
}

}  // namespace

InterventionReport run_experiment(const Weights& w,
                                  const std::vector<InterventionPlan>& plans,
                                  const std::vector<Instance>& eval_set, int max_new,
                                  const BaselineSpec* baseline, bool keep_evidence) {
    if (eval_set.empty()) {
        throw VsError(ErrorKind::Data, "run_experiment: empty evaluation set");
    }
    InterventionReport rep;
    for (const InterventionPlan& plan : plans) {
        rep.plans.push_back(run_plan(w, plan, eval_set, max_new,
                                     keep_evidence ? &rep.evidence : nullptr));
    }
    if (baseline) {
        int size = baseline->size;
        if (size < 0) size = plans.empty() ? 1 : static_cast<int>(plans[0].heads.size());
        size = std::max(1, size);
        Rng rng(baseline->seed);
        std::vector<HeadId> all;
        for (int l = 0; l < w.cfg.n_layers; ++l)
            for (int h = 0; h < w.cfg.n_heads; ++h) all.push_back({l, h});
        double total = 0.0;
        for (int run = 0; run < baseline->runs; ++run) {
            std::vector<HeadId> pool = all;
            Rng r = rng.fork(run + 1);
            r.shuffle(pool);
            InterventionPlan p;
            p.name = "random_baseline_" + std::to_string(run);
            p.heads.assign(pool.begin(), pool.begin() + std::min<size_t>(size, pool.size()));
            p.gating = plans.empty() ? Gating::AtAttemptMarkers : plans[0].gating;
            PlanReport br = run_plan(w, p, eval_set, max_new, nullptr);
            total += br.disable_rate();
            rep.baseline_runs.push_back(std::move(br));
        }
        rep.baseline_mean_rate = baseline->runs ? total / baseline->runs : 0.0;
    }
    return rep;
}

}  // namespace verifscope
