#pragma once

#include <string>
#include <vector>

#include "verifscope/countdown.hpp"
#include "verifscope/model.hpp"

namespace verifscope {

enum class Gating { AtAttemptMarkers, AlwaysOn };

struct InterventionPlan {
    std::string name;
    std::vector<HeadId> heads;           // W_O blocks scaled (0 = zeroed)
    std::vector<GluVectorId> glu_vectors;  // w_out rows scaled
    Gating gating = Gating::AtAttemptMarkers;
    float scale = 0.0f;

    bool empty() const { return heads.empty() && glu_vectors.empty(); }
};

// Builds the overlay view; never touches the base weights.
Overlay apply_plan(const Weights& w, const InterventionPlan& plan);

// True when the prefix sits inside an attempt-marker span: a completed
// equation followed by "(", up to (not including past) the closing ")".
// The marker word is exactly the next prediction at the trigger position.
bool detect_trigger(const std::vector<int>& prefix);

std::vector<int> intervened_generate(const Weights& w, const InterventionPlan& plan,
                                     const std::vector<int>& prompt, int max_new);

enum class OutcomeLabel { Success, PartialSuccess, Failure, OutOfRange };

std::string outcome_name(OutcomeLabel l);

struct Outcome {
    OutcomeLabel label = OutcomeLabel::OutOfRange;
    Transcript transcript;  // parse evidence
};

// Success: a correct-valued attempt is marked invalid and no solution claim
// follows. PartialSuccess: marked invalid but a claim follows. Failure: the
// correct attempt is validated (or nothing correct was graded in an intact
// transcript). OutOfRange: structure lost before a correct attempt is graded.
Outcome classify_outcome(const std::vector<int>& generated, const Instance& inst);

struct PlanReport {
    std::string name;
    double success = 0.0, partial = 0.0, failure = 0.0, out_of_range = 0.0;
    int samples = 0;

    double disable_rate() const { return success + partial; }
};

struct BaselineSpec {
    int runs = 5;
    uint64_t seed = 7;
    int size = -1;  // -1: match the first plan's head count
};

struct EvidenceEntry {
    std::string plan;
    Instance instance;
    std::vector<int> generated;
    OutcomeLabel label = OutcomeLabel::OutOfRange;
};

struct InterventionReport {
    std::vector<PlanReport> plans;
    std::vector<PlanReport> baseline_runs;
    double baseline_mean_rate = 0.0;  // mean success+partial over runs
    std::vector<EvidenceEntry> evidence;
};

// Instances where the plain model finds the solution, marks it valid, and
// returns a correct answer block — the population interventions are run on.
std::vector<Instance> filter_originally_validated(const Weights& w,
                                                  const std::vector<Instance>& candidates,
                                                  int max_new);

InterventionReport run_experiment(const Weights& w,
                                  const std::vector<InterventionPlan>& plans,
                                  const std::vector<Instance>& eval_set, int max_new,
                                  const BaselineSpec* baseline = nullptr,
                                  bool keep_evidence = false);

}  // namespace verifscope
