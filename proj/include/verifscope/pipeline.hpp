#pragma once

#include <string>

#include "verifscope/attn_analysis.hpp"
#include "verifscope/emb2emb.hpp"
#include "verifscope/intervene.hpp"
#include "verifscope/lens.hpp"
#include "verifscope/trainer.hpp"

namespace verifscope {

// Declarative configuration for the whole pipeline. Every stage reads only
// this struct plus artifacts of earlier stages; the digest of the serialized
// config is embedded in each artifact so the report can detect mixing.
struct RunConfig {
    int schema_version = 1;
    uint64_t seed = 1;
    std::string out_dir = "out";

    ModelConfig model;  // vocab_size is always pinned to the tokenizer

    // gen-data
    int corpus_train = 3000;
    int corpus_val = 300;
    int eval_instances = 400;  // held-out instances for generation stages
    int n_operands = 3;
    int max_failures = 3;

    TrainConfig train;

    // capture
    int capture_hidden = 160;  // validation samples traced with hidden states
    int capture_full = 24;     // subset also carrying attention + GLU

    ProbeHyper probe;

    // lens
    int lens_top_k = 10;

    // glu-select
    int glu_k = 50;

    // heads
    double head_threshold = 0.10;

    // score-heads
    int eq8_refs = 200;

    // search-subset
    int search_budget = 8;
    int search_samples = 40;

    // intervene
    int intervene_samples = 120;
    int intervene_max_new = 160;
    int baseline_runs = 5;

    // steer
    float steer_alpha = 20.0f;
    int steer_samples = 24;

    // transfer
    int transfer_sample = 0;  // 0 = all shared tokens
};

RunConfig default_run_config();
RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& cfg, const std::string& path);
std::string run_config_json(const RunConfig& cfg);
std::string config_digest(const RunConfig& cfg);

// Artifact locations under cfg.out_dir.
struct Paths {
    std::string dir;

    std::string corpus_train() const { return dir + "/corpus_train.jsonl"; }
    std::string corpus_val() const { return dir + "/corpus_val.jsonl"; }
    std::string eval_instances() const { return dir + "/eval_instances.json"; }
    std::string model() const { return dir + "/model.bin"; }
    std::string train_log() const { return dir + "/train_log.jsonl"; }
    std::string train_summary() const { return dir + "/train_summary.json"; }
    std::string trace_dir() const { return dir + "/traces"; }
    std::string trace(int i, bool full) const;
    std::string capture_index() const { return dir + "/capture_index.json"; }
    std::string probe(int layer) const {
        return dir + "/probe_layer" + std::to_string(layer) + ".bin";
    }
    std::string probe_summary() const { return dir + "/probe_summary.json"; }
    std::string lens_report() const { return dir + "/lens_report.tsv"; }
    std::string glu_selection() const { return dir + "/glu_selection.json"; }
    std::string prev_heads() const { return dir + "/prev_heads.json"; }
    std::string head_rankings() const { return dir + "/head_rankings.json"; }
    std::string subset() const { return dir + "/subset.json"; }
    std::string intervention() const { return dir + "/intervention.json"; }
    std::string evidence() const { return dir + "/evidence.jsonl"; }
    std::string steer_report() const { return dir + "/steer_report.json"; }
    std::string emb_map() const { return dir + "/emb2emb_map.bin"; }
    std::string transfer_report() const { return dir + "/transfer_report.json"; }
    std::string report() const { return dir + "/report.json"; }
};

// Each stage writes its artifacts and returns a one-line summary.
std::string stage_gen_data(const RunConfig& cfg);
std::string stage_train(const RunConfig& cfg);
std::string stage_capture(const RunConfig& cfg);
std::string stage_probe(const RunConfig& cfg);
std::string stage_lens(const RunConfig& cfg);
std::string stage_glu_select(const RunConfig& cfg);
std::string stage_heads(const RunConfig& cfg);
std::string stage_score_heads(const RunConfig& cfg);
std::string stage_search_subset(const RunConfig& cfg);
std::string stage_intervene(const RunConfig& cfg);
std::string stage_steer(const RunConfig& cfg);
std::string stage_transfer(const RunConfig& cfg);
std::string stage_report(const RunConfig& cfg, bool force = false);

}  // namespace verifscope
