#include "verifscope/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "verifscope/tokenizer.hpp"
#include "verifscope/trace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace verifscope {

namespace {

json require_json(const std::string& path, const std::string& producer) {
    std::ifstream in(path);
    if (!in) {
        throw VsError(ErrorKind::Dependency,
                      "missing artifact " + path + " (run `" + producer + "` first)");
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw VsError(ErrorKind::Io, "corrupt artifact " + path + ": " + e.what());
    }
    return j;
}

void require_file(const std::string& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw VsError(ErrorKind::Dependency,
                      "missing artifact " + path + " (run `" + producer + "` first)");
    }
}

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw VsError(ErrorKind::Io, "cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw VsError(ErrorKind::Io, "write failed for " + path);
}

json head_to_json(const HeadId& h) { return json{{"layer", h.layer}, {"head", h.head}}; }
HeadId head_from_json(const json& j) { return {j.at("layer"), j.at("head")}; }
json glu_to_json(const GluVectorId& g) { return json{{"layer", g.layer}, {"row", g.row}}; }
GluVectorId glu_from_json(const json& j) { return {j.at("layer"), j.at("row")}; }

// Probe dataset rows gathered from per-sample trace files, one layer at a
// time so full traces never need to sit in memory together.
struct MarkerIndex {
    std::vector<std::string> files;        // per sample
    std::vector<std::vector<int>> pos;     // per sample: marker positions
    std::vector<std::vector<int>> label;   // per sample: 1 = valid
};

ProbeDataset gather_probe_dataset(const MarkerIndex& mi, int layer) {
    ProbeDataset ds;
    int total = 0;
    for (const auto& p : mi.pos) total += static_cast<int>(p.size());
    int r = 0;
    for (size_t i = 0; i < mi.files.size(); ++i) {
        if (mi.pos[i].empty()) continue;
        ActivationTrace tr = load_trace(mi.files[i], nullptr, layer);
        const Matrix& h = tr.hidden.at(layer);
        if (ds.x.cols == 0) ds.x = Matrix(total, h.cols);
        for (size_t a = 0; a < mi.pos[i].size(); ++a) {
            std::memcpy(ds.x.row(r), h.row(mi.pos[i][a]), sizeof(float) * h.cols);
            ds.labels.push_back(mi.label[i][a]);
            ++r;
        }
    }
    return ds;
}

MarkerIndex load_marker_index(const json& cap, bool full_only) {
    MarkerIndex mi;
    for (const auto& e : cap.at("samples")) {
        if (full_only && !e.at("full").get<bool>()) continue;
        mi.files.push_back(e.at("file"));
        std::vector<int> pos, label;
        for (const auto& a : e.at("attempts")) {
            pos.push_back(a.at("pos"));
            label.push_back(a.at("label"));
        }
        mi.pos.push_back(pos);
        mi.label.push_back(label);
    }
    return mi;
}

std::vector<Probe> load_second_half_probes(const RunConfig& cfg, const Paths& p) {
    std::vector<Probe> probes;
    for (int l = cfg.model.n_layers / 2; l < cfg.model.n_layers; ++l) {
        require_file(p.probe(l), "probe");
        probes.push_back(load_probe(p.probe(l)));
    }
    return probes;
}

Probe load_best_probe(const RunConfig& cfg, const Paths& p) {
    json summary = require_json(p.probe_summary(), "probe");
    int best_layer = -1;
    double best_acc = -1.0;
    for (const auto& row : summary.at("layers")) {
        int l = row.at("layer");
        double acc = row.at("val_accuracy");
        if (l >= cfg.model.n_layers / 2 && acc > best_acc) {
            best_acc = acc;
            best_layer = l;
        }
    }
    if (best_layer < 0) throw VsError(ErrorKind::Data, "no usable probe layer");
    return load_probe(p.probe(best_layer));
}

std::vector<Instance> load_eval_instances(const Paths& p) {
    json j = require_json(p.eval_instances(), "gen-data");
    std::vector<Instance> out;
    for (const auto& e : j.at("instances")) {
        Instance inst;
        inst.operands = e.at("operands").get<std::vector<int>>();
        inst.target = e.at("target");
        out.push_back(inst);
    }
    return out;
}

json plan_report_json(const PlanReport& r) {
    return json{{"name", r.name},
                {"success", r.success},
                {"partial", r.partial},
                {"failure", r.failure},
                {"out_of_range", r.out_of_range},
                {"samples", r.samples},
                {"disable_rate", r.disable_rate()}};
}

}  // namespace

std::string Paths::trace(int i, bool full) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d.bin", full ? "full" : "hidden", i);
    return trace_dir() + "/" + buf;
}

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.model.vocab_size = tokenizer().size();
    return cfg;
}

std::string run_config_json(const RunConfig& c) {
    json j = {
        {"schema_version", c.schema_version},
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"model",
         {{"n_layers", c.model.n_layers},
          {"d_model", c.model.d_model},
          {"n_heads", c.model.n_heads},
          {"d_head", c.model.d_head},
          {"d_glu", c.model.d_glu},
          {"max_seq_len", c.model.max_seq_len}}},
        {"gen_data",
         {{"corpus_train", c.corpus_train},
          {"corpus_val", c.corpus_val},
          {"eval_instances", c.eval_instances},
          {"n_operands", c.n_operands},
          {"max_failures", c.max_failures}}},
        {"train",
         {{"steps", c.train.steps},
          {"batch_size", c.train.batch_size},
          {"lr", c.train.lr},
          {"weight_decay", c.train.weight_decay},
          {"eval_every", c.train.eval_every},
          {"patience", c.train.patience},
          {"eval_samples", c.train.eval_samples}}},
        {"capture", {{"hidden", c.capture_hidden}, {"full", c.capture_full}}},
        {"probe",
         {{"max_steps", c.probe.max_steps},
          {"batch_size", c.probe.batch_size},
          {"val_size", c.probe.val_size},
          {"weight_decay", c.probe.weight_decay},
          {"lr", c.probe.lr},
          {"eval_every", c.probe.eval_every},
          {"patience", c.probe.patience}}},
        {"lens", {{"top_k", c.lens_top_k}}},
        {"glu_select", {{"k", c.glu_k}}},
        {"heads", {{"threshold", c.head_threshold}}},
        {"score_heads", {{"eq8_refs", c.eq8_refs}}},
        {"search_subset", {{"budget", c.search_budget}, {"samples", c.search_samples}}},
        {"intervene",
         {{"samples", c.intervene_samples},
          {"max_new", c.intervene_max_new},
          {"baseline_runs", c.baseline_runs}}},
        {"steer", {{"alpha", c.steer_alpha}, {"samples", c.steer_samples}}},
        {"transfer", {{"n_sample", c.transfer_sample}}},
    };
    return j.dump(2);
}

std::string config_digest(const RunConfig& cfg) {
    // out_dir must not affect the digest: the same experiment may live in
    // different directories.
    RunConfig c = cfg;
    c.out_dir = "";
    return digest_hex(run_config_json(c));
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw VsError(ErrorKind::Io, "cannot open " + path);
    out << run_config_json(cfg) << "\n";
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw VsError(ErrorKind::Config, "config file not found: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw VsError(ErrorKind::Config, std::string("config parse error: ") + e.what());
    }
    RunConfig c = default_run_config();
    try {
        if (j.contains("schema_version")) c.schema_version = j["schema_version"];
        if (c.schema_version != 1) {
            throw VsError(ErrorKind::Config, "unsupported config schema_version");
        }
        if (j.contains("seed")) c.seed = j["seed"];
        if (j.contains("out_dir")) c.out_dir = j["out_dir"];
        if (j.contains("model")) {
            const json& m = j["model"];
            if (m.contains("n_layers")) c.model.n_layers = m["n_layers"];
            if (m.contains("d_model")) c.model.d_model = m["d_model"];
            if (m.contains("n_heads")) c.model.n_heads = m["n_heads"];
            if (m.contains("d_head")) c.model.d_head = m["d_head"];
            if (m.contains("d_glu")) c.model.d_glu = m["d_glu"];
            if (m.contains("max_seq_len")) c.model.max_seq_len = m["max_seq_len"];
        }
        if (j.contains("gen_data")) {
            const json& g = j["gen_data"];
            if (g.contains("corpus_train")) c.corpus_train = g["corpus_train"];
            if (g.contains("corpus_val")) c.corpus_val = g["corpus_val"];
            if (g.contains("eval_instances")) c.eval_instances = g["eval_instances"];
            if (g.contains("n_operands")) c.n_operands = g["n_operands"];
            if (g.contains("max_failures")) c.max_failures = g["max_failures"];
        }
        if (j.contains("train")) {
            const json& t = j["train"];
            if (t.contains("steps")) c.train.steps = t["steps"];
            if (t.contains("batch_size")) c.train.batch_size = t["batch_size"];
            if (t.contains("lr")) c.train.lr = t["lr"];
            if (t.contains("weight_decay")) c.train.weight_decay = t["weight_decay"];
            if (t.contains("eval_every")) c.train.eval_every = t["eval_every"];
            if (t.contains("patience")) c.train.patience = t["patience"];
            if (t.contains("eval_samples")) c.train.eval_samples = t["eval_samples"];
        }
        if (j.contains("capture")) {
            if (j["capture"].contains("hidden")) c.capture_hidden = j["capture"]["hidden"];
            if (j["capture"].contains("full")) c.capture_full = j["capture"]["full"];
        }
        if (j.contains("probe")) {
            const json& p = j["probe"];
            if (p.contains("max_steps")) c.probe.max_steps = p["max_steps"];
            if (p.contains("batch_size")) c.probe.batch_size = p["batch_size"];
            if (p.contains("val_size")) c.probe.val_size = p["val_size"];
            if (p.contains("weight_decay")) c.probe.weight_decay = p["weight_decay"];
            if (p.contains("lr")) c.probe.lr = p["lr"];
            if (p.contains("eval_every")) c.probe.eval_every = p["eval_every"];
            if (p.contains("patience")) c.probe.patience = p["patience"];
        }
        if (j.contains("lens") && j["lens"].contains("top_k"))
            c.lens_top_k = j["lens"]["top_k"];
        if (j.contains("glu_select") && j["glu_select"].contains("k"))
            c.glu_k = j["glu_select"]["k"];
        if (j.contains("heads") && j["heads"].contains("threshold"))
            c.head_threshold = j["heads"]["threshold"];
        if (j.contains("score_heads") && j["score_heads"].contains("eq8_refs"))
            c.eq8_refs = j["score_heads"]["eq8_refs"];
        if (j.contains("search_subset")) {
            if (j["search_subset"].contains("budget"))
                c.search_budget = j["search_subset"]["budget"];
            if (j["search_subset"].contains("samples"))
                c.search_samples = j["search_subset"]["samples"];
        }
        if (j.contains("intervene")) {
            const json& iv = j["intervene"];
            if (iv.contains("samples")) c.intervene_samples = iv["samples"];
            if (iv.contains("max_new")) c.intervene_max_new = iv["max_new"];
            if (iv.contains("baseline_runs")) c.baseline_runs = iv["baseline_runs"];
        }
        if (j.contains("steer")) {
            if (j["steer"].contains("alpha")) c.steer_alpha = j["steer"]["alpha"];
            if (j["steer"].contains("samples")) c.steer_samples = j["steer"]["samples"];
        }
        if (j.contains("transfer") && j["transfer"].contains("n_sample"))
            c.transfer_sample = j["transfer"]["n_sample"];
    } catch (const json::exception& e) {
        throw VsError(ErrorKind::Config, std::string("config field error: ") + e.what());
    }
    c.model.vocab_size = tokenizer().size();
    c.model.validate();
    c.probe.seed = c.seed;
    c.train.seed = c.seed;
    return c;
}

std::string stage_gen_data(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    fs::create_directories(cfg.out_dir);
    const Tokenizer& tok = tokenizer();
    Rng rng(cfg.seed);
    Rng corpus_rng = rng.fork(11);
    Rng eval_rng = rng.fork(12);

    auto make_records = [&](int n) {
        std::vector<CorpusRecord> recs(n);
        for (int i = 0; i < n; ++i) {
            Instance inst = generate_instance(corpus_rng, cfg.n_operands);
            int fails = static_cast<int>(corpus_rng.uniform_int(0, cfg.max_failures));
            Transcript t = synthesize_transcript(inst, corpus_rng, fails);
            CorpusRecord rec;
            rec.instance = inst;
            rec.prompt = render_prompt(inst);
            std::vector<int> tail(t.tokens.begin() + t.prompt_len, t.tokens.end());
            rec.completion = tok.decode(tail);
            recs[i] = std::move(rec);
        }
        return recs;
    };
    std::string digest = config_digest(cfg);
    save_corpus(p.corpus_train(), make_records(cfg.corpus_train), digest);
    save_corpus(p.corpus_val(), make_records(cfg.corpus_val), digest);

    json evals = {{"config_digest", digest}, {"instances", json::array()}};
    for (int i = 0; i < cfg.eval_instances; ++i) {
        Instance inst = generate_instance(eval_rng, cfg.n_operands);
        evals["instances"].push_back(
            {{"operands", inst.operands}, {"target", inst.target}});
    }
    write_json(p.eval_instances(), evals);
    return "gen-data: " + std::to_string(cfg.corpus_train) + " train / " +
           std::to_string(cfg.corpus_val) + " val records, " +
           std::to_string(cfg.eval_instances) + " eval instances";
}

std::string stage_train(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.corpus_train(), "gen-data");
    require_file(p.corpus_val(), "gen-data");
    std::vector<CorpusRecord> train = load_corpus(p.corpus_train());
    std::vector<CorpusRecord> val = load_corpus(p.corpus_val());

    TrainResult res = train_toy_model(cfg.model, train, val, cfg.train, p.train_log());
    std::string digest = config_digest(cfg);
    save_weights(res.weights, p.model(), digest);
    write_json(p.train_summary(),
               {{"config_digest", digest},
                {"steps_run", res.steps_run},
                {"best_val_loss", res.best_val_loss},
                {"val_loss", res.final_eval.loss},
                {"val_token_accuracy", res.final_eval.token_accuracy},
                {"val_marker_accuracy", res.final_eval.marker_accuracy}});
    std::ostringstream s;
    s << "train: " << res.steps_run << " steps, val loss " << res.final_eval.loss
      << ", marker acc " << res.final_eval.marker_accuracy;
    return s.str();
}

std::string stage_capture(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    require_file(p.corpus_val(), "gen-data");
    Weights w = load_weights(p.model());
    std::vector<CorpusRecord> val = load_corpus(p.corpus_val());
    fs::create_directories(p.trace_dir());

    const int n = std::min<int>(cfg.capture_hidden, static_cast<int>(val.size()));
    std::string digest = config_digest(cfg);
    json index = {{"config_digest", digest}, {"samples", json::array()}};
    for (int i = 0; i < n; ++i) {
        TokenizedSample s = tokenize_record(val[i]);
        Transcript t = parse_transcript(s.tokens);
        bool full = i < cfg.capture_full;
        ActivationTrace tr = capture(w, s.tokens, true, full, full);
        std::string file = p.trace(i, full);
        save_trace(tr, file, digest);
        json attempts = json::array();
        for (const Attempt& a : t.attempts) {
            if (a.marker_pos < 0) continue;
            attempts.push_back({{"pos", a.marker_pos},
                                {"label", a.marker == Marker::Valid ? 1 : 0},
                                {"correct", a.evaluable && a.value == t.target}});
        }
        index["samples"].push_back({{"file", file},
                                    {"full", full},
                                    {"t_ans", t.t_ans},
                                    {"prompt_len", s.prompt_len},
                                    {"target", t.target},
                                    {"attempts", attempts}});
    }
    write_json(p.capture_index(), index);
    return "capture: " + std::to_string(n) + " traces (" +
           std::to_string(std::min(cfg.capture_full, n)) + " with attention)";
}

std::string stage_probe(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    json cap = require_json(p.capture_index(), "capture");
    MarkerIndex mi = load_marker_index(cap, false);
    if (mi.files.empty()) throw VsError(ErrorKind::Data, "probe: no captured samples");

    // Hold out the last quarter of samples for reported validation accuracy.
    const int n = static_cast<int>(mi.files.size());
    const int n_train = std::max(1, n - std::max(1, n / 4));
    MarkerIndex train_mi, val_mi;
    for (int i = 0; i < n; ++i) {
        MarkerIndex& dst = i < n_train ? train_mi : val_mi;
        dst.files.push_back(mi.files[i]);
        dst.pos.push_back(mi.pos[i]);
        dst.label.push_back(mi.label[i]);
    }

    std::string digest = config_digest(cfg);
    json summary = {{"config_digest", digest}, {"layers", json::array()}};
    for (int l = 0; l < cfg.model.n_layers; ++l) {
        ProbeDataset train_ds = gather_probe_dataset(train_mi, l);
        ProbeDataset val_ds = gather_probe_dataset(val_mi, l);
        Probe probe = train_probe(train_ds, l, cfg.probe);
        double acc = eval_probe(probe, val_ds);
        save_probe(probe, p.probe(l), digest);
        summary["layers"].push_back({{"layer", l},
                                     {"val_accuracy", acc},
                                     {"train_rows", train_ds.labels.size()},
                                     {"val_rows", val_ds.labels.size()}});
    }
    write_json(p.probe_summary(), summary);
    return "probe: trained " + std::to_string(cfg.model.n_layers) + " layer probes";
}

std::string stage_lens(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    json cap = require_json(p.capture_index(), "capture");
    Weights w = load_weights(p.model());

    // Mean distribution per layer at the first valid-attempt position,
    // accumulated one trace at a time to bound memory.
    const int L = cfg.model.n_layers;
    const int V = cfg.model.vocab_size;
    std::vector<std::vector<double>> mean(L, std::vector<double>(V, 0.0));
    int used = 0;
    for (const auto& e : cap.at("samples")) {
        int pos = -1;
        for (const auto& a : e.at("attempts")) {
            if (a.at("label") == 1) {
                pos = a.at("pos");
                break;
            }
        }
        if (pos < 0) continue;
        ActivationTrace tr = load_trace(e.at("file"));
        for (int l = 0; l < L; ++l) {
            Vector dist = logit_lens(w, tr, l, pos);
            for (int v = 0; v < V; ++v) mean[l][v] += dist[v];
        }
        ++used;
    }
    if (used == 0) throw VsError(ErrorKind::Data, "lens: no valid-attempt positions");

    const Tokenizer& tok = tokenizer();
    std::ofstream out(p.lens_report());
    if (!out) throw VsError(ErrorKind::Io, "cannot open " + p.lens_report());
    out << "# config_digest " << config_digest(cfg) << "\n";
    out << "layer\trank\ttoken\tmean_prob\n";
    for (int l = 0; l < L; ++l) {
        std::vector<int> idx(V);
        for (int v = 0; v < V; ++v) idx[v] = v;
        const int k = std::min(cfg.lens_top_k, V);
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
            if (mean[l][a] != mean[l][b]) return mean[l][a] > mean[l][b];
            return a < b;
        });
        for (int r = 0; r < k; ++r) {
            std::string piece = tok.piece(idx[r]);
            for (char& ch : piece)
                if (ch == '\n' || ch == '\t') ch = ' ';
            out << l << "\t" << r << "\t" << piece << "\t" << mean[l][idx[r]] / used
                << "\n";
        }
    }
    return "lens: aggregated " + std::to_string(used) + " samples";
}

std::string stage_glu_select(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    Weights w = load_weights(p.model());
    std::vector<Probe> probes = load_second_half_probes(cfg, p);

    GluSelection sel =
        select_top_k(w, probes, cfg.glu_k, cfg.model.n_layers / 2, cfg.model.n_layers);

    json jsel = {{"config_digest", config_digest(cfg)},
                 {"k", sel.k},
                 {"layer_begin", sel.layer_begin},
                 {"layer_end", sel.layer_end},
                 {"conflicts", sel.conflicts},
                 {"valid", json::array()},
                 {"invalid", json::array()},
                 {"neighbors", json::array()}};
    for (const GluPick& g : sel.valid)
        jsel["valid"].push_back({{"layer", g.id.layer}, {"row", g.id.row},
                                 {"similarity", g.similarity}});
    for (const GluPick& g : sel.invalid)
        jsel["invalid"].push_back({{"layer", g.id.layer}, {"row", g.id.row},
                                   {"similarity", g.similarity}});

    // Nearest-neighbor / antipode report for the strongest few vectors.
    std::vector<GluVectorId> top;
    for (size_t i = 0; i < sel.valid.size() && i < 5; ++i) top.push_back(sel.valid[i].id);
    for (size_t i = 0; i < sel.invalid.size() && i < 5; ++i)
        top.push_back(sel.invalid[i].id);
    AntipodalAudit audit = antipodal_audit(w, top, 8);
    const Tokenizer& tok = tokenizer();
    for (const AntipodeEntry& e : audit.entries) {
        json fw = json::array(), ap = json::array();
        for (const TokenNeighbor& t : e.forward)
            fw.push_back({{"token", tok.piece(t.token)}, {"similarity", t.similarity}});
        for (const TokenNeighbor& t : e.antipode)
            ap.push_back({{"token", tok.piece(t.token)}, {"similarity", t.similarity}});
        jsel["neighbors"].push_back(
            {{"id", e.id.str()}, {"forward", fw}, {"antipode", ap}});
    }
    jsel["silu_negative_bound"] = audit.max_abs_silu_negative;
    write_json(p.glu_selection(), jsel);
    return "glu-select: " + std::to_string(sel.valid.size()) + " valid / " +
           std::to_string(sel.invalid.size()) + " invalid vectors";
}

std::string stage_heads(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    json cap = require_json(p.capture_index(), "capture");
    std::vector<ActivationTrace> traces;
    std::vector<Transcript> transcripts;
    for (const auto& e : cap.at("samples")) {
        if (!e.at("full").get<bool>()) continue;
        ActivationTrace tr = load_trace(e.at("file"));
        transcripts.push_back(parse_transcript(tr.tokens));
        traces.push_back(std::move(tr));
    }
    if (traces.empty()) {
        throw VsError(ErrorKind::Dependency,
                      "heads: no attention traces (rerun `capture` with capture.full > 0)");
    }
    std::vector<PrevTokenHeadReport> reports =
        detect_prev_token_heads(traces, transcripts, cfg.head_threshold);

    json j = {{"config_digest", config_digest(cfg)},
              {"threshold", cfg.head_threshold},
              {"heads", json::array()}};
    int flagged = 0;
    for (const PrevTokenHeadReport& r : reports) {
        j["heads"].push_back({{"layer", r.head.layer},
                              {"head", r.head.head},
                              {"mass", r.mass},
                              {"samples", r.samples},
                              {"flagged", r.flagged}});
        flagged += r.flagged ? 1 : 0;
    }
    write_json(p.prev_heads(), j);
    return "heads: " + std::to_string(flagged) + " previous-token heads flagged";
}

std::string stage_score_heads(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    Weights w = load_weights(p.model());
    json prev = require_json(p.prev_heads(), "heads");
    json jsel = require_json(p.glu_selection(), "glu-select");

    std::vector<HeadId> candidates;
    std::vector<PrevTokenHeadReport> reports;
    for (const auto& e : prev.at("heads")) {
        PrevTokenHeadReport r;
        r.head = {e.at("layer"), e.at("head")};
        r.mass = e.at("mass");
        r.flagged = e.at("flagged");
        if (r.flagged) {
            candidates.push_back(r.head);
            reports.push_back(r);
        }
    }
    if (candidates.empty()) {
        throw VsError(ErrorKind::Data, "score-heads: no flagged previous-token heads");
    }

    GluSelection sel;
    for (const auto& e : jsel.at("valid"))
        sel.valid.push_back({{e.at("layer"), e.at("row")}, e.at("similarity")});
    std::vector<std::pair<Vector, Vector>> refs =
        glu_refs_from_selection(w, sel, cfg.eq8_refs);
    Probe best = load_best_probe(cfg, p);

    json j = {{"config_digest", config_digest(cfg)}, {"rankings", json::object()}};
    auto emit = [&](const std::vector<HeadScore>& scores) {
        json arr = json::array();
        for (const HeadScore& s : scores) {
            arr.push_back({{"layer", s.head.layer},
                           {"head", s.head.head},
                           {"score", s.score}});
        }
        j["rankings"][rank_method_name(scores.front().method)] = arr;
    };
    emit(rank_heads_eq8(w, candidates, refs));
    emit(rank_attention_density(reports));
    emit(rank_gate_up_similarity(w, candidates, refs));
    emit(rank_probe_similarity(w, candidates, best.valid_row()));
    emit(rank_composition(w, candidates, refs));
    write_json(p.head_rankings(), j);
    return "score-heads: ranked " + std::to_string(candidates.size()) + " heads";
}

std::string stage_search_subset(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    Weights w = load_weights(p.model());
    json rankings = require_json(p.head_rankings(), "score-heads");
    std::vector<HeadScore> ranked;
    for (const auto& e : rankings.at("rankings").at("eq8")) {
        ranked.push_back({{e.at("layer"), e.at("head")}, e.at("score"), RankMethod::Eq8});
    }

    std::vector<Instance> pool = load_eval_instances(p);
    std::vector<Instance> validated =
        filter_originally_validated(w, pool, cfg.intervene_max_new);
    if (static_cast<int>(validated.size()) < cfg.search_samples) {
        throw VsError(ErrorKind::Data,
                      "search-subset: only " + std::to_string(validated.size()) +
                          " originally-validated samples available");
    }
    std::vector<Instance> eval_set(validated.begin(),
                                   validated.begin() + cfg.search_samples);

    auto evaluate = [&](const std::vector<HeadId>& heads) {
        InterventionPlan plan;
        plan.name = "search";
        plan.heads = heads;
        InterventionReport rep = run_experiment(w, {plan}, eval_set,
                                                cfg.intervene_max_new, nullptr);
        return rep.plans[0].disable_rate();
    };
    SubsetSearchResult res = search_minimal_subset(ranked, evaluate, cfg.search_budget);

    json j = {{"config_digest", config_digest(cfg)},
              {"rate", res.rate},
              {"reached_full", res.reached_full},
              {"heads", json::array()},
              {"log", json::array()}};
    for (const HeadId& h : res.heads) j["heads"].push_back(head_to_json(h));
    for (const SubsetSearchStep& s : res.log) {
        json hs = json::array();
        for (const HeadId& h : s.heads) hs.push_back(head_to_json(h));
        j["log"].push_back({{"heads", hs}, {"rate", s.rate}});
    }
    write_json(p.subset(), j);
    std::ostringstream s;
    s << "search-subset: " << res.heads.size() << " heads, disable rate " << res.rate;
    return s.str();
}

std::string stage_intervene(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    Weights w = load_weights(p.model());
    json jsubset = require_json(p.subset(), "search-subset");
    json jsel = require_json(p.glu_selection(), "glu-select");
    json jprev = require_json(p.prev_heads(), "heads");

    InterventionPlan subset_plan;
    subset_plan.name = "head_subset";
    for (const auto& h : jsubset.at("heads")) subset_plan.heads.push_back(head_from_json(h));

    InterventionPlan prev_plan;
    prev_plan.name = "prev_heads_all";
    for (const auto& e : jprev.at("heads")) {
        if (e.at("flagged").get<bool>())
            prev_plan.heads.push_back({e.at("layer"), e.at("head")});
    }

    InterventionPlan glu_valid, glu_both;
    glu_valid.name = "glu_valid";
    glu_both.name = "glu_valid_invalid";
    for (const auto& e : jsel.at("valid")) {
        glu_valid.glu_vectors.push_back({e.at("layer"), e.at("row")});
        glu_both.glu_vectors.push_back({e.at("layer"), e.at("row")});
    }
    for (const auto& e : jsel.at("invalid"))
        glu_both.glu_vectors.push_back({e.at("layer"), e.at("row")});

    std::vector<Instance> pool = load_eval_instances(p);
    std::vector<Instance> validated =
        filter_originally_validated(w, pool, cfg.intervene_max_new);
    // The first search_samples validated instances were consumed by the
    // subset search; evaluate on fresh ones.
    int skip = std::min<int>(cfg.search_samples, static_cast<int>(validated.size()));
    if (static_cast<int>(validated.size()) - skip < cfg.intervene_samples) {
        throw VsError(ErrorKind::Data,
                      "intervene: only " + std::to_string(validated.size() - skip) +
                          " unused originally-validated samples available");
    }
    std::vector<Instance> eval_set(validated.begin() + skip,
                                   validated.begin() + skip + cfg.intervene_samples);

    BaselineSpec baseline;
    baseline.runs = cfg.baseline_runs;
    baseline.seed = cfg.seed ^ 0xBA5Eull;
    baseline.size = static_cast<int>(subset_plan.heads.size());
    InterventionReport rep =
        run_experiment(w, {subset_plan, prev_plan, glu_valid, glu_both}, eval_set,
                       cfg.intervene_max_new, &baseline, true);

    json j = {{"config_digest", config_digest(cfg)},
              {"plans", json::array()},
              {"baseline_runs", json::array()},
              {"baseline_mean_rate", rep.baseline_mean_rate}};
    for (const PlanReport& r : rep.plans) j["plans"].push_back(plan_report_json(r));
    for (const PlanReport& r : rep.baseline_runs)
        j["baseline_runs"].push_back(plan_report_json(r));
    write_json(p.intervention(), j);

    const Tokenizer& tok = tokenizer();
    std::ofstream ev(p.evidence());
    if (!ev) throw VsError(ErrorKind::Io, "cannot open " + p.evidence());
    for (const EvidenceEntry& e : rep.evidence) {
        json row = {{"plan", e.plan},
                    {"operands", e.instance.operands},
                    {"target", e.instance.target},
                    {"label", outcome_name(e.label)},
                    {"generated", tok.decode(e.generated)}};
        ev << row.dump() << "\n";
    }
    std::ostringstream s;
    s << "intervene: subset rate " << rep.plans[0].disable_rate() << ", baseline "
      << rep.baseline_mean_rate;
    return s.str();
}

std::string stage_steer(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    Weights w = load_weights(p.model());
    Probe probe = load_best_probe(cfg, p);
    std::vector<Instance> pool = load_eval_instances(p);
    const Tokenizer& tok = tokenizer();
    std::vector<int> layers = default_steer_layers(cfg.model.n_layers);

    const int n = std::min<int>(cfg.steer_samples, static_cast<int>(pool.size()));
    json samples = json::array();
    int flipped = 0;
    for (int i = 0; i < n; ++i) {
        std::vector<int> prompt = tok.encode(render_prompt(pool[i]));
        GenOptions g;
        g.eot_token = tok.eot_id();
        std::vector<int> base = generate(w, prompt, cfg.intervene_max_new, g);
        std::vector<int> steered =
            steer_generate(w, prompt, probe.valid_row(), layers, cfg.steer_alpha,
                           cfg.intervene_max_new, tok.eot_id());
        auto first_marker = [&](const std::vector<int>& gen) -> std::string {
            Transcript t = parse_transcript(gen);
            if (t.attempts.empty()) return "none";
            return t.attempts[0].marker == Marker::Valid ? "valid" : "invalid";
        };
        std::string mb = first_marker(base), ms = first_marker(steered);
        if (mb == "invalid" && ms == "valid") ++flipped;
        samples.push_back({{"target", pool[i].target},
                           {"baseline_first_marker", mb},
                           {"steered_first_marker", ms},
                           {"steered_text", tok.decode(
                                std::vector<int>(steered.begin() + prompt.size(),
                                                 steered.end()))}});
    }
    json j = {{"config_digest", config_digest(cfg)},
              {"alpha", cfg.steer_alpha},
              {"layers", layers},
              {"samples", samples},
              {"flipped_to_valid", flipped},
              {"n", n}};
    write_json(p.steer_report(), j);
    return "steer: " + std::to_string(flipped) + "/" + std::to_string(n) +
           " first markers flipped to valid";
}

std::string stage_transfer(const RunConfig& cfg) {
    Paths p{cfg.out_dir};
    require_file(p.model(), "train");
    Weights w = load_weights(p.model());
    const int d = cfg.model.d_model;
    const int V = cfg.model.vocab_size;

    // Orthogonal twin: the target model's embedding space is a seeded
    // rotation of the source's.
    Rng rng(cfg.seed ^ 0x707Aull);
    Matrix q(d, d);
    for (int i = 0; i < d; ++i) {
        Vector v(d);
        for (float& x : v) x = rng.gaussian();
        for (int j2 = 0; j2 < i; ++j2) {
            float proj = dot(q.row(j2), v.data(), d);
            axpy(v.data(), -proj, q.row(j2), d);
        }
        float n = norm2(v.data(), d);
        if (n < 1e-6f) throw VsError(ErrorKind::Numerical, "transfer: degenerate basis");
        for (int c = 0; c < d; ++c) q.at(i, c) = v[c] / n;
    }
    Matrix rotated(V, d);
    for (int t = 0; t < V; ++t) {
        for (int r = 0; r < d; ++r) rotated.at(t, r) = dot(q.row(r), w.embedding.row(t), d);
    }

    EmbeddingMap self = fit_map(w.embedding, w.embedding,
                                identity_pairing(V), cfg.transfer_sample, cfg.seed);
    double self_err = 0.0;
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < d; ++c) {
            double target = r == c ? 1.0 : 0.0;
            self_err = std::max(self_err, std::abs(self.t.at(r, c) - target));
        }
    }
    EmbeddingMap rot = fit_map(w.embedding, rotated, identity_pairing(V),
                               cfg.transfer_sample, cfg.seed);
    double rot_err = 0.0;
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < d; ++c) {
            rot_err = std::max(rot_err,
                               std::abs(static_cast<double>(rot.t.at(r, c)) - q.at(r, c)));
        }
    }
    save_map(rot, p.emb_map());
    write_json(p.transfer_report(),
               {{"config_digest", config_digest(cfg)},
                {"self_identity_max_err", self_err},
                {"self_residual", self.residual},
                {"rotation_max_err", rot_err},
                {"rotation_residual", rot.residual},
                {"n_pairs", rot.n_pairs}});
    std::ostringstream s;
    s << "transfer: identity err " << self_err << ", rotation err " << rot_err;
    return s.str();
}

std::string stage_report(const RunConfig& cfg, bool force) {
    Paths p{cfg.out_dir};
    std::string digest = config_digest(cfg);
    json report = {{"config_digest", digest}, {"artifacts", json::object()}};

    struct Item {
        const char* key;
        std::string path;
        const char* producer;
        bool required;
    };
    std::vector<Item> items = {
        {"train", p.train_summary(), "train", true},
        {"probe", p.probe_summary(), "probe", true},
        {"glu_selection", p.glu_selection(), "glu-select", true},
        {"prev_heads", p.prev_heads(), "heads", true},
        {"head_rankings", p.head_rankings(), "score-heads", false},
        {"subset", p.subset(), "search-subset", true},
        {"intervention", p.intervention(), "intervene", true},
        {"steer", p.steer_report(), "steer", false},
        {"transfer", p.transfer_report(), "transfer", false},
    };
    for (const Item& it : items) {
        if (!fs::exists(it.path)) {
            if (it.required) {
                throw VsError(ErrorKind::Dependency, "missing artifact " + it.path +
                                                         " (run `" +
                                                         std::string(it.producer) +
                                                         "` first)");
            }
            continue;
        }
        json j = require_json(it.path, it.producer);
        std::string art_digest = j.value("config_digest", "");
        if (art_digest != digest && !force) {
            throw VsError(ErrorKind::Config,
                          "artifact " + it.path + " was produced under config digest " +
                              art_digest + " but the current config digest is " + digest +
                              "; rerun the pipeline or pass --force");
        }
        report["artifacts"][it.key] = j;
    }
    write_json(p.report(), report);
    return "report: written to " + p.report();
}

}  // namespace verifscope
