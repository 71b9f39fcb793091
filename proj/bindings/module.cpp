// Python bindings for the core operations: tokenization, puzzle generation,
// model forward/generation, intervention, probing, and embedding maps.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "verifscope/attn_analysis.hpp"
#include "verifscope/emb2emb.hpp"
#include "verifscope/intervene.hpp"
#include "verifscope/pipeline.hpp"
#include "verifscope/tokenizer.hpp"
#include "verifscope/trace.hpp"

namespace py = pybind11;
using namespace verifscope;

namespace {

py::array_t<float> to_numpy(const Matrix& m) {
    py::array_t<float> out({m.rows, m.cols});
    std::memcpy(out.mutable_data(), m.data.data(), m.data.size() * sizeof(float));
    return out;
}

Matrix from_numpy(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw VsError(ErrorKind::Shape, "expected a 2-d array");
    Matrix m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::memcpy(m.data.data(), a.data(), m.data.size() * sizeof(float));
    return m;
}

}  // namespace

PYBIND11_MODULE(_verifscope, mod) {
    mod.doc() = "toy transformer self-verification analysis core";

    py::register_exception<VsError>(mod, "VsError");

    py::class_<ModelConfig>(mod, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("n_heads", &ModelConfig::n_heads)
        .def_readwrite("d_head", &ModelConfig::d_head)
        .def_readwrite("d_glu", &ModelConfig::d_glu)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len);

    py::class_<Instance>(mod, "Instance")
        .def(py::init<>())
        .def_readwrite("operands", &Instance::operands)
        .def_readwrite("target", &Instance::target);

    py::class_<HeadId>(mod, "HeadId")
        .def(py::init([](int layer, int head) { return HeadId{layer, head}; }),
             py::arg("layer"), py::arg("head"))
        .def_readwrite("layer", &HeadId::layer)
        .def_readwrite("head", &HeadId::head)
        .def("__repr__", &HeadId::str);

    py::class_<Weights>(mod, "Weights")
        .def_property_readonly("config", [](const Weights& w) { return w.cfg; })
        .def_property_readonly("embedding",
                               [](const Weights& w) { return to_numpy(w.embedding); })
        .def_static(
            "random",
            [](const ModelConfig& cfg, uint64_t seed) {
                ModelConfig c = cfg;
                if (c.vocab_size == 0) c.vocab_size = tokenizer().size();
                Rng rng(seed);
                return Weights::init_random(c, rng);
            },
            py::arg("config"), py::arg("seed") = 1)
        .def_static("load", [](const std::string& path) { return load_weights(path); })
        .def("save",
             [](const Weights& w, const std::string& path) { save_weights(w, path); });

    mod.def("vocab_size", [] { return tokenizer().size(); });
    mod.def("encode", [](const std::string& s) { return tokenizer().encode(s); });
    mod.def("decode", [](const std::vector<int>& ids) { return tokenizer().decode(ids); });
    mod.def("piece", [](int id) { return tokenizer().piece(id); });
    mod.def("eot_token", [] { return tokenizer().eot_id(); });

    mod.def(
        "generate_instance",
        [](uint64_t seed, int n_operands) {
            Rng rng(seed);
            return generate_instance(rng, n_operands);
        },
        py::arg("seed"), py::arg("n_operands") = 3);
    mod.def("render_prompt", &render_prompt);
    mod.def("brute_force_solve", &brute_force_solve);
    mod.def("evaluate_left_to_right", &evaluate_left_to_right);
    mod.def(
        "synthesize_transcript",
        [](const Instance& inst, uint64_t seed, int n_failures) {
            Rng rng(seed);
            Transcript t = synthesize_transcript(inst, rng, n_failures);
            return py::make_tuple(t.tokens, t.prompt_len);
        },
        py::arg("instance"), py::arg("seed"), py::arg("n_failures") = 0);
    mod.def("parse_transcript", [](const std::vector<int>& tokens) {
        Transcript t = parse_transcript(tokens);
        py::dict d;
        d["target"] = t.target;
        d["operands"] = t.operands;
        d["out_of_range"] = t.out_of_range;
        d["answer"] = t.answer ? py::cast(*t.answer) : py::none();
        py::list attempts;
        for (const Attempt& a : t.attempts) {
            py::dict e;
            e["expression"] = a.expression;
            e["valid_marker"] = a.marker == Marker::Valid;
            e["value"] = a.evaluable ? py::cast(a.value) : py::none();
            e["marker_pos"] = a.marker_pos;
            attempts.append(e);
        }
        d["attempts"] = attempts;
        return d;
    });

    mod.def("forward", [](const Weights& w, const std::vector<int>& tokens) {
        return to_numpy(forward(w, tokens));
    });
    mod.def(
        "generate",
        [](const Weights& w, const std::vector<int>& prompt, int max_new) {
            GenOptions g;
            g.eot_token = tokenizer().eot_id();
            return generate(w, prompt, max_new, g);
        },
        py::arg("weights"), py::arg("prompt"), py::arg("max_new") = 160);
    mod.def(
        "ablated_generate",
        [](const Weights& w, const std::vector<HeadId>& heads,
           const std::vector<int>& prompt, int max_new, bool gate_at_markers) {
            InterventionPlan plan;
            plan.name = "py";
            plan.heads = heads;
            plan.gating = gate_at_markers ? Gating::AtAttemptMarkers : Gating::AlwaysOn;
            return intervened_generate(w, plan, prompt, max_new);
        },
        py::arg("weights"), py::arg("heads"), py::arg("prompt"),
        py::arg("max_new") = 160, py::arg("gate_at_markers") = true);
    mod.def(
        "steer_generate",
        [](const Weights& w, const std::vector<int>& prompt,
           const py::array_t<float>& direction, const std::vector<int>& layers,
           float alpha, int max_new) {
            Vector dir(direction.data(), direction.data() + direction.size());
            return steer_generate(w, prompt, dir, layers, alpha, max_new,
                                  tokenizer().eot_id());
        },
        py::arg("weights"), py::arg("prompt"), py::arg("direction"), py::arg("layers"),
        py::arg("alpha"), py::arg("max_new") = 160);

    mod.def("capture_hidden", [](const Weights& w, const std::vector<int>& tokens) {
        ActivationTrace tr = capture(w, tokens, true, false, false);
        py::list layers;
        for (const Matrix& h : tr.hidden) layers.append(to_numpy(h));
        return layers;
    });
    mod.def("ov_circuit", [](const Weights& w, const HeadId& h) {
        return to_numpy(ov_circuit(w, h));
    });
    mod.def("qk_circuit", [](const Weights& w, const HeadId& h) {
        return to_numpy(qk_circuit(w, h));
    });
    mod.def("composition_score", [](const py::array_t<float>& a, const py::array_t<float>& b) {
        return composition_score(from_numpy(a), from_numpy(b));
    });

    mod.def(
        "train_probe",
        [](const py::array_t<float>& x, const std::vector<int>& labels, int layer,
           uint64_t seed) {
            ProbeDataset ds;
            ds.x = from_numpy(x);
            ds.labels = labels;
            ProbeHyper hp;
            hp.seed = seed;
            Probe p = train_probe(ds, layer, hp);
            return to_numpy(p.w);
        },
        py::arg("states"), py::arg("labels"), py::arg("layer") = 0, py::arg("seed") = 1);
    mod.def(
        "eval_probe",
        [](const py::array_t<float>& w, int layer, const py::array_t<float>& x,
           const std::vector<int>& labels) {
            Probe p;
            p.layer = layer;
            p.w = from_numpy(w);
            ProbeDataset ds;
            ds.x = from_numpy(x);
            ds.labels = labels;
            return eval_probe(p, ds);
        },
        py::arg("probe"), py::arg("layer"), py::arg("states"), py::arg("labels"));

    mod.def(
        "fit_embedding_map",
        [](const py::array_t<float>& src, const py::array_t<float>& dst, int n_sample,
           uint64_t seed) {
            Matrix s = from_numpy(src), d = from_numpy(dst);
            EmbeddingMap m = fit_map(s, d, identity_pairing(s.rows), n_sample, seed);
            return py::make_tuple(to_numpy(m.t), m.residual, m.rank_warning);
        },
        py::arg("source"), py::arg("target"), py::arg("n_sample") = 0,
        py::arg("seed") = 1);

    mod.def("default_config_json", [] { return run_config_json(default_run_config()); });
}
