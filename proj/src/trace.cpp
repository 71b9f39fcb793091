#include "verifscope/trace.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace verifscope {

ActivationTrace capture(const Weights& w, const std::vector<int>& tokens, bool hidden,
                        bool attn, bool glu) {
    ActivationTrace tr;
    FwdOptions opts;
    opts.trace = &tr;
    opts.cap_hidden = hidden;
    opts.cap_attn = attn;
    opts.cap_glu = glu;
    forward(w, tokens, opts);
    return tr;
}

void save_trace(const ActivationTrace& tr, const std::string& path,
                const std::string& config_digest) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw VsError(ErrorKind::Io, "save_trace: cannot open " + path);
    out << "VSTRACE1\n";
    out << "endian little\n";
    if (!config_digest.empty()) out << "digest " << config_digest << "\n";
    out << "tokens";
    for (int t : tr.tokens) out << " " << t;
    out << "\n";

    struct Chunk {
        std::string name;
        const Matrix* m;
    };
    std::vector<Chunk> chunks;
    for (size_t l = 0; l < tr.hidden.size(); ++l)
        chunks.push_back({"layer" + std::to_string(l) + ".hidden", &tr.hidden[l]});
    for (size_t l = 0; l < tr.attn.size(); ++l)
        for (size_t h = 0; h < tr.attn[l].size(); ++h)
            chunks.push_back({"layer" + std::to_string(l) + ".attn" + std::to_string(h),
                              &tr.attn[l][h]});
    for (size_t l = 0; l < tr.glu_m.size(); ++l)
        chunks.push_back({"layer" + std::to_string(l) + ".glu", &tr.glu_m[l]});

    size_t offset = 0;
    for (const Chunk& c : chunks) {
        out << "chunk " << c.name << " " << c.m->rows << " " << c.m->cols << " f32 "
            << offset << "\n";
        offset += c.m->data.size() * sizeof(float);
    }
    out << "blob " << offset << "\n";
    for (const Chunk& c : chunks) {
        out.write(reinterpret_cast<const char*>(c.m->data.data()),
                  static_cast<std::streamsize>(c.m->data.size() * sizeof(float)));
    }
    if (!out) throw VsError(ErrorKind::Io, "save_trace: write failed for " + path);
}

ActivationTrace load_trace(const std::string& path, std::string* config_digest,
                           int only_layer) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VsError(ErrorKind::Dependency, "load_trace: missing " + path);
    std::string line;
    if (!std::getline(in, line) || line != "VSTRACE1") {
        throw VsError(ErrorKind::Io, "load_trace: bad magic in " + path);
    }
    if (!std::getline(in, line) || line != "endian little") {
        throw VsError(ErrorKind::Io, "load_trace: unsupported endianness marker");
    }

    ActivationTrace tr;
    struct Chunk {
        std::string name;
        int rows, cols, layer, head;  // head -1 for hidden/glu
        char field;                   // 'h', 'a', 'g'
        size_t offset;
    };
    std::vector<Chunk> chunks;
    size_t blob_size = 0;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string kind;
        ss >> kind;
        if (kind == "digest") {
            std::string dg;
            ss >> dg;
            if (config_digest) *config_digest = dg;
        } else if (kind == "tokens") {
            int t;
            while (ss >> t) tr.tokens.push_back(t);
        } else if (kind == "chunk") {
            Chunk c;
            std::string name, dtype;
            ss >> name >> c.rows >> c.cols >> dtype >> c.offset;
            if (!ss || dtype != "f32" || name.rfind("layer", 0) != 0) {
                throw VsError(ErrorKind::Io, "load_trace: bad chunk line: " + line);
            }
            size_t dotpos = name.find('.');
            if (dotpos == std::string::npos) {
                throw VsError(ErrorKind::Io, "load_trace: bad chunk name " + name);
            }
            c.name = name;
            c.layer = std::stoi(name.substr(5, dotpos - 5));
            std::string field = name.substr(dotpos + 1);
            c.head = -1;
            if (field == "hidden") {
                c.field = 'h';
            } else if (field == "glu") {
                c.field = 'g';
            } else if (field.rfind("attn", 0) == 0) {
                c.field = 'a';
                c.head = std::stoi(field.substr(4));
            } else {
                throw VsError(ErrorKind::Io, "load_trace: unknown chunk field in " + name);
            }
            chunks.push_back(c);
        } else if (kind == "blob") {
            ss >> blob_size;
            break;
        } else {
            throw VsError(ErrorKind::Io, "load_trace: unknown manifest line: " + line);
        }
    }
    std::streampos data_start = in.tellg();
    if (data_start < 0) throw VsError(ErrorKind::Io, "load_trace: truncated manifest");

    int max_layer = -1, max_head = -1;
    for (const Chunk& c : chunks) {
        max_layer = std::max(max_layer, c.layer);
        max_head = std::max(max_head, c.head);
    }
    for (const Chunk& c : chunks) {
        if (c.field == 'h') tr.has_hidden = true;
        if (c.field == 'a') tr.has_attn = true;
        if (c.field == 'g') tr.has_glu = true;
    }
    if (tr.has_hidden) tr.hidden.assign(max_layer + 1, Matrix());
    if (tr.has_attn)
        tr.attn.assign(max_layer + 1, std::vector<Matrix>(max_head + 1));
    if (tr.has_glu) tr.glu_m.assign(max_layer + 1, Matrix());

    for (const Chunk& c : chunks) {
        if (only_layer >= 0 && c.layer != only_layer) continue;
        Matrix m(c.rows, c.cols);
        in.seekg(data_start + static_cast<std::streamoff>(c.offset));
        in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size() * sizeof(float)));
        if (static_cast<size_t>(in.gcount()) != m.data.size() * sizeof(float)) {
            throw VsError(ErrorKind::Io,
                          "load_trace: truncated chunk " + c.name + " in " + path);
        }
        for (float v : m.data) {
            if (!std::isfinite(v)) {
                throw VsError(ErrorKind::Io, "load_trace: corrupt chunk " + c.name);
            }
        }
        if (c.field == 'h') {
            tr.hidden[c.layer] = std::move(m);
        } else if (c.field == 'a') {
            tr.attn[c.layer][c.head] = std::move(m);
        } else {
            tr.glu_m[c.layer] = std::move(m);
        }
    }
    return tr;
}

ProbeDataset build_probe_dataset(const std::vector<ActivationTrace>& traces,
                                 const std::vector<int>& positions,
                                 const std::vector<int>& labels, int layer) {
    if (traces.size() != positions.size() || traces.size() != labels.size()) {
        throw VsError(ErrorKind::Argument, "build_probe_dataset: size mismatch");
    }
    if (traces.empty()) {
        throw VsError(ErrorKind::Data, "build_probe_dataset: no traces");
    }
    ProbeDataset ds;
    for (size_t i = 0; i < traces.size(); ++i) {
        const ActivationTrace& tr = traces[i];
        if (layer < 0 || layer >= static_cast<int>(tr.hidden.size()) ||
            tr.hidden[layer].rows == 0) {
            throw VsError(ErrorKind::Data, "build_probe_dataset: layer " +
                                               std::to_string(layer) +
                                               " not present in trace " +
                                               std::to_string(i));
        }
        const Matrix& h = tr.hidden[layer];
        int pos = positions[i];
        if (pos < 0 || pos >= h.rows) {
            throw VsError(ErrorKind::Data, "build_probe_dataset: position out of range");
        }
        if (ds.x.cols == 0) ds.x = Matrix(static_cast<int>(traces.size()), h.cols);
        std::memcpy(ds.x.row(static_cast<int>(i)), h.row(pos), sizeof(float) * h.cols);
        ds.labels.push_back(labels[i]);
    }
    return ds;
}

}  // namespace verifscope
