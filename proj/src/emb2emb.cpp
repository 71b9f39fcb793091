#include "verifscope/emb2emb.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace verifscope {

std::vector<std::pair<int, int>> identity_pairing(int vocab_size) {
    std::vector<std::pair<int, int>> p(vocab_size);
    for (int i = 0; i < vocab_size; ++i) p[i] = {i, i};
    return p;
}

EmbeddingMap fit_map(const Matrix& source_emb, const Matrix& target_emb,
                     const std::vector<std::pair<int, int>>& pairing, int n_sample,
                     uint64_t seed) {
    if (pairing.empty()) throw VsError(ErrorKind::Argument, "fit_map: empty pairing");
    const int ds = source_emb.cols;
    const int dt = target_emb.cols;

    std::vector<int> idx(pairing.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    int n = static_cast<int>(pairing.size());
    if (n_sample <= 0) n_sample = 100000;
    if (n_sample < n) {
        Rng rng(seed);
        rng.shuffle(idx);
        idx.resize(n_sample);
        std::sort(idx.begin(), idx.end());
        n = n_sample;
    }

    Matrix s(n, ds), g(n, dt);
    std::string pair_text;
    for (int i = 0; i < n; ++i) {
        auto [si, ti] = pairing[idx[i]];
        if (si < 0 || si >= source_emb.rows || ti < 0 || ti >= target_emb.rows) {
            throw VsError(ErrorKind::Argument, "fit_map: pairing index out of range");
        }
        std::memcpy(s.row(i), source_emb.row(si), sizeof(float) * ds);
        std::memcpy(g.row(i), target_emb.row(ti), sizeof(float) * dt);
        pair_text += std::to_string(si) + ":" + std::to_string(ti) + ",";
    }

    EmbeddingMap map;
    map.n_pairs = n;
    map.rank_warning = n < ds;
    map.pairing_digest = digest_hex(pair_text);
    map.t = least_squares_fit(s, g, map.rank_warning ? 1e-3f : 1e-6f);

    double err = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int r = 0; r < dt; ++r) {
            double pred = dot(map.t.row(r), s.row(i), ds);
            double diff = pred - g.at(i, r);
            err += diff * diff;
        }
    }
    map.residual = err / (static_cast<double>(n) * dt);
    return map;
}

Vector transfer_vector(const EmbeddingMap& map, const Vector& v) {
    if (static_cast<int>(v.size()) != map.t.cols) {
        throw VsError(ErrorKind::Shape, "transfer_vector: dim mismatch");
    }
    Vector out(map.t.rows);
    for (int r = 0; r < map.t.rows; ++r) out[r] = dot(map.t.row(r), v.data(), map.t.cols);
    return out;
}

void save_map(const EmbeddingMap& map, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw VsError(ErrorKind::Io, "save_map: cannot open " + path);
    out << "VSMAP1\n";
    out << "endian little\n";
    out << "shape " << map.t.rows << " " << map.t.cols << "\n";
    out << "residual " << map.residual << "\n";
    out << "pairs " << map.n_pairs << " " << (map.rank_warning ? 1 : 0) << " "
        << map.pairing_digest << "\n";
    out.write(reinterpret_cast<const char*>(map.t.data.data()),
              static_cast<std::streamsize>(map.t.data.size() * sizeof(float)));
    if (!out) throw VsError(ErrorKind::Io, "save_map: write failed for " + path);
}

EmbeddingMap load_map(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VsError(ErrorKind::Dependency, "load_map: missing " + path);
    std::string line;
    if (!std::getline(in, line) || line != "VSMAP1") {
        throw VsError(ErrorKind::Io, "load_map: bad magic in " + path);
    }
    if (!std::getline(in, line) || line != "endian little") {
        throw VsError(ErrorKind::Io, "load_map: unsupported endianness marker");
    }
    EmbeddingMap map;
    int rows = 0, cols = 0, warn = 0;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        std::string kind;
        ss >> kind;
        if (kind == "shape") {
            ss >> rows >> cols;
        } else if (kind == "residual") {
            ss >> map.residual;
        } else if (kind == "pairs") {
            ss >> map.n_pairs >> warn >> map.pairing_digest;
            break;
        } else {
            throw VsError(ErrorKind::Io, "load_map: unknown manifest line: " + line);
        }
    }
    map.rank_warning = warn != 0;
    if (rows < 1 || cols < 1) throw VsError(ErrorKind::Io, "load_map: bad shape");
    map.t = Matrix(rows, cols);
    in.read(reinterpret_cast<char*>(map.t.data.data()),
            static_cast<std::streamsize>(map.t.data.size() * sizeof(float)));
    if (static_cast<size_t>(in.gcount()) != map.t.data.size() * sizeof(float)) {
        throw VsError(ErrorKind::Io, "load_map: truncated data in " + path);
    }
    return map;
}

}  // namespace verifscope
