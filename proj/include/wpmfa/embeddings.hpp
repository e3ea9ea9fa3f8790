#pragma once

// Embedding file formats: plain text ("utterance_id v1 v2 ... vN", one per
// line) and the checkpoint tensor container keyed by utterance id.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wpmfa/checkpoint.hpp"

namespace wpmfa {

using EmbeddingMap = std::map<std::string, std::vector<double>>;

inline void write_embeddings_text(const std::string& path, const EmbeddingMap& embs) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write embedding file: " + path);
    f.precision(17);
    for (const auto& [id, v] : embs) {
        f << id;
        for (double x : v) f << " " << x;
        f << "\n";
    }
}

inline EmbeddingMap read_embeddings_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open embedding file: " + path);
    EmbeddingMap out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string id;
        is >> id;
        std::vector<double> v;
        double x;
        while (is >> x) v.push_back(x);
        if (v.empty()) throw std::runtime_error("malformed embedding line: " + line);
        out[id] = std::move(v);
    }
    return out;
}

inline void write_embeddings_binary(const std::string& path, const EmbeddingMap& embs) {
    ParamStore ps;
    for (const auto& [id, v] : embs) ps.add(id, Tensor::from(v, {v.size()}));
    save_checkpoint(path, ps, "format=embeddings\n");
}

inline EmbeddingMap read_embeddings_binary(const std::string& path) {
    LoadedCheckpoint ck = load_checkpoint(path);
    EmbeddingMap out;
    for (const auto& [id, t] : ck.params) out[id] = t.data();
    return out;
}

}  // namespace wpmfa
