#pragma once

// Flat key=value configuration with include support, plus the experiment
// config binding every module's knobs. Serialization is sorted so a
// config round-trips losslessly through its text form.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wpmfa/audio.hpp"
#include "wpmfa/loss.hpp"
#include "wpmfa/lora.hpp"
#include "wpmfa/model.hpp"

namespace wpmfa {

class KvConfig {
public:
    static KvConfig parse_text(const std::string& text) {
        KvConfig c;
        c.absorb(text, "");
        return c;
    }

    static KvConfig parse_file(const std::string& path) {
        KvConfig c;
        c.absorb_file(path);
        return c;
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? dflt : it->second;
    }
    std::string require_str(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw std::runtime_error("config: missing required key '" + key + "'");
        return it->second;
    }
    double get_num(const std::string& key, double dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try {
            std::size_t pos;
            double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("");
            return v;
        } catch (...) {
            throw std::runtime_error("config: key '" + key + "' is not numeric: " + it->second);
        }
    }
    bool get_bool(const std::string& key, bool dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw std::runtime_error("config: key '" + key + "' is not boolean: " + it->second);
    }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set_num(const std::string& key, double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        kv_[key] = os.str();
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [k, v] : kv_) os << k << "=" << v << "\n";
        return os.str();
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    void absorb_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open config file: " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        absorb(ss.str(), std::filesystem::path(path).parent_path().string());
    }

    void absorb(const std::string& text, const std::string& base_dir) {
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            if (line.rfind("include ", 0) == 0) {
                std::filesystem::path p = trim(line.substr(8));
                if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
                absorb_file(p.string());
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config: malformed line: " + line);
            kv_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
    }

    std::map<std::string, std::string> kv_;
};

struct TrainSchedule {
    std::size_t stage1_epochs = 4;  // encoder frozen
    std::size_t stage2_epochs = 8;
    double lr_stage1 = 1e-3;
    double lr_stage2 = 1e-5;
    double weight_decay = 0.0;
    std::size_t batch_size = 16;
    double crop_seconds = 2.0;

    void validate() const {
        if (lr_stage1 <= 0.0 || lr_stage2 <= 0.0)
            throw std::invalid_argument("schedule: learning rates must be positive");
        if (batch_size == 0) throw std::invalid_argument("schedule: batch size must be >= 1");
        if (crop_seconds <= 0.0)
            throw std::invalid_argument("schedule: crop length must be positive");
    }
};

struct AugPolicy {
    std::vector<std::string> noise_paths;
    double snr_min_db = 0.0;
    double snr_max_db = 15.0;
    std::vector<double> speed_factors = {1.0};
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    ModelConfig model;
    AamConfig aam;
    TrainSchedule schedule;
    bool lora_enabled = false;
    LoraConfig lora;
    MelConfig mel;
    AugPolicy aug;
    std::string train_manifest;
    std::string noise_manifest;
    std::string trial_list;
    std::string cohort_manifest;
    std::string out_dir = ".";

    static ExperimentConfig from_kv(const KvConfig& kv) {
        ExperimentConfig c;
        c.seed = static_cast<std::uint64_t>(kv.get_num("seed", 42));
        auto& e = c.model.encoder;
        e.n_mels = static_cast<std::size_t>(kv.get_num("encoder.n_mels", 80));
        e.d_model = static_cast<std::size_t>(kv.get_num("encoder.d_model", 64));
        e.n_blocks = static_cast<std::size_t>(kv.get_num("encoder.n_blocks", 8));
        e.n_heads = static_cast<std::size_t>(kv.get_num("encoder.n_heads", 4));
        e.mlp_ratio = static_cast<std::size_t>(kv.get_num("encoder.mlp_ratio", 4));
        c.model.range.s = static_cast<std::size_t>(kv.get_num("range.s", 1));
        c.model.range.e =
            static_cast<std::size_t>(kv.get_num("range.e", static_cast<double>(e.n_blocks)));
        c.model.head.asp_bottleneck =
            static_cast<std::size_t>(kv.get_num("head.asp_bottleneck", 128));
        c.model.head.emb_dim = static_cast<std::size_t>(kv.get_num("head.emb_dim", 192));
        c.aam.margin = kv.get_num("aam.margin", 0.2);
        c.aam.scale = kv.get_num("aam.scale", 30.0);
        c.schedule.stage1_epochs = static_cast<std::size_t>(kv.get_num("train.stage1_epochs", 4));
        c.schedule.stage2_epochs = static_cast<std::size_t>(kv.get_num("train.stage2_epochs", 8));
        c.schedule.lr_stage1 = kv.get_num("train.lr_stage1", 1e-3);
        c.schedule.lr_stage2 = kv.get_num("train.lr_stage2", 1e-5);
        c.schedule.weight_decay = kv.get_num("train.weight_decay", 0.0);
        c.schedule.batch_size = static_cast<std::size_t>(kv.get_num("train.batch_size", 16));
        c.schedule.crop_seconds = kv.get_num("train.crop_seconds", 2.0);
        c.lora_enabled = kv.get_bool("lora.enabled", false);
        c.lora.rank = static_cast<std::size_t>(kv.get_num("lora.rank", 16));
        c.lora.init_std = kv.get_num("lora.init_std", 0.02);
        c.mel.n_mels = e.n_mels;
        c.aug.snr_min_db = kv.get_num("aug.snr_min_db", 0.0);
        c.aug.snr_max_db = kv.get_num("aug.snr_max_db", 15.0);
        if (kv.get_bool("aug.speed_perturb", false))
            c.aug.speed_factors = {0.9, 1.0, 1.1};
        c.train_manifest = kv.get_str("paths.train_manifest", "");
        c.noise_manifest = kv.get_str("paths.noise_manifest", "");
        c.trial_list = kv.get_str("paths.trial_list", "");
        c.cohort_manifest = kv.get_str("paths.cohort_manifest", "");
        c.out_dir = kv.get_str("paths.out_dir", ".");
        return c;
    }

    // Fully resolved form: every effective value, including defaults.
    KvConfig to_kv() const {
        KvConfig kv;
        kv.set_num("seed", static_cast<double>(seed));
        kv.set_num("encoder.n_mels", static_cast<double>(model.encoder.n_mels));
        kv.set_num("encoder.d_model", static_cast<double>(model.encoder.d_model));
        kv.set_num("encoder.n_blocks", static_cast<double>(model.encoder.n_blocks));
        kv.set_num("encoder.n_heads", static_cast<double>(model.encoder.n_heads));
        kv.set_num("encoder.mlp_ratio", static_cast<double>(model.encoder.mlp_ratio));
        kv.set_num("range.s", static_cast<double>(model.range.s));
        kv.set_num("range.e", static_cast<double>(model.range.e));
        kv.set_num("head.asp_bottleneck", static_cast<double>(model.head.asp_bottleneck));
        kv.set_num("head.emb_dim", static_cast<double>(model.head.emb_dim));
        kv.set_num("aam.margin", aam.margin);
        kv.set_num("aam.scale", aam.scale);
        kv.set_num("train.stage1_epochs", static_cast<double>(schedule.stage1_epochs));
        kv.set_num("train.stage2_epochs", static_cast<double>(schedule.stage2_epochs));
        kv.set_num("train.lr_stage1", schedule.lr_stage1);
        kv.set_num("train.lr_stage2", schedule.lr_stage2);
        kv.set_num("train.weight_decay", schedule.weight_decay);
        kv.set_num("train.batch_size", static_cast<double>(schedule.batch_size));
        kv.set_num("train.crop_seconds", schedule.crop_seconds);
        kv.set("lora.enabled", lora_enabled ? "true" : "false");
        kv.set_num("lora.rank", static_cast<double>(lora.rank));
        kv.set_num("lora.init_std", lora.init_std);
        kv.set_num("aug.snr_min_db", aug.snr_min_db);
        kv.set_num("aug.snr_max_db", aug.snr_max_db);
        kv.set("aug.speed_perturb", aug.speed_factors.size() > 1 ? "true" : "false");
        kv.set("paths.train_manifest", train_manifest);
        kv.set("paths.noise_manifest", noise_manifest);
        kv.set("paths.trial_list", trial_list);
        kv.set("paths.cohort_manifest", cohort_manifest);
        kv.set("paths.out_dir", out_dir);
        return kv;
    }
};

}  // namespace wpmfa
