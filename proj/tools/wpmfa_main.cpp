// wpmfa command-line tool: featurize / train / embed / eval / sweep /
// count-params / merge-lora / gen-corpus.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric divergence.

#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <thread>

#include "wpmfa/checkpoint.hpp"
#include "wpmfa/config.hpp"
#include "wpmfa/embeddings.hpp"
#include "wpmfa/model.hpp"
#include "wpmfa/scoring.hpp"
#include "wpmfa/synthetic.hpp"
#include "wpmfa/training.hpp"

namespace fs = std::filesystem;
using namespace wpmfa;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

ExperimentConfig load_config(const std::string& path, std::int64_t seed_override) {
    ExperimentConfig cfg = ExperimentConfig::from_kv(KvConfig::parse_file(path));
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    return cfg;
}

void echo_config(const ExperimentConfig& cfg) {
    std::cout << "# resolved config\n" << cfg.to_kv().serialize();
}

std::vector<LayerRange> parse_ranges(const std::string& spec) {
    std::vector<LayerRange> out;
    std::istringstream is(spec);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        const auto dash = tok.find('-');
        if (dash == std::string::npos)
            throw std::runtime_error("bad range '" + tok + "' (expected s-e)");
        out.push_back({static_cast<std::size_t>(std::stoul(tok.substr(0, dash))),
                       static_cast<std::size_t>(std::stoul(tok.substr(dash + 1)))});
    }
    return out;
}

// Structural keys that must agree between a checkpoint and the runtime config.
const char* kStructuralKeys[] = {"encoder.n_mels", "encoder.d_model", "encoder.n_blocks",
                                 "encoder.n_heads", "encoder.mlp_ratio", "range.s",
                                 "range.e", "head.asp_bottleneck", "head.emb_dim"};

void check_checkpoint_config(const std::string& snapshot, const ExperimentConfig& cfg) {
    if (snapshot.empty()) return;
    KvConfig saved = KvConfig::parse_text(snapshot);
    KvConfig now = cfg.to_kv();
    for (const char* key : kStructuralKeys) {
        if (!saved.has(key)) continue;
        if (saved.get_str(key, "") != now.get_str(key, ""))
            throw std::runtime_error("checkpoint/config mismatch on " + std::string(key) +
                                     ": checkpoint has " + saved.get_str(key, "") +
                                     ", runtime has " + now.get_str(key, ""));
    }
}

int cmd_featurize(const std::string& config_path, const std::string& manifest_path,
                  const std::string& out_dir, int workers, std::int64_t seed) {
    ExperimentConfig cfg = load_config(config_path, seed);
    echo_config(cfg);
    auto utts = read_manifest(manifest_path);
    fs::create_directories(out_dir);
    std::atomic<std::size_t> next{0}, failures{0}, written{0};
    std::mutex log_mtx;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= utts.size()) return;
            const auto& u = utts[i];
            const fs::path out = fs::path(out_dir) / (fs::path(u.path).stem().string() + ".mel");
            try {
                if (fs::exists(out) &&
                    fs::last_write_time(out) >= fs::last_write_time(u.path))
                    continue;  // up to date
                MelSpectrogram mel = log_mel(read_wav(u.path), cfg.mel);
                ParamStore ps;
                ps.add("mel", mel.frames);
                save_checkpoint(out.string(), ps, "utterance=" + u.path + "\n");
                ++written;
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(log_mtx);
                std::cerr << "featurize: " << u.path << ": " << e.what() << "\n";
                ++failures;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < std::max(1, workers); ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    std::cout << "featurize: " << written << " written, " << failures << " failed, "
              << utts.size() << " total\n";
    return failures == 0 ? kExitOk : kExitData;
}

int cmd_train(const std::string& config_path, bool stage1_only, const std::string& resume,
              std::int64_t seed) {
    ExperimentConfig cfg = load_config(config_path, seed);
    if (stage1_only) cfg.schedule.stage2_epochs = 0;
    echo_config(cfg);

    AugPolicy aug = cfg.aug;
    if (!cfg.noise_manifest.empty())
        for (const auto& n : read_manifest(cfg.noise_manifest)) aug.noise_paths.push_back(n.path);
    Dataset ds = Dataset::build(read_manifest(cfg.train_manifest), aug);

    ModelConfig model = cfg.model;
    model.n_classes = ds.n_classes();
    std::mt19937_64 rng(cfg.seed);
    ParamStore ps = init_model(model, rng);
    if (cfg.lora_enabled) attach_lora(ps, model.effective_encoder().n_blocks, cfg.lora, rng);

    std::size_t start_epoch = 0;
    if (!resume.empty()) {
        LoadedCheckpoint ck = load_checkpoint(resume);
        check_checkpoint_config(ck.config_text, cfg);
        ps = std::move(ck.params);
        start_epoch = static_cast<std::size_t>(
            KvConfig::parse_text(ck.config_text).get_num("train.completed_epochs", 0));
        std::cout << "resuming from " << resume << " at epoch " << start_epoch << "\n";
    }

    fs::create_directories(cfg.out_dir);
    std::vector<EpochMetrics> all_metrics;
    auto save_epoch = [&](std::size_t epoch, const ParamStore& cur, const AdamOptimizer&) {
        KvConfig snap = cfg.to_kv();
        snap.set_num("train.completed_epochs", static_cast<double>(epoch + 1));
        save_checkpoint(cfg.out_dir + "/epoch_" + std::to_string(epoch) + ".ckpt", cur,
                        snap.serialize());
        save_checkpoint(cfg.out_dir + "/final.ckpt", cur, snap.serialize());
    };
    auto metrics = train(ds, ps, model, cfg.schedule, cfg.aam, cfg.mel, cfg.seed,
                         cfg.lora_enabled, start_epoch, save_epoch);
    write_metrics_csv(cfg.out_dir + "/metrics.csv", metrics);
    for (const auto& m : metrics)
        std::cout << "epoch " << m.epoch << " stage " << m.stage << " loss " << m.loss
                  << " acc " << m.accuracy << "\n";
    return kExitOk;
}

int cmd_embed(const std::string& config_path, const std::string& ckpt_path,
              const std::string& manifest_path, const std::string& out_base,
              std::int64_t seed) {
    ExperimentConfig cfg = load_config(config_path, seed);
    LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    check_checkpoint_config(ck.config_text, cfg);
    ParamStore ps = std::move(ck.params);
    LoraSet adapters = collect_lora(ps, cfg.model.effective_encoder().n_blocks);
    auto utts = read_manifest(manifest_path);
    EmbeddingMap embs =
        embed_manifest(utts, ps, cfg.model, cfg.mel, adapters.empty() ? nullptr : &adapters);
    write_embeddings_text(out_base + ".txt", embs);
    write_embeddings_binary(out_base + ".bin", embs);
    std::cout << "embed: wrote " << embs.size() << " embeddings to " << out_base
              << ".{txt,bin}\n";
    return kExitOk;
}

EmbeddingMap read_embeddings_any(const std::string& path) {
    if (path.ends_with(".bin")) return read_embeddings_binary(path);
    return read_embeddings_text(path);
}

// Cohort: one speaker-averaged embedding per speaker of the cohort manifest.
Cohort build_cohort(const std::string& manifest_path, const EmbeddingMap& embs,
                    std::size_t top_k) {
    auto utts = read_manifest(manifest_path);
    std::map<std::string, std::pair<std::vector<double>, std::size_t>> acc;
    for (const auto& u : utts) {
        auto it = embs.find(u.id());
        if (it == embs.end())
            throw std::runtime_error("cohort utterance '" + u.id() + "' has no embedding");
        auto& [sum, n] = acc[u.speaker];
        if (sum.empty()) sum.assign(it->second.size(), 0.0);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += it->second[i];
        ++n;
    }
    Cohort c;
    c.top_k = top_k;
    for (auto& [spk, sn] : acc) {
        for (double& v : sn.first) v /= static_cast<double>(sn.second);
        c.embeddings.push_back(std::move(sn.first));
    }
    c.top_k = std::min(c.top_k, c.embeddings.size());
    return c;
}

int cmd_eval(const std::string& trials_path, const std::string& emb_path,
             const std::string& cohort_manifest, const std::string& cohort_emb_path,
             std::size_t top_k, double p_target, double c_fa, double c_miss,
             const std::string& scores_out) {
    TrialList trials = read_trial_list(trials_path);
    EmbeddingMap embs = read_embeddings_any(emb_path);
    DcfConfig dcf{p_target, c_fa, c_miss};
    Cohort cohort;
    const Cohort* cptr = nullptr;
    if (!cohort_manifest.empty()) {
        EmbeddingMap cembs =
            cohort_emb_path.empty() ? embs : read_embeddings_any(cohort_emb_path);
        cohort = build_cohort(cohort_manifest, cembs, top_k);
        cptr = &cohort;
    }
    EvalResult res = evaluate(trials, embs, cptr, dcf);
    if (!scores_out.empty()) write_score_file(scores_out, trials, res.scores);
    std::cout << "EER(%) minDCF\n";
    std::cout.precision(4);
    std::cout << std::fixed << res.eer * 100.0 << " " << res.min_dcf << "\n";
    return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& ranges_spec,
              const std::string& eval_manifest, const std::string& out_csv,
              std::int64_t seed) {
    ExperimentConfig cfg = load_config(config_path, seed);
    echo_config(cfg);
    auto ranges = parse_ranges(ranges_spec);
    AugPolicy aug = cfg.aug;
    if (!cfg.noise_manifest.empty())
        for (const auto& n : read_manifest(cfg.noise_manifest)) aug.noise_paths.push_back(n.path);
    Dataset ds = Dataset::build(read_manifest(cfg.train_manifest), aug);
    auto eval_utts = read_manifest(eval_manifest);
    TrialList trials = read_trial_list(cfg.trial_list);
    auto rows = layer_sweep(ds, ranges, cfg.model, cfg.schedule, cfg.aam, cfg.mel, eval_utts,
                            trials, cfg.seed, cfg.lora_enabled, cfg.lora);
    write_sweep_csv(out_csv, rows);
    std::cout << "selected_layers eer min_dcf\n";
    std::cout.precision(6);
    for (const auto& r : rows)
        std::cout << r.range.str() << " " << r.eer << " " << r.min_dcf << "\n";
    return kExitOk;
}

int cmd_count_params(const std::string& config_path) {
    ExperimentConfig cfg = load_config(config_path, -1);
    const std::size_t total = count_total_params(cfg.model);
    const std::size_t lora_trainable = count_lora_trainable_params(cfg.model, cfg.lora);
    std::cout << "total (full fine-tune, all trainable): " << total << "\n";
    std::cout << "lora trainable (rank " << cfg.lora.rank << "): " << lora_trainable << "\n";
    std::cout.precision(1);
    std::cout << std::fixed << "reduction: " << static_cast<double>(total) / lora_trainable
              << "x\n";
    return kExitOk;
}

int cmd_merge_lora(const std::string& in_ckpt, const std::string& out_ckpt) {
    LoadedCheckpoint ck = load_checkpoint(in_ckpt);
    std::size_t n_blocks = 0;
    for (const auto& [name, t] : ck.params)
        if (name.rfind("encoder.blocks.", 0) == 0) {
            const std::size_t i = std::stoul(name.substr(15));
            n_blocks = std::max(n_blocks, i + 1);
        }
    merge_all(ck.params, n_blocks);
    save_checkpoint(out_ckpt, ck.params, ck.config_text);
    std::cout << "merged adapters into " << out_ckpt << "\n";
    return kExitOk;
}

int cmd_gen_corpus(const std::string& out_dir, std::size_t speakers, std::size_t utts,
                   std::size_t heldout, double duration, std::uint64_t seed) {
    SyntheticCorpusConfig cfg;
    cfg.n_speakers = speakers;
    cfg.utts_per_speaker = utts;
    cfg.heldout_per_speaker = heldout;
    cfg.duration_seconds = duration;
    cfg.seed = seed;
    SyntheticCorpus corpus = generate_corpus(out_dir, cfg);
    write_manifest(out_dir + "/train.manifest", corpus.train);
    write_manifest(out_dir + "/heldout.manifest", corpus.heldout);
    write_trial_list(out_dir + "/train.trials", corpus.train_trials);
    write_trial_list(out_dir + "/heldout.trials", corpus.heldout_trials);
    std::cout << "gen-corpus: " << corpus.train.size() << " train + " << corpus.heldout.size()
              << " held-out utterances in " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Whisper-PMFA speaker verification toolkit"};
    app.require_subcommand(1);

    std::string config_path, manifest_path, out_dir = "features", out_base = "embeddings";
    std::string resume, ckpt_path, trials_path, emb_path, cohort_manifest, cohort_emb_path;
    std::string scores_out, ranges_spec, eval_manifest, out_csv = "sweep.csv";
    std::string merge_in, merge_out;
    std::int64_t seed = -1;
    int workers = 1;
    bool stage1_only = false;
    std::size_t top_k = 300, gc_speakers = 8, gc_utts = 10, gc_heldout = 2;
    double p_target = 0.05, c_fa = 1.0, c_miss = 1.0, gc_duration = 2.4;
    std::uint64_t gc_seed = 7;

    auto* featurize = app.add_subcommand("featurize", "cache mel features for a manifest");
    featurize->add_option("--config", config_path)->required();
    featurize->add_option("--manifest", manifest_path)->required();
    featurize->add_option("--out-dir", out_dir);
    featurize->add_option("--workers", workers);
    featurize->add_option("--seed", seed);

    auto* train = app.add_subcommand("train", "two-stage training run");
    train->add_option("--config", config_path)->required();
    train->add_flag("--stage1-only", stage1_only, "stop after the frozen-encoder stage");
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_option("--seed", seed);

    auto* embed = app.add_subcommand("embed", "extract speaker embeddings");
    embed->add_option("--config", config_path)->required();
    embed->add_option("--checkpoint", ckpt_path)->required();
    embed->add_option("--manifest", manifest_path)->required();
    embed->add_option("--out", out_base, "output base path (.txt and .bin are appended)");
    embed->add_option("--seed", seed);

    auto* eval = app.add_subcommand("eval", "score trials and report EER/minDCF");
    eval->add_option("--trials", trials_path)->required();
    eval->add_option("--embeddings", emb_path)->required();
    eval->add_option("--cohort", cohort_manifest, "cohort manifest enabling AS-Norm");
    eval->add_option("--cohort-embeddings", cohort_emb_path);
    eval->add_option("--top-k", top_k);
    eval->add_option("--p-target", p_target);
    eval->add_option("--c-fa", c_fa);
    eval->add_option("--c-miss", c_miss);
    eval->add_option("--scores-out", scores_out);

    auto* sweep = app.add_subcommand("sweep", "layer-selection sweep");
    sweep->add_option("--config", config_path)->required();
    sweep->add_option("--ranges", ranges_spec, "comma-separated s-e ranges")->required();
    sweep->add_option("--eval-manifest", eval_manifest)->required();
    sweep->add_option("--out", out_csv);
    sweep->add_option("--seed", seed);

    auto* count = app.add_subcommand("count-params", "parameter accounting report");
    count->add_option("--config", config_path)->required();

    auto* merge = app.add_subcommand("merge-lora", "fold adapters into base weights");
    merge->add_option("--checkpoint", merge_in)->required();
    merge->add_option("--out", merge_out)->required();

    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic demo corpus");
    gen->add_option("--out-dir", out_dir)->required();
    gen->add_option("--speakers", gc_speakers);
    gen->add_option("--utts", gc_utts);
    gen->add_option("--heldout", gc_heldout);
    gen->add_option("--duration", gc_duration);
    gen->add_option("--seed", gc_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (featurize->parsed())
            return cmd_featurize(config_path, manifest_path, out_dir, workers, seed);
        if (train->parsed()) return cmd_train(config_path, stage1_only, resume, seed);
        if (embed->parsed())
            return cmd_embed(config_path, ckpt_path, manifest_path, out_base, seed);
        if (eval->parsed())
            return cmd_eval(trials_path, emb_path, cohort_manifest, cohort_emb_path, top_k,
                            p_target, c_fa, c_miss, scores_out);
        if (sweep->parsed())
            return cmd_sweep(config_path, ranges_spec, eval_manifest, out_csv, seed);
        if (count->parsed()) return cmd_count_params(config_path);
        if (merge->parsed()) return cmd_merge_lora(merge_in, merge_out);
        if (gen->parsed())
            return cmd_gen_corpus(out_dir, gc_speakers, gc_utts, gc_heldout, gc_duration,
                                  gc_seed);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
