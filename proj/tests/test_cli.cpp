#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "wpmfa/checkpoint.hpp"
#include "wpmfa/embeddings.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path work_dir() {
    static fs::path d = [] {
        fs::path p = fs::temp_directory_path() / "wpmfa_cli_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return d;
}

RunResult run(const std::string& args) {
    static int n = 0;
    const fs::path so = work_dir() / ("out" + std::to_string(n) + ".log");
    const fs::path se = work_dir() / ("err" + std::to_string(n) + ".log");
    ++n;
    const std::string cmd = std::string(WPMFA_CLI_PATH) + " " + args + " >" + so.string() +
                            " 2>" + se.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(so);
    r.err = slurp(se);
    return r;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

fs::path corpus_dir() { return work_dir() / "corpus"; }

std::string tiny_config_text(const std::string& extra = "") {
    std::ostringstream os;
    os << "seed=5\n"
       << "encoder.n_mels=6\nencoder.d_model=8\nencoder.n_blocks=2\n"
       << "encoder.n_heads=2\nencoder.mlp_ratio=2\n"
       << "range.s=1\nrange.e=2\n"
       << "head.asp_bottleneck=5\nhead.emb_dim=7\n"
       << "train.stage1_epochs=1\ntrain.stage2_epochs=1\n"
       << "train.lr_stage1=0.001\ntrain.lr_stage2=0.0001\n"
       << "train.batch_size=3\ntrain.crop_seconds=0.25\n"
       << "paths.train_manifest=" << (corpus_dir() / "train.manifest").string() << "\n"
       << "paths.trial_list=" << (corpus_dir() / "train.trials").string() << "\n"
       << "paths.out_dir=" << (work_dir() / "run").string() << "\n"
       << extra;
    return os.str();
}

fs::path tiny_config(const std::string& name, const std::string& extra = "") {
    const fs::path p = work_dir() / name;
    write_file(p, tiny_config_text(extra));
    return p;
}

}  // namespace

TEST_CASE("cli: usage errors exit 1") {
    CHECK(run("").code == 1);
    CHECK(run("no-such-subcommand").code == 1);
    CHECK(run("train").code == 1);  // missing required --config
    CHECK(run("--help").code == 0);
}

TEST_CASE("cli: gen-corpus writes manifests and trial lists") {
    RunResult r = run("gen-corpus --out-dir " + corpus_dir().string() +
                      " --speakers 2 --utts 2 --heldout 1 --duration 0.5 --seed 11");
    CHECK(r.code == 0);
    CHECK(r.out.find("gen-corpus:") != std::string::npos);
    for (const char* f : {"train.manifest", "heldout.manifest", "train.trials",
                          "heldout.trials"})
        CHECK(fs::exists(corpus_dir() / f));
    // Manifest format: "path speaker".
    std::ifstream f(corpus_dir() / "train.manifest");
    std::string path, spk;
    REQUIRE((f >> path >> spk));
    CHECK(fs::exists(path));
    CHECK(spk.rfind("spk", 0) == 0);
}

TEST_CASE("cli: count-params reports totals and the reduction factor") {
    const fs::path cfg = tiny_config("count.cfg", "lora.rank=2\n");
    RunResult r = run("count-params --config " + cfg.string());
    CHECK(r.code == 0);
    CHECK(r.out.find("total") != std::string::npos);
    CHECK(r.out.find("lora trainable (rank 2)") != std::string::npos);
    CHECK(r.out.find("reduction:") != std::string::npos);
}

TEST_CASE("cli: featurize caches features; partial failure exits 2") {
    const fs::path cfg = tiny_config("feat.cfg");
    const fs::path feats = work_dir() / "features";
    RunResult ok = run("featurize --config " + cfg.string() + " --manifest " +
                       (corpus_dir() / "train.manifest").string() + " --out-dir " +
                       feats.string() + " --workers 2");
    CHECK(ok.code == 0);
    CHECK(ok.out.find("0 failed") != std::string::npos);
    std::size_t n_mel = 0;
    for (const auto& e : fs::directory_iterator(feats))
        if (e.path().extension() == ".mel") ++n_mel;
    CHECK(n_mel == 4);

    // A cached file really is a mel tensor container.
    wpmfa::LoadedCheckpoint mel =
        wpmfa::load_checkpoint((feats / "spk0_utt0.mel").string());
    CHECK(mel.params.contains("mel"));
    CHECK(mel.params.at("mel").dim(0) == 6);

    // Manifest with one broken entry: good files survive, exit code 2.
    const fs::path broken = work_dir() / "broken.manifest";
    write_file(broken, slurp(corpus_dir() / "train.manifest") + "/nonexistent/x.wav spkX\n");
    const fs::path feats2 = work_dir() / "features2";
    RunResult bad = run("featurize --config " + cfg.string() + " --manifest " +
                        broken.string() + " --out-dir " + feats2.string());
    CHECK(bad.code == 2);
    CHECK(bad.err.find("/nonexistent/x.wav") != std::string::npos);
    CHECK(bad.out.find("1 failed") != std::string::npos);
    std::size_t n2 = 0;
    for (const auto& e : fs::directory_iterator(feats2))
        if (e.path().extension() == ".mel") ++n2;
    CHECK(n2 == 4);
}

TEST_CASE("cli: train writes checkpoints and metrics, echoes resolved config") {
    const fs::path cfg = tiny_config("train.cfg");
    RunResult r = run("train --config " + cfg.string());
    CHECK(r.code == 0);
    CHECK(r.out.find("# resolved config") != std::string::npos);
    CHECK(r.out.find("encoder.d_model=8") != std::string::npos);
    CHECK(r.out.find("epoch 0 stage 1") != std::string::npos);
    CHECK(r.out.find("epoch 1 stage 2") != std::string::npos);
    const fs::path runp = work_dir() / "run";
    CHECK(fs::exists(runp / "final.ckpt"));
    CHECK(fs::exists(runp / "epoch_0.ckpt"));
    CHECK(fs::exists(runp / "metrics.csv"));
    CHECK(slurp(runp / "metrics.csv").rfind("epoch,stage,loss,acc\n", 0) == 0);

    // Checkpoint carries the resolved config and completed-epoch count.
    wpmfa::LoadedCheckpoint ck = wpmfa::load_checkpoint((runp / "final.ckpt").string());
    CHECK(ck.config_text.find("train.completed_epochs=2") != std::string::npos);
    CHECK(ck.params.contains("classifier.weight"));
}

TEST_CASE("cli: resume reproduces the uninterrupted run") {
    const fs::path cfg = tiny_config("resume.cfg");
    const fs::path runp = work_dir() / "run";
    const std::string full_final = slurp(runp / "final.ckpt");  // from the previous case

    RunResult r = run("train --config " + cfg.string() + " --resume " +
                      (runp / "epoch_0.ckpt").string());
    CHECK(r.code == 0);
    CHECK(r.out.find("resuming from") != std::string::npos);
    CHECK(r.out.find("at epoch 1") != std::string::npos);
    CHECK(slurp(runp / "final.ckpt") == full_final);
}

TEST_CASE("cli: embed is deterministic and validates checkpoint structure") {
    const fs::path cfg = tiny_config("embed.cfg");
    const fs::path ckpt = work_dir() / "run" / "final.ckpt";
    const fs::path e1 = work_dir() / "emb1";
    const fs::path e2 = work_dir() / "emb2";
    RunResult r1 = run("embed --config " + cfg.string() + " --checkpoint " + ckpt.string() +
                       " --manifest " + (corpus_dir() / "train.manifest").string() +
                       " --out " + e1.string());
    CHECK(r1.code == 0);
    RunResult r2 = run("embed --config " + cfg.string() + " --checkpoint " + ckpt.string() +
                       " --manifest " + (corpus_dir() / "train.manifest").string() +
                       " --out " + e2.string());
    CHECK(r2.code == 0);
    CHECK(slurp(e1.string() + ".txt") == slurp(e2.string() + ".txt"));
    CHECK(slurp(e1.string() + ".bin") == slurp(e2.string() + ".bin"));

    wpmfa::EmbeddingMap em = wpmfa::read_embeddings_text(e1.string() + ".txt");
    CHECK(em.size() == 4);
    for (const auto& [id, v] : em) CHECK(v.size() == 7);

    // Structural mismatch between config and checkpoint is refused.
    const fs::path wrong = work_dir() / "wrong.cfg";
    std::string text = tiny_config_text();
    text.replace(text.find("encoder.d_model=8"), 17, "encoder.d_model=4");
    write_file(wrong, text);
    RunResult bad = run("embed --config " + wrong.string() + " --checkpoint " +
                        ckpt.string() + " --manifest " +
                        (corpus_dir() / "train.manifest").string() + " --out " +
                        (work_dir() / "embx").string());
    CHECK(bad.code == 2);
    CHECK(bad.err.find("mismatch") != std::string::npos);
}

TEST_CASE("cli: eval prints EER/minDCF and writes a score file") {
    const fs::path scores = work_dir() / "scores.txt";
    RunResult r = run("eval --trials " + (corpus_dir() / "train.trials").string() +
                      " --embeddings " + (work_dir() / "emb1.txt").string() +
                      " --scores-out " + scores.string());
    CHECK(r.code == 0);
    CHECK(r.out.find("EER(%) minDCF") != std::string::npos);
    REQUIRE(fs::exists(scores));
    std::ifstream f(scores);
    std::string enroll, test;
    double sc;
    int label;
    REQUIRE((f >> enroll >> test >> sc >> label));
    CHECK((label == 0 || label == 1));
    CHECK(sc >= -1.0);
    CHECK(sc <= 1.0);

    // AS-Norm path with a cohort manifest.
    RunResult rn = run("eval --trials " + (corpus_dir() / "train.trials").string() +
                       " --embeddings " + (work_dir() / "emb1.txt").string() +
                       " --cohort " + (corpus_dir() / "train.manifest").string());
    CHECK(rn.code == 0);
    CHECK(rn.out.find("EER(%) minDCF") != std::string::npos);

    RunResult bad = run("eval --trials " + (corpus_dir() / "train.trials").string() +
                        " --embeddings /nonexistent.txt");
    CHECK(bad.code == 2);
}

TEST_CASE("cli: lora training and merge-lora preserve embeddings") {
    const fs::path cfg =
        tiny_config("lora.cfg", "lora.enabled=true\nlora.rank=2\npaths.out_dir=" +
                                    (work_dir() / "lora_run").string() + "\n");
    REQUIRE(run("train --config " + cfg.string()).code == 0);
    const fs::path ckpt = work_dir() / "lora_run" / "final.ckpt";
    wpmfa::LoadedCheckpoint ck = wpmfa::load_checkpoint(ckpt.string());
    CHECK(ck.params.contains("lora.blocks.0.q.A"));

    const fs::path merged = work_dir() / "lora_run" / "merged.ckpt";
    REQUIRE(run("merge-lora --checkpoint " + ckpt.string() + " --out " + merged.string())
                .code == 0);
    wpmfa::LoadedCheckpoint mk = wpmfa::load_checkpoint(merged.string());
    for (const auto& [name, t] : mk.params) CHECK(name.rfind("lora.", 0) != 0);

    const fs::path ea = work_dir() / "lora_emb";
    const fs::path eb = work_dir() / "merged_emb";
    REQUIRE(run("embed --config " + cfg.string() + " --checkpoint " + ckpt.string() +
                " --manifest " + (corpus_dir() / "train.manifest").string() + " --out " +
                ea.string())
                .code == 0);
    REQUIRE(run("embed --config " + cfg.string() + " --checkpoint " + merged.string() +
                " --manifest " + (corpus_dir() / "train.manifest").string() + " --out " +
                eb.string())
                .code == 0);
    wpmfa::EmbeddingMap ma = wpmfa::read_embeddings_text(ea.string() + ".txt");
    wpmfa::EmbeddingMap mb = wpmfa::read_embeddings_text(eb.string() + ".txt");
    REQUIRE(ma.size() == mb.size());
    for (const auto& [id, v] : ma) {
        REQUIRE(mb.count(id));
        for (std::size_t i = 0; i < v.size(); ++i)
            CHECK(mb.at(id)[i] == doctest::Approx(v[i]).epsilon(1e-8));
    }
}

TEST_CASE("cli: sweep produces a deterministic CSV") {
    const fs::path cfg = tiny_config("sweep.cfg", "train.stage2_epochs=0\n");
    const fs::path csv1 = work_dir() / "sweep1.csv";
    const fs::path csv2 = work_dir() / "sweep2.csv";
    RunResult r1 = run("sweep --config " + cfg.string() + " --ranges 1-1,1-2" +
                       " --eval-manifest " + (corpus_dir() / "train.manifest").string() +
                       " --out " + csv1.string());
    CHECK(r1.code == 0);
    REQUIRE(fs::exists(csv1));
    const std::string body = slurp(csv1);
    CHECK(body.rfind("selected_layers,eer,min_dcf\n", 0) == 0);
    CHECK(body.find("\n1-1,") != std::string::npos);
    CHECK(body.find("\n1-2,") != std::string::npos);

    RunResult r2 = run("sweep --config " + cfg.string() + " --ranges 1-1,1-2" +
                       " --eval-manifest " + (corpus_dir() / "train.manifest").string() +
                       " --out " + csv2.string());
    CHECK(r2.code == 0);
    CHECK(slurp(csv2) == body);

    RunResult bad = run("sweep --config " + cfg.string() + " --ranges nonsense" +
                        " --eval-manifest " + (corpus_dir() / "train.manifest").string() +
                        " --out " + (work_dir() / "sweep3.csv").string());
    CHECK(bad.code == 2);
}
