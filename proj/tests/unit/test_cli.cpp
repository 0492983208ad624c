#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qgpt/io/binary.hpp"
#include "qgpt/io/checkpoint.hpp"
#include "qgpt/io/csv.hpp"
#include "qgpt/train/synthetic.hpp"

namespace fs = std::filesystem;
using namespace qgpt;

namespace {

struct Result {
    int code = 0;
    std::string out;  // stdout and stderr together
};

// Runs the CLI inside the fixture directory.
Result run(const fs::path& dir, const std::string& args) {
    const std::string cmd = "cd '" + dir.string() + "' && '" + std::string(QGPT_CLI) + "' " + args + " 2>&1";
    Result r;
    FILE* p = popen(cmd.c_str(), "r");
    if (p == nullptr) throw std::runtime_error("popen failed");
    std::array<char, 4096> buf{};
    while (auto n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path only(const fs::path& root, const std::string& prefix) {
    for (const auto& e : fs::directory_iterator(root))
        if (e.path().filename().string().rfind(prefix, 0) == 0) return e.path();
    throw std::runtime_error("no entry with prefix " + prefix);
}

// One tiny teacher and student shared by every test in the suite.
class Cli : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "qgpt_cli_test";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        const auto text = train::synthetic_corpus(30000, 1);
        std::ofstream(dir_ / "corpus.txt", std::ios::binary) << text;
        std::ofstream(dir_ / "cfg.json") << R"({
  "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 16},
  "train": {"batch_size": 4, "max_steps": 8, "eval_windows": 8, "lr_backbone": 0.003},
  "data": {"corpus_path": "corpus.txt"}
})";
        const auto t = run(dir_, "train-teacher --config cfg.json");
        ASSERT_EQ(t.code, 0) << t.out;
        teacher_ = only(dir_ / "runs", "teacher-") / "teacher.qlmq";
        const auto s = run(dir_, "train-quant --config cfg.json --teacher " + teacher_.string());
        ASSERT_EQ(s.code, 0) << s.out;
        student_ = only(dir_ / "runs", "quant-") / "student.qlmq";
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static fs::path dir_, teacher_, student_;
};

fs::path Cli::dir_, Cli::teacher_, Cli::student_;

}  // namespace

TEST_F(Cli, TeacherMetricsContract) {
    const auto t = io::parse_csv_strict(slurp(teacher_.parent_path() / "metrics.csv"));
    EXPECT_EQ(t.header, (std::vector<std::string>{"step", "loss", "lr", "val_ppl"}));
    EXPECT_EQ(t.rows.size(), 8u);
    EXPECT_FALSE(t.rows.back()[t.column("val_ppl")].empty());
    EXPECT_EQ(teacher_.parent_path().filename().string().substr(0, 8), "teacher-");
    EXPECT_NE(teacher_.parent_path().filename().string().find("-s0"), std::string::npos);
}

TEST_F(Cli, RerunIsByteIdenticalAndOverwriteNeedsForce) {
    const auto before = slurp(teacher_);
    const auto again = run(dir_, "train-teacher --config cfg.json");
    ASSERT_EQ(again.code, 0) << again.out;
    EXPECT_EQ(slurp(teacher_), before);

    std::ofstream(teacher_.parent_path() / "metrics.csv", std::ios::app) << "tampered\n";
    const auto refused = run(dir_, "train-teacher --config cfg.json");
    EXPECT_EQ(refused.code, 4) << refused.out;
    EXPECT_NE(refused.out.find("--force"), std::string::npos);
    const auto forced = run(dir_, "train-teacher --config cfg.json --force");
    EXPECT_EQ(forced.code, 0) << forced.out;
    EXPECT_EQ(slurp(teacher_), before);
}

TEST_F(Cli, MissingCorpusExitsTwoNamingThePath) {
    const auto r = run(dir_, "train-teacher --config cfg.json --set data.corpus_path=no/such/file.txt");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("no/such/file.txt"), std::string::npos) << r.out;
}

TEST_F(Cli, BadConfigNamesTheField) {
    std::ofstream(dir_ / "bad.json") << "{\"train\": {\"epochz\": 2}}";
    const auto r = run(dir_, "train-teacher --config bad.json");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("train.epochz"), std::string::npos) << r.out;
}

TEST_F(Cli, StudentCsvSeparatesLossTerms) {
    const auto t = io::parse_csv_strict(slurp(student_.parent_path() / "metrics.csv"));
    for (const char* c : {"step", "loss", "lr", "val_ppl", "l_s2t", "l_t2s", "l_dist"}) EXPECT_NO_THROW(t.column(c)) << c;
    EXPECT_GT(std::stod(t.rows.back()[t.column("l_s2t")]), 0.0);
    const auto g = io::parse_csv_strict(slurp(student_.parent_path() / "gamma.csv"));
    EXPECT_FALSE(g.rows.empty());
    EXPECT_NO_THROW(g.column("gamma"));
}

TEST_F(Cli, LambdaOverrideBeatsTheFile) {
    const auto r = run(dir_, "train-quant --config cfg.json --teacher " + teacher_.string() + " --set distill.lambda=0");
    ASSERT_EQ(r.code, 0) << r.out;
    fs::path zero;
    for (const auto& e : fs::directory_iterator(dir_ / "runs"))
        if (e.path().filename().string().rfind("quant-", 0) == 0 && e.path() != student_.parent_path()) zero = e.path();
    ASSERT_FALSE(zero.empty());
    const auto t = io::parse_csv_strict(slurp(zero / "metrics.csv"));
    for (const auto& row : t.rows) EXPECT_EQ(row[t.column("l_s2t")], "0");
    EXPECT_NE(slurp(zero / "config.json").find("\"lambda\": 0"), std::string::npos);
}

TEST_F(Cli, SchemeAndStrategyAreValidated) {
    auto r = run(dir_, "train-quant --config cfg.json --teacher " + teacher_.string() + " --set quant.scheme=apot");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("dynamic, pact, lsq, laq"), std::string::npos) << r.out;
    r = run(dir_, "train-quant --config cfg.json --teacher " + teacher_.string() + " --set distill.strategy=hard");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("in-batch"), std::string::npos) << r.out;
}

TEST_F(Cli, TeacherDigestMismatchIsRejected) {
    const auto r = run(dir_, "train-quant --config cfg.json --set model.d_ff=48 --teacher " + teacher_.string());
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.out.find("does not match"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalIsDeterministicAndNeedsNoTeacher) {
    const auto packed = dir_ / "packed.qlmq";
    ASSERT_EQ(run(dir_, "export --ckpt " + student_.string() + " --to packed.qlmq").code, 0);
    EXPECT_LT(fs::file_size(packed), fs::file_size(student_));
    const auto a = run(dir_, "eval --config cfg.json --ckpt packed.qlmq");
    const auto b = run(dir_, "eval --config cfg.json --ckpt packed.qlmq");
    ASSERT_EQ(a.code, 0) << a.out;
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(a.out.rfind("ppl ", 0), 0u);
    const auto s = run(dir_, "eval --config cfg.json --ckpt " + student_.string());
    EXPECT_EQ(s.out, a.out);
    const auto csv = io::parse_csv_strict(slurp(dir_ / "eval-val.csv"));
    EXPECT_GT(csv.rows[0][csv.column("ppl")].size(), 6u);
}

TEST_F(Cli, CorruptCheckpointIsAnIntegrityError) {
    auto bytes = io::read_bytes(student_.string());
    io::write_bytes((dir_ / "truncated.qlmq").string(), std::span(bytes).first(bytes.size() / 2));
    auto r = run(dir_, "eval --config cfg.json --ckpt truncated.qlmq");
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.out.find("integrity"), std::string::npos) << r.out;
    bytes[bytes.size() / 2] ^= 0x10;
    io::write_bytes((dir_ / "flipped.qlmq").string(), bytes);
    EXPECT_EQ(run(dir_, "eval --config cfg.json --ckpt flipped.qlmq").code, 3);
}

TEST_F(Cli, DiagnosticsWriteNamedFiles) {
    const auto rd = student_.parent_path();
    auto r = run(dir_, "diag sim --ckpt " + student_.string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("--sentence"), std::string::npos);
    r = run(dir_, "diag sim --ckpt " + student_.string() + " --teacher " + teacher_.string() + " --sentence 'the cat'");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(only(rd, "sim-")));
    r = run(dir_, "diag hist --ckpt " + student_.string() + " --module h0.attn.w_x");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("h0.attn.w_q"), std::string::npos) << r.out;
    ASSERT_EQ(run(dir_, "diag hist --ckpt " + student_.string() + " --module h0.mlp.w_f").code, 0);
    ASSERT_EQ(run(dir_, "diag scaling --ckpt " + student_.string()).code, 0);
    r = run(dir_, "diag embed --config cfg.json --ckpt " + student_.string());
    ASSERT_EQ(r.code, 0) << r.out;
    const auto embed = io::parse_csv_strict(slurp(only(rd, "embed-")));
    EXPECT_EQ(embed.rows.size(), 256u);  // default 500, capped at the byte vocabulary
    for (const char* p : {"hist-", "scaling-"}) EXPECT_TRUE(fs::exists(only(rd, p))) << p;
    EXPECT_EQ(only(rd, "hist-").extension() == ".csv" || only(rd, "hist-").extension() == ".svg", true);
}

TEST_F(Cli, SizeNeedsOnlyTheConfig) {
    std::ofstream(dir_ / "gpt2.json") << R"({"model": {"vocab_size": 50257, "n_layers": 12, "d_model": 768, "n_heads": 12,
      "d_ff": 3072, "max_seq_len": 1024}, "data": {"vocab": "word"}})";
    const auto r = run(dir_, "diag size --config gpt2.json --out sizes");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("x)"), std::string::npos);
    const auto t = io::parse_csv_strict(slurp(only(dir_ / "sizes", "size-")));
    EXPECT_NEAR(std::stod(t.rows[0][t.column("mb_quantized")]), 33.0, 33.0 * 0.05);
}
