// qgpt: train, evaluate, inspect and export quantized GPT students.
//
// Exit codes: 0 success, 1 training or runtime failure, 2 usage, configuration
// or missing input, 3 corrupt or incompatible checkpoint, 4 refused overwrite.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qgpt/eval/diagnostics.hpp"
#include "qgpt/eval/perplexity.hpp"
#include "qgpt/io/checkpoint.hpp"
#include "qgpt/io/config.hpp"
#include "qgpt/io/csv.hpp"
#include "qgpt/io/svg.hpp"
#include "qgpt/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace qgpt;

namespace {

struct UsageError : Error {
    using Error::Error;
};
struct MissingInput : Error {
    using Error::Error;
};
struct OverwriteRefused : Error {
    using Error::Error;
};

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
    bool force = false;
    std::vector<std::string> set;
};

void add_globals(CLI::App* sub, Globals& g) {
    sub->add_option("--config", g.config, "run configuration (JSON)");
    sub->add_option("--seed", g.seed, "overrides train.seed");
    sub->add_option("--out", g.out, "root directory for run artifacts")->capture_default_str();
    sub->add_flag("--force", g.force, "overwrite differing artifacts");
    sub->add_option("--set", g.set, "dotted override, e.g. distill.lambda=0 (repeatable)");
}

io::RunConfig load_run_config(const Globals& g) {
    if (!g.config.empty() && !fs::exists(g.config)) throw MissingInput("config file not found: " + g.config);
    auto cfg = g.config.empty() ? io::load_config("", g.set) : io::load_config_file(g.config, g.set);
    if (g.seed) cfg.train.seed = *g.seed;
    return cfg;
}

struct LoadedCorpus {
    train::Tokenizer tokenizer;
    train::Corpus corpus;
};

LoadedCorpus load_corpus(const io::RunConfig& cfg) {
    const auto& path = cfg.data.corpus_path;
    if (path.empty()) throw MissingInput("no corpus configured (set data.corpus_path)");
    if (!fs::is_regular_file(path)) throw MissingInput("corpus file not found: " + path);
    const auto text = train::read_file(path);
    auto tok = cfg.data.vocab == train::VocabKind::byte ? train::Tokenizer::bytes() : train::Tokenizer::words(text, cfg.model.vocab_size);
    auto corpus = train::Corpus::from_tokens(tok.encode(text), cfg.model.vocab_size, cfg.data.split);
    return {std::move(tok), std::move(corpus)};
}

fs::path run_dir(const Globals& g, const std::string& kind, const io::RunConfig& cfg) {
    return fs::path(g.out) / (kind + "-" + io::hex64(io::config_digest(cfg)) + "-s" + std::to_string(cfg.train.seed));
}

// Writes an artifact unless a different file is already there.
void write_artifact(const fs::path& path, std::span<const std::uint8_t> bytes, bool force) {
    if (fs::exists(path)) {
        const auto old = io::read_bytes(path.string());
        if (std::equal(old.begin(), old.end(), bytes.begin(), bytes.end())) return;
        if (!force) throw OverwriteRefused("refusing to overwrite differing artifact " + path.string() + " (use --force)");
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    io::write_bytes(path.string(), bytes);
}

void write_artifact(const fs::path& path, const std::string& text, bool force) {
    write_artifact(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()), force);
}

model::GptModel<float> load_model(const std::string& path) {
    if (!fs::is_regular_file(path)) throw MissingInput("checkpoint not found: " + path);
    return io::load_checkpoint<float>(path);
}

std::string fmt_ppl(double v) { return io::fmt_fixed(v, 2); }

// ---- train-teacher -------------------------------------------------------

int cmd_train_teacher(const Globals& g) {
    const auto cfg = load_run_config(g);
    const auto data = load_corpus(cfg);
    const auto dir = run_dir(g, "teacher", cfg);
    auto m = model::GptModel<float>::init_random(cfg.model, cfg.train.seed);

    io::CsvWriter metrics({"step", "loss", "lr", "val_ppl"});
    std::map<std::size_t, double> evals;
    train::Hooks hooks;
    hooks.on_eval = [&](const train::EvalRecord& e) {
        evals[e.step] = e.val_ppl;
        std::cout << "epoch " << e.epoch << " step " << e.step << " val_ppl " << fmt_ppl(e.val_ppl) << "\n";
    };
    const auto rec = train::train_teacher(m, data.corpus, cfg.train, hooks);
    for (const auto& s : rec.steps) {
        const auto it = evals.find(s.step + 1);
        metrics.row({std::to_string(s.step), io::fmt_real(s.loss.total), io::fmt_real(s.lr_backbone),
                      it == evals.end() ? "" : io::fmt_real(it->second)});
    }
    write_artifact(dir / "config.json", io::serialize(cfg), g.force);
    write_artifact(dir / "metrics.csv", metrics.text(), g.force);
    write_artifact(dir / "teacher.qlmq", io::encode_checkpoint(m), g.force);
    std::cout << "teacher checkpoint: " << (dir / "teacher.qlmq").string() << "\n";
    return 0;
}

// ---- train-quant ---------------------------------------------------------

int cmd_train_quant(const Globals& g, const std::string& teacher_path) {
    const auto cfg = load_run_config(g);
    if (!fs::is_regular_file(teacher_path)) throw MissingInput("teacher checkpoint not found: " + teacher_path);
    const auto bytes = io::read_bytes(teacher_path);
    const auto info = io::inspect_checkpoint(bytes);
    if (info.digest != io::model_digest(cfg.model)) {
        throw IntegrityError("teacher checkpoint model config " + io::hex64(info.digest) + " does not match the run config " +
                             io::hex64(io::model_digest(cfg.model)));
    }
    if (info.quant) throw IntegrityError("teacher checkpoint " + teacher_path + " is a quantized model");
    auto teacher = io::decode_checkpoint<float>(bytes);
    const auto data = load_corpus(cfg);
    const auto dir = run_dir(g, "quant", cfg);

    const double teacher_ppl = eval::perplexity(teacher, data.corpus.val, cfg.train.batch_size, cfg.train.eval_windows);
    std::cout << "teacher val_ppl " << fmt_ppl(teacher_ppl) << "\n";
    auto student = model::init_student_from_teacher(teacher, cfg.quant.bits, cfg.quant.scheme);

    io::CsvWriter gamma({"epoch", "step", "module", "gamma", "min", "max", "groups"});
    std::map<std::size_t, double> evals;
    train::Hooks hooks;
    hooks.on_eval = [&](const train::EvalRecord& e) {
        evals[e.step] = e.val_ppl;
        std::cout << "epoch " << e.epoch << " step " << e.step << " val_ppl " << fmt_ppl(e.val_ppl)
                  << (e.diverging ? " (diverging)" : "") << "\n";
        if (cfg.quant.scheme == quant::Scheme::dynamic && !student.weight_quantizers().empty()) {
            for (const auto& r : eval::scaling_dump(student)) gamma.add(e.epoch, e.step, r.module, r.gamma, r.min, r.max, r.groups);
        }
    };
    const auto run = train::train_student(student, teacher, data.corpus, cfg.distill, cfg.train, teacher_ppl, hooks);

    io::CsvWriter metrics({"step", "loss", "lr", "val_ppl", "l_s2t", "l_t2s", "l_cont", "l_dist", "lr_clip"});
    for (const auto& s : run.record.steps) {
        const auto it = evals.find(s.step + 1);
        metrics.row({std::to_string(s.step), io::fmt_real(s.loss.total), io::fmt_real(s.lr_backbone),
                     it == evals.end() ? "" : io::fmt_real(it->second), io::fmt_real(s.loss.l_s2t), io::fmt_real(s.loss.l_t2s),
                     io::fmt_real(s.loss.l_cont), io::fmt_real(s.loss.l_dist), io::fmt_real(s.lr_clip)});
    }
    write_artifact(dir / "config.json", io::serialize(cfg), g.force);
    write_artifact(dir / "metrics.csv", metrics.text(), g.force);
    if (cfg.quant.scheme == quant::Scheme::dynamic) write_artifact(dir / "gamma.csv", gamma.text(), g.force);
    write_artifact(dir / "student.qlmq", io::encode_checkpoint(student, io::Payload::training), g.force);
    if (run.record.clamp_events > 0) std::cout << "clipping parameters clamped " << run.record.clamp_events << " times\n";
    std::cout << "student checkpoint: " << (dir / "student.qlmq").string() << "\n";
    return 0;
}

// ---- eval ----------------------------------------------------------------

int cmd_eval(const Globals& g, const std::string& ckpt, const std::string& split_name) {
    const auto split = train::parse_split(split_name);
    auto m = load_model(ckpt);
    const auto cfg = load_run_config(g);
    if (!(cfg.model == m.config())) throw IntegrityError("checkpoint model config does not match the run config");
    const auto data = load_corpus(cfg);
    const auto nll = eval::negative_log_likelihood(m, data.corpus.split(split), cfg.train.batch_size);
    std::cout << "ppl " << fmt_ppl(nll.perplexity()) << "\n";
    io::CsvWriter csv({"split", "tokens", "mean_nll", "ppl"});
    csv.add(split_name, nll.tokens, nll.mean(), nll.perplexity());
    write_artifact(fs::path(ckpt).parent_path() / ("eval-" + split_name + ".csv"), csv.text(), g.force);
    return 0;
}

// ---- diag ----------------------------------------------------------------

struct DiagArgs {
    std::string which;
    std::string ckpt;
    std::string teacher;
    std::string sentence;
    std::optional<std::size_t> top_k;
    std::string view = "effective";
    std::string module;
    std::size_t bins = 60;
};

std::string arg_digest(const std::string& canonical) { return io::hex64(fnv1a64(canonical)).substr(0, 8); }

void write_pair(const Globals& g, const fs::path& dir, const std::string& which, const std::string& args, const std::string& csv,
                const std::string& svg) {
    const auto stem = which + "-" + arg_digest(args);
    write_artifact(dir / (stem + ".csv"), csv, g.force);
    std::cout << (dir / (stem + ".csv")).string() << "\n";
    if (!svg.empty()) {
        write_artifact(dir / (stem + ".svg"), svg, g.force);
        std::cout << (dir / (stem + ".svg")).string() << "\n";
    }
}

int cmd_diag(const Globals& g, const DiagArgs& a) {
    if (a.which == "size") {
        const auto cfg = load_run_config(g);
        const auto r = eval::model_size(cfg.model, cfg.quant.bits, cfg.quant.scheme);
        io::CsvWriter csv({"bits", "scheme", "total_params", "bytes_full_precision", "bytes_quantized", "mb_full_precision",
                           "mb_quantized", "compression_ratio"});
        csv.add(cfg.quant.bits.str(), std::string(quant::to_string(cfg.quant.scheme)), r.total_params, r.bytes_full_precision,
                r.bytes_quantized, r.mb_full_precision(), r.mb_quantized(), r.compression_ratio());
        std::cout << cfg.quant.bits.str() << ": " << io::fmt_fixed(r.mb_full_precision(), 3) << " MB -> "
                  << io::fmt_fixed(r.mb_quantized(), 3) << " MB (" << io::fmt_fixed(r.compression_ratio(), 1) << "x)\n";
        write_pair(g, fs::path(g.out), "size", io::canonical_model_json(cfg.model) + cfg.quant.bits.str() +
                                                   std::string(quant::to_string(cfg.quant.scheme)),
                   csv.text(), "");
        return 0;
    }
    if (a.ckpt.empty()) throw UsageError("diag " + a.which + " requires --ckpt");
    auto m = load_model(a.ckpt);
    const auto dir = fs::path(a.ckpt).parent_path();

    if (a.which == "sim") {
        if (a.sentence.empty()) throw UsageError("diag sim requires --sentence");
        std::optional<model::GptModel<float>> other;
        if (!a.teacher.empty()) other = load_model(a.teacher);
        const auto tokens = train::Tokenizer::bytes().encode(a.sentence);
        if (m.config().vocab_size != 256) throw UsageError("diag sim supports byte-level models only");
        const auto s = eval::token_cosine_matrix(m, other ? *other : m, tokens);
        io::CsvWriter csv({"i", "j", "cosine"});
        for (std::size_t i = 0; i < s.n; ++i)
            for (std::size_t j = 0; j < s.n; ++j) csv.add(i, j, s.at(i, j));
        std::vector<std::string> labels;
        for (char c : a.sentence) labels.push_back(c == ' ' ? "_" : std::string(1, c));
        std::cout << "mean diagonal " << io::fmt_fixed(s.mean_diagonal(), 4) << "\n";
        write_pair(g, dir, "sim", a.sentence + "|" + a.teacher, csv.text(),
                   io::svg_heatmap(s.values, s.n, labels, other ? "student vs teacher" : "within model"));
        return 0;
    }
    if (a.which == "embed") {
        const auto cfg = load_run_config(g);
        const auto data = load_corpus(cfg);
        const auto k = a.top_k.value_or(std::min<std::size_t>(500, m.config().vocab_size));
        if (a.view != "effective" && a.view != "latent") throw UsageError("--view must be effective or latent");
        const auto view = a.view == "latent" ? eval::EmbeddingView::latent : eval::EmbeddingView::effective;
        const auto st = eval::embedding_homogeneity(m, data.corpus.frequencies(), k, view);
        std::cout << "mean_pairwise_cosine " << io::fmt_real(st.mean_pairwise_cosine) << "\nmean_pairwise_l2 "
                  << io::fmt_real(st.mean_pairwise_l2) << "\n";
        std::vector<std::string> header{"token"};
        for (std::size_t q = 0; q < st.dim; ++q) header.push_back("e" + std::to_string(q));
        io::CsvWriter csv(header);
        for (std::size_t i = 0; i < st.ids.size(); ++i) {
            std::vector<std::string> row{std::to_string(st.ids[i])};
            for (std::size_t q = 0; q < st.dim; ++q) row.push_back(io::fmt_real(st.matrix[i * st.dim + q]));
            csv.row(row);
        }
        write_pair(g, dir, "embed", std::to_string(k) + "|" + a.view, csv.text(), "");
        return 0;
    }
    if (a.which == "hist") {
        if (a.module.empty()) throw UsageError("diag hist requires --module (available: " + eval::available_modules(m) + ")");
        const auto h = eval::weight_histogram(m, a.module, a.bins);
        io::CsvWriter csv({"bin_lo", "bin_hi", "count"});
        for (std::size_t i = 0; i < h.counts.size(); ++i)
            csv.add(h.lo + h.bin_width() * static_cast<double>(i), h.lo + h.bin_width() * static_cast<double>(i + 1), h.counts[i]);
        write_pair(g, dir, "hist", a.module + "|" + std::to_string(a.bins), csv.text(),
                   io::svg_histogram(h.counts, h.lo, h.hi, h.overlay, a.module));
        return 0;
    }
    if (a.which == "scaling") {
        io::CsvWriter csv({"module", "gamma", "min", "max", "groups"});
        const auto rows = eval::scaling_dump(m);
        for (const auto& r : rows) csv.add(r.module, r.gamma, r.min, r.max, r.groups);
        std::cout << "gamma stddev over Transformer weights " << io::fmt_real(eval::transformer_gamma_stddev(rows)) << "\n";
        write_pair(g, dir, "scaling", "", csv.text(), "");
        return 0;
    }
    throw UsageError("unknown diagnostic '" + a.which + "' (valid: sim, embed, hist, scaling, size)");
}

// ---- export --------------------------------------------------------------

int cmd_export(const Globals& g, const std::string& ckpt, const std::string& to) {
    const auto m = load_model(ckpt);
    if (m.weight_quantizers().empty()) throw UsageError("export: " + ckpt + " has no quantizers; nothing to pack");
    const auto dest = to.empty() ? fs::path(ckpt).parent_path() / "student-packed.qlmq" : fs::path(to);
    const auto bytes = io::encode_checkpoint(m, io::Payload::packed);
    write_artifact(dest, bytes, g.force);
    std::cout << dest.string() << " (" << bytes.size() << " bytes)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantization-aware training of GPT students with token-level contrastive distillation"};
    app.require_subcommand(1);
    Globals g;

    auto* teacher = app.add_subcommand("train-teacher", "train the full-precision teacher");
    add_globals(teacher, g);

    std::string teacher_ckpt;
    auto* quant = app.add_subcommand("train-quant", "quantization-aware distillation of a student");
    add_globals(quant, g);
    quant->add_option("--teacher", teacher_ckpt, "teacher checkpoint")->required();

    std::string ckpt, split = "val";
    auto* evaluate = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus split");
    add_globals(evaluate, g);
    evaluate->add_option("--ckpt", ckpt, "checkpoint")->required();
    evaluate->add_option("--split", split, "train, val or test")->capture_default_str();

    DiagArgs da;
    auto* diag = app.add_subcommand("diag", "diagnostics: sim, embed, hist, scaling, size");
    add_globals(diag, g);
    diag->add_option("which", da.which, "sim | embed | hist | scaling | size")->required();
    diag->add_option("--ckpt", da.ckpt, "checkpoint to inspect");
    diag->add_option("--teacher", da.teacher, "sim: compare against this model");
    diag->add_option("--sentence", da.sentence, "sim: input text");
    diag->add_option("--top-k", da.top_k, "embed: number of most frequent tokens (default 500, capped at the vocabulary)");
    diag->add_option("--view", da.view, "embed: effective or latent")->capture_default_str();
    diag->add_option("--module", da.module, "hist: parameter name");
    diag->add_option("--bins", da.bins, "hist: bin count")->capture_default_str();

    std::string to;
    auto* exp = app.add_subcommand("export", "pack a student checkpoint into codes and clipping scalars");
    add_globals(exp, g);
    exp->add_option("--ckpt", ckpt, "training checkpoint")->required();
    exp->add_option("--to", to, "destination (default: student-packed.qlmq beside the input)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*teacher) return cmd_train_teacher(g);
        if (*quant) return cmd_train_quant(g, teacher_ckpt);
        if (*evaluate) return cmd_eval(g, ckpt, split);
        if (*diag) return cmd_diag(g, da);
        if (*exp) return cmd_export(g, ckpt, to);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const MissingInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const UnsupportedVersionError& e) {
        std::cerr << "unsupported version: " << e.what() << "\n";
        return 3;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 3;
    } catch (const OverwriteRefused& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const NameError& e) {
        std::cerr << "name error: " << e.what() << "\n";
        return 2;
    } catch (const TrainingAborted& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
