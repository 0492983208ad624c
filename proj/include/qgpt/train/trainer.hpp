#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qgpt/core/error.hpp"
#include "qgpt/core/hash.hpp"
#include "qgpt/core/ops.hpp"
#include "qgpt/core/tape.hpp"
#include "qgpt/distill/objective.hpp"
#include "qgpt/eval/perplexity.hpp"
#include "qgpt/model/gpt.hpp"
#include "qgpt/quant/fake_quant_ops.hpp"
#include "qgpt/train/data.hpp"
#include "qgpt/train/optimizer.hpp"

namespace qgpt::train {

enum class GammaGrad { analytic, outside_only };

inline const char* to_string(GammaGrad g) { return g == GammaGrad::analytic ? "analytic" : "outside-only"; }

inline GammaGrad parse_gamma_grad(std::string_view s) {
    if (s == "analytic") return GammaGrad::analytic;
    if (s == "outside-only") return GammaGrad::outside_only;
    throw ConfigError("train.gamma_grad must be 'analytic' or 'outside-only', got '" + std::string(s) + "'");
}

struct TrainConfig {
    double lr_backbone = 5e-4;
    double lr_clip = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
    std::optional<double> grad_clip_norm;
    std::size_t max_steps = 0;      // 0: run every epoch to the end
    std::size_t eval_every = 0;     // extra validation every n steps; 0: end of epoch only
    std::size_t eval_windows = 0;   // 0: whole validation split
    GammaGrad gamma_grad = GammaGrad::analytic;

    void validate() const {
        if (!(lr_backbone > 0)) throw ConfigError("train.lr_backbone must be > 0");
        if (!(lr_clip > 0)) throw ConfigError("train.lr_clip must be > 0");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
        if (grad_clip_norm && !(*grad_clip_norm > 0)) throw ConfigError("train.grad_clip_norm must be > 0");
    }
};

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    distill::LossBreakdown loss;
    double lr_backbone = 0;
    double lr_clip = 0;
    std::uint64_t clip_digest = 0;  // FNV-1a of every clipping parameter after the step
    double seconds = 0;             // wall clock, excluded from equality

    bool same_values(const StepRecord& o) const {
        auto eq = [](const distill::LossBreakdown& a, const distill::LossBreakdown& b) {
            return a.l_s2t == b.l_s2t && a.l_t2s == b.l_t2s && a.l_cont == b.l_cont && a.l_dist == b.l_dist &&
                   a.total == b.total && a.lambda == b.lambda;
        };
        return step == o.step && epoch == o.epoch && eq(loss, o.loss) && lr_backbone == o.lr_backbone &&
               lr_clip == o.lr_clip && clip_digest == o.clip_digest;
    }
};

struct EvalRecord {
    std::size_t step = 0;  // optimizer steps completed
    std::size_t epoch = 0;
    double val_ppl = 0;
    bool diverging = false;

    bool operator==(const EvalRecord&) const = default;
};

struct RunRecord {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
    std::size_t clamp_events = 0;
    bool divergence_flagged = false;

    // Equality of everything except wall-clock timings.
    bool same_values(const RunRecord& o) const {
        if (steps.size() != o.steps.size() || evals != o.evals || clamp_events != o.clamp_events ||
            divergence_flagged != o.divergence_flagged) {
            return false;
        }
        for (std::size_t i = 0; i < steps.size(); ++i)
            if (!steps[i].same_values(o.steps[i])) return false;
        return true;
    }

    double mean_step_seconds(std::size_t skip_first = 0) const {
        if (steps.size() <= skip_first) return 0;
        double s = 0;
        for (std::size_t i = skip_first; i < steps.size(); ++i) s += steps[i].seconds;
        return s / static_cast<double>(steps.size() - skip_first);
    }
};

struct Hooks {
    std::function<void(const std::string&)> warn = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EvalRecord&)> on_eval;
};

namespace detail {

// Steps of the whole run: full batches per epoch times epochs, capped by max_steps.
inline std::size_t total_steps(const TrainConfig& cfg, std::size_t windows) {
    const auto per_epoch = windows / cfg.batch_size;
    if (per_epoch == 0) {
        throw ContractError("training split holds " + std::to_string(windows) + " windows, fewer than one batch of " +
                            std::to_string(cfg.batch_size));
    }
    auto total = per_epoch * cfg.epochs;
    if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
    return total;
}

template <class T>
bool decays(const Tensor<T>& p) {
    return p.ndim() == 2;
}

template <class T>
std::uint64_t clip_digest(model::GptModel<T>& m) {
    Fnv1a h;
    for (auto& q : m.weight_quantizers())
        for (auto* p : q.clip_params()) h.update_values<T>(p->data());
    return h.digest();
}

// Projects clipping parameters below the floor back onto it.
template <class T>
std::size_t clamp_clip_params(model::GptModel<T>& m, const Hooks& hooks, std::size_t step) {
    std::size_t n = 0;
    const T floor = static_cast<T>(quant::kClipFloor);
    for (auto& q : m.weight_quantizers()) {
        for (auto* p : q.clip_params()) {
            for (auto& v : p->data()) {
                if (v < floor) {
                    if (hooks.warn) {
                        hooks.warn("step " + std::to_string(step) + ": clipping parameter of '" + q.param + "' at " +
                                   std::to_string(static_cast<double>(v)) + ", clamped to " + std::to_string(quant::kClipFloor));
                    }
                    v = floor;
                    ++n;
                }
            }
        }
    }
    return n;
}

template <class T>
void add_model_params(AdamW<T>& opt, model::GptModel<T>& m, std::size_t decay_group, std::size_t plain_group) {
    for (const auto& n : m.param_names()) {
        auto& p = m.param(n);
        opt.add_param(decays(p) ? decay_group : plain_group, p, n);
    }
}

template <class T>
std::vector<double> current_lrs(const AdamW<T>& opt, std::size_t step, std::size_t total) {
    std::vector<double> lrs;
    for (const auto& g : opt.groups()) lrs.push_back(lr_at(step, total, g.lr0));
    return lrs;
}

template <class T>
void clip_gradients(AdamW<T>& opt, const TrainConfig& cfg) {
    if (!cfg.grad_clip_norm) return;
    const double norm = opt.grad_norm();
    if (norm > *cfg.grad_clip_norm) opt.scale_grads(*cfg.grad_clip_norm / norm);
}

class Divergence {
public:
    explicit Divergence(std::optional<double> reference) : ref_(reference) {}

    // True once PPL exceeded 10x the reference on 3 consecutive evaluations.
    bool observe(double ppl) {
        if (!ref_) return false;
        streak_ = (!std::isfinite(ppl) || ppl > 10.0 * *ref_) ? streak_ + 1 : 0;
        return streak_ >= 3;
    }

private:
    std::optional<double> ref_;
    std::size_t streak_ = 0;
};

template <class T, class StepFn>
RunRecord run_loop(model::GptModel<T>& m, const Corpus& corpus, const TrainConfig& cfg, AdamW<T>& opt,
                   std::optional<double> reference_ppl, const Hooks& hooks, StepFn&& step_fn) {
    const auto seq = m.config().max_seq_len;
    const auto windows = window_count(corpus.train.size(), seq);
    const auto total = total_steps(cfg, windows);
    const auto per_epoch = windows / cfg.batch_size;
    RunRecord rec;
    Divergence div(reference_ppl);
    auto evaluate = [&](std::size_t step, std::size_t epoch) {
        EvalRecord e{step, epoch, eval::perplexity(m, corpus.val, cfg.batch_size, cfg.eval_windows), false};
        e.diverging = div.observe(e.val_ppl);
        if (e.diverging && !rec.divergence_flagged) {
            rec.divergence_flagged = true;
            if (hooks.warn) hooks.warn("divergence: validation PPL above 10x the teacher for 3 consecutive evaluations");
        }
        rec.evals.push_back(e);
        if (hooks.on_eval) hooks.on_eval(e);
    };

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
        const auto order = epoch_order(windows, cfg.seed, epoch);
        for (std::size_t bi = 0; bi < per_epoch && step < total; ++bi) {
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(bi * cfg.batch_size),
                                         order.begin() + static_cast<std::ptrdiff_t>((bi + 1) * cfg.batch_size));
            const auto batch = make_batch(corpus.train, ids, seq);
            const auto lrs = current_lrs(opt, step, total);
            StepRecord sr;
            sr.step = step;
            sr.epoch = epoch;
            try {
                sr.loss = step_fn(batch, lrs, step);
            } catch (const NonFiniteError& e) {
                throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + e.what(),
                                      static_cast<long>(step));
            }
            if (!std::isfinite(sr.loss.total)) {
                throw TrainingAborted("training aborted at step " + std::to_string(step) + ": non-finite loss",
                                      static_cast<long>(step));
            }
            rec.clamp_events += clamp_clip_params(m, hooks, step);
            sr.lr_backbone = lrs.front();
            sr.lr_clip = lrs.back();
            sr.clip_digest = clip_digest(m);
            sr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            rec.steps.push_back(sr);
            if (hooks.on_step) hooks.on_step(sr);
            ++step;
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < total) evaluate(step, epoch);
        }
        evaluate(step, epoch);
    }
    return rec;
}

}  // namespace detail

// Next-token cross-entropy training of a full-precision model.
template <class T>
RunRecord train_teacher(model::GptModel<T>& m, const Corpus& corpus, const TrainConfig& cfg, const Hooks& hooks = {}) {
    cfg.validate();
    if (!m.weight_quantizers().empty()) throw ContractError("train_teacher: model carries quantizers");
    if (corpus.vocab_size != m.config().vocab_size) throw ContractError("train_teacher: corpus and model vocabularies differ");
    m.set_trainable(true);
    AdamW<T> opt;
    const auto g_decay = opt.add_group("backbone_decay", cfg.lr_backbone, cfg.weight_decay);
    const auto g_plain = opt.add_group("backbone_nodecay", cfg.lr_backbone, 0.0);
    detail::add_model_params(opt, m, g_decay, g_plain);
    const auto seq = m.config().max_seq_len;

    return detail::run_loop(m, corpus, cfg, opt, std::nullopt, hooks, [&](const Batch& b, const std::vector<double>& lrs, std::size_t) {
        opt.zero_grad();
        Tape<T> tape;
        auto out = m.forward(tape, b.inputs, b.batch, seq, model::Mode::teacher);
        auto loss = ops::cross_entropy_logits(out.logits, b.targets);
        tape.backward(loss);
        detail::clip_gradients(opt, cfg);
        opt.step(lrs);
        distill::LossBreakdown lb;
        lb.total = lb.l_dist = static_cast<double>(loss.value()[0]);
        return lb;
    });
}

template <class T>
struct StudentRun {
    RunRecord record;
    distill::DistillState<T> distill;
};

// Feeds `batches` training batches through the student to initialize activation ranges.
template <class T>
void calibrate(model::GptModel<T>& student, const Corpus& corpus, std::size_t batch_size, std::size_t batches) {
    const auto seq = student.config().max_seq_len;
    const auto windows = window_count(corpus.train.size(), seq);
    for (std::size_t b = 0; b < batches && (b + 1) * batch_size <= windows; ++b) {
        std::vector<std::size_t> ids;
        for (std::size_t w = b * batch_size; w < (b + 1) * batch_size; ++w) ids.push_back(w);
        const auto batch = make_batch(corpus.train, ids, seq);
        Tape<T> tape(false);
        student.forward(tape, batch.inputs, batch.batch, seq, model::Mode::student, true);
    }
}

// Parameter groups of student training: decayed backbone matrices, other
// backbone tensors, projection heads (all at lr_backbone) and clipping
// parameters at lr_clip. The clip group is last.
template <class T>
AdamW<T> student_optimizer(model::GptModel<T>& student, distill::DistillState<T>& st, const distill::DistillConfig& dcfg,
                           const TrainConfig& cfg) {
    AdamW<T> opt;
    const auto g_decay = opt.add_group("backbone_decay", cfg.lr_backbone, cfg.weight_decay);
    const auto g_plain = opt.add_group("backbone_nodecay", cfg.lr_backbone, 0.0);
    const auto g_heads = opt.add_group("heads", cfg.lr_backbone, cfg.weight_decay);
    detail::add_model_params(opt, student, g_decay, g_plain);
    if (dcfg.lambda > 0) {
        opt.add_param(g_heads, st.student_proj, "proj.student");
        opt.add_param(g_heads, st.teacher_proj, "proj.teacher");
    }
    const auto g_clip = opt.add_group("clip", cfg.lr_clip, 0.0);
    for (auto& q : student.weight_quantizers())
        for (auto* p : q.clip_params()) opt.add_param(g_clip, *p, q.param + ".clip");

    return opt;
}

// Quantization-aware distillation of `student` from a frozen teacher.
template <class T>
StudentRun<T> train_student(model::GptModel<T>& student, model::GptModel<T>& teacher, const Corpus& corpus,
                            const distill::DistillConfig& dcfg, const TrainConfig& cfg,
                            std::optional<double> teacher_ppl = std::nullopt, const Hooks& hooks = {}) {
    cfg.validate();
    dcfg.validate();
    if (!(student.config() == teacher.config())) throw ContractError("train_student: teacher and student configs differ");
    if (!teacher.weight_quantizers().empty()) throw ContractError("train_student: teacher carries quantizers");
    teacher.set_trainable(false);
    const auto& mc = student.config();
    StudentRun<T> run{{}, distill::DistillState<T>::create(mc.vocab_size, mc.d_model, static_cast<T>(dcfg.momentum))};
    auto& st = run.distill;

    auto opt = student_optimizer(student, st, dcfg, cfg);

    std::mt19937_64 rng(cfg.seed ^ 0x5DEECE66DULL);
    const auto seq = mc.max_seq_len;
    run.record = detail::run_loop(student, corpus, cfg, opt, teacher_ppl, hooks, [&](const Batch& b, const std::vector<double>& lrs, std::size_t) {
        Tape<T> ttape(false);
        auto tout = teacher.forward(ttape, b.inputs, b.batch, seq, model::Mode::teacher);
        const auto& th = (dcfg.contrast_first_layer ? tout.first_hidden : tout.last_hidden).value();

        opt.zero_grad();
        Tape<T> tape;
        if (cfg.gamma_grad == GammaGrad::outside_only) quant::use_outside_only_gamma_rule(tape);
        auto out = student.forward(tape, b.inputs, b.batch, seq, model::Mode::student, true);
        auto sh = dcfg.contrast_first_layer ? out.first_hidden : out.last_hidden;
        const distill::BatchView view{b.inputs, b.batch, b.seq};
        auto obj = distill::distill_objective(tape, st, dcfg, sh, out.logits, th, tout.logits.value(), view, rng);
        tape.backward(obj.total);
        detail::clip_gradients(opt, cfg);
        opt.step(lrs);
        distill::update_banks(st, obj, view.tokens);
        return obj.parts;
    });
    return run;
}

}  // namespace qgpt::train
