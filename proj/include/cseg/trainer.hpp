#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>

#include "cseg/checkpoint.hpp"
#include "cseg/config.hpp"
#include "cseg/data.hpp"
#include "cseg/losses.hpp"
#include "cseg/metrics.hpp"

namespace cseg {

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

// Decoupled-weight-decay Adam with bias correction. The decay is applied
// as p <- p - lr*wd*p, separate from the adaptive update.
template <class T>
class AdamW {
public:
    AdamW(std::vector<Tensor<T>> params, const TrainConfig& cfg)
        : params_(std::move(params)), cfg_(cfg), lr_(cfg.lr0) {
        for (const auto& p : params_) {
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    long step_count() const { return step_; }

    void step() {
        // A non-finite gradient aborts before any parameter changes.
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            for (T g : params_[pi].grad())
                CSEG_CHECK(std::isfinite(static_cast<double>(g)),
                           "adamw: non-finite gradient in parameter '", params_[pi].name(),
                           "'; step aborted");
        }
        if (cfg_.grad_clip_norm > 0) {
            double sq = 0;
            for (const auto& p : params_)
                for (T g : p.grad()) sq += static_cast<double>(g) * g;
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip_norm) {
                const T scale = static_cast<T>(cfg_.grad_clip_norm / norm);
                for (auto& p : params_)
                    for (auto& g : p.grad()) g *= scale;
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T lr = static_cast<T>(lr_), wd = static_cast<T>(cfg_.weight_decay);
        const T eps = static_cast<T>(cfg_.eps);
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            auto& pv = params_[pi].data();
            const auto& g = params_[pi].grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (size_t i = 0; i < pv.size(); ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                const T mhat = static_cast<T>(m[i] / bc1);
                const T vhat = static_cast<T>(v[i] / bc2);
                pv[i] -= lr * wd * pv[i];                       // decoupled decay
                pv[i] -= lr * mhat / (std::sqrt(vhat) + eps);   // adaptive step
            }
        }
    }

    const std::vector<std::vector<T>>& moments_m() const { return m_; }
    const std::vector<std::vector<T>>& moments_v() const { return v_; }
    std::vector<std::vector<T>>& moments_m() { return m_; }
    std::vector<std::vector<T>>& moments_v() { return v_; }
    void set_step_count(long s) { step_ = s; }

private:
    std::vector<Tensor<T>> params_;
    TrainConfig cfg_;
    double lr_;
    long step_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Epoch monitors. "Improvement" is strictly val < best - 1e-6; both
// monitors run independent counters over the same quantity.
// ---------------------------------------------------------------------------

constexpr double kImprovementTol = 1e-6;

struct ImprovementMonitor {
    double best = std::numeric_limits<double>::infinity();
    bool observe(double v) {
        if (v < best - kImprovementTol) {
            best = v;
            return true;
        }
        return false;
    }
};

// Halves (by `factor`) after `patience` consecutive non-improving epochs,
// then resets its counter.
struct PlateauScheduler {
    double factor = 0.5;
    int patience = 5;
    ImprovementMonitor monitor;
    int bad_epochs = 0;
    int reductions = 0;

    double on_epoch(double val_loss, double lr) {
        if (monitor.observe(val_loss)) {
            bad_epochs = 0;
        } else if (++bad_epochs >= patience) {
            lr *= factor;
            bad_epochs = 0;
            ++reductions;
        }
        return lr;
    }
};

struct EarlyStopper {
    int patience = 100;
    ImprovementMonitor monitor;
    int bad_epochs = 0;

    bool on_epoch(double val_loss) {
        if (monitor.observe(val_loss)) bad_epochs = 0;
        else ++bad_epochs;
        return bad_epochs >= patience;
    }
};

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double train_ce = 0, train_inter = 0, train_intra = 0, train_total = 0;
    double val_total = 0;
    double val_miou = std::numeric_limits<double>::quiet_NaN();
    double pos_pixel_fraction = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"epoch", epoch},
                         {"lr", lr},
                         {"train_ce", train_ce},
                         {"train_inter", train_inter},
                         {"train_intra", train_intra},
                         {"train_total", train_total},
                         {"val_total", val_total},
                         {"pos_pixel_fraction", pos_pixel_fraction}};
        if (std::isfinite(val_miou)) j["val_miou"] = val_miou;
        return j;
    }
};

struct FitResult {
    std::vector<EpochRecord> history;
    std::string best_checkpoint, last_checkpoint;
    bool early_stopped = false;
    int epochs_run = 0;
    double best_val = std::numeric_limits<double>::infinity();
};

template <class T>
Tensor<T> batch_to_tensor(const std::vector<data::FloatImage>& imgs) {
    CSEG_CHECK(!imgs.empty(), "empty batch");
    const int c = imgs[0].c, h = imgs[0].h, w = imgs[0].w;
    Tensor<T> t = Tensor<T>::zeros({static_cast<int>(imgs.size()), c, h, w});
    const long per = static_cast<long>(c) * h * w;
    for (size_t i = 0; i < imgs.size(); ++i) {
        CSEG_CHECK(imgs[i].c == c && imgs[i].h == h && imgs[i].w == w,
                   "batch images must share dims");
        for (long k = 0; k < per; ++k)
            t.data()[static_cast<long>(i) * per + k] = static_cast<T>(imgs[i].v[k]);
    }
    return t;
}

// Optimizer/monitor state serialized alongside the model for bit-exact
// resume.
template <class T>
void add_trainer_state(ckpt::Checkpoint& c, const AdamW<T>& opt,
                       const Model<T>& model, int epoch, double sched_best,
                       int sched_bad, int sched_reductions, double stop_best,
                       int stop_bad, double fit_best) {
    c.meta["trainer"] = {{"epoch", epoch},
                         {"lr", opt.lr()},
                         {"step_count", opt.step_count()},
                         {"sched_best", sched_best},
                         {"sched_bad", sched_bad},
                         {"sched_reductions", sched_reductions},
                         {"stop_best", stop_best},
                         {"stop_bad", stop_bad},
                         {"fit_best", fit_best}};
    const auto& params = model.params.trainable();
    for (size_t i = 0; i < params.size(); ++i) {
        c.add("opt.m." + params[i].name(), ckpt::vec_to_raw(opt.moments_m()[i]));
        c.add("opt.v." + params[i].name(), ckpt::vec_to_raw(opt.moments_v()[i]));
    }
}

struct FitCallbacks {
    // Called after each epoch with the record; may return false to stop
    // (used by evaluation-driven harnesses).
    std::function<bool(const EpochRecord&)> on_epoch;
};

template <class T>
FitResult fit(const RunConfig& rc, const std::string& resume_from = "",
              const FitCallbacks& callbacks = {}) {
    rc.validate();
    namespace fs = std::filesystem;
    fs::create_directories(rc.out_dir);

    data::Split split = data::load_split(rc.dataset);
    data::ImageCache cache(rc.dataset.resize_h, rc.dataset.resize_w);

    Model<T> model = Model<T>::build(rc.model);
    AdamW<T> opt(model.params.trainable(), rc.train);
    PlateauScheduler scheduler{rc.train.plateau_factor, rc.train.plateau_patience};
    EarlyStopper stopper{rc.train.early_stop_patience};
    ImprovementMonitor best_monitor;
    int start_epoch = 1;

    if (!resume_from.empty()) {
        ckpt::Checkpoint c = ckpt::Checkpoint::load(resume_from);
        model = ckpt::model_from_checkpoint<T>(c);
        opt = AdamW<T>(model.params.trainable(), rc.train);
        CSEG_CHECK(c.meta.contains("trainer"), "checkpoint has no trainer state: ",
                   resume_from);
        const auto& tj = c.meta.at("trainer");
        opt.set_lr(tj.at("lr").get<double>());
        opt.set_step_count(tj.at("step_count").get<long>());
        scheduler.monitor.best = tj.at("sched_best").get<double>();
        scheduler.bad_epochs = tj.at("sched_bad").get<int>();
        scheduler.reductions = tj.at("sched_reductions").get<int>();
        stopper.monitor.best = tj.at("stop_best").get<double>();
        stopper.bad_epochs = tj.at("stop_bad").get<int>();
        best_monitor.best = tj.at("fit_best").get<double>();
        start_epoch = tj.at("epoch").get<int>() + 1;
        const auto& params = model.params.trainable();
        for (size_t i = 0; i < params.size(); ++i) {
            const auto* rm = c.find("opt.m." + params[i].name());
            const auto* rv = c.find("opt.v." + params[i].name());
            CSEG_CHECK(rm && rv, "checkpoint missing optimizer state for ",
                       params[i].name());
            opt.moments_m()[i] = ckpt::raw_to_vec<T>(*rm, params[i].name());
            opt.moments_v()[i] = ckpt::raw_to_vec<T>(*rv, params[i].name());
        }
    }

    const std::string log_path = (fs::path(rc.out_dir) / "history.jsonl").string();
    std::ofstream log(log_path, resume_from.empty() ? std::ios::trunc : std::ios::app);
    CSEG_CHECK(log.good(), "cannot open training log: ", log_path);

    FitResult result;
    result.best_checkpoint = (fs::path(rc.out_dir) / "best.ckpt").string();
    result.last_checkpoint = (fs::path(rc.out_dir) / "last.ckpt").string();
    result.best_val = best_monitor.best;

    auto save_state = [&](const std::string& path, int epoch) {
        ckpt::Checkpoint c = ckpt::checkpoint_from_model(model);
        c.meta["run_config"] = run_config_to_json(rc);
        add_trainer_state(c, opt, model, epoch, scheduler.monitor.best,
                          scheduler.bad_epochs, scheduler.reductions, stopper.monitor.best,
                          stopper.bad_epochs, best_monitor.best);
        c.save(path);
    };

    for (int epoch = start_epoch; epoch <= rc.train.max_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;

        // ---- train ----
        double sum_ce = 0, sum_inter = 0, sum_intra = 0, sum_total = 0;
        long n_seen = 0, pos_pixels = 0, total_pixels = 0;
        const auto batches = data::batch_indices(static_cast<int>(split.train.size()),
                                                 rc.train.batch_size, rc.train.seed, epoch);
        for (const auto& batch : batches) {
            std::vector<data::FloatImage> imgs;
            imgs.reserve(batch.size());
            for (int idx : batch) {
                const auto& base = cache.get(split.train[static_cast<size_t>(idx)]);
                if (rc.train.augment) {
                    Rng arng = make_rng(rc.train.seed,
                                        0xA06000000ULL + static_cast<uint64_t>(epoch) * 100000 +
                                            static_cast<uint64_t>(idx));
                    imgs.push_back(data::augment(base, rc.aug, arng));
                } else {
                    imgs.push_back(base);
                }
            }
            Tensor<T> input = batch_to_tensor<T>(imgs);
            Tape<T> tape;
            auto fr = model.forward(tape, input, /*train=*/true);
            auto tl = total_loss(tape, fr, rc.loss);
            if (!std::isfinite(tl.report.total)) {
                if (epoch > start_epoch) {
                    fail("training aborted: non-finite loss at epoch ", epoch,
                         "; last good checkpoint retained at ", result.last_checkpoint);
                }
                fail("training aborted: non-finite loss at epoch ", epoch);
            }
            model.params.zero_grad();
            tape.backward(tl.total);
            opt.step();

            const long bsz = static_cast<long>(batch.size());
            sum_ce += tl.report.ce * bsz;
            sum_inter += tl.report.inter * bsz;
            sum_intra += tl.report.intra * bsz;
            sum_total += tl.report.total * bsz;
            n_seen += bsz;
            for (uint8_t m : fr.pred.mask) pos_pixels += m;
            total_pixels += static_cast<long>(fr.pred.mask.size());
        }
        rec.lr = opt.lr();
        rec.train_ce = sum_ce / n_seen;
        rec.train_inter = sum_inter / n_seen;
        rec.train_intra = sum_intra / n_seen;
        rec.train_total = sum_total / n_seen;
        rec.pos_pixel_fraction = static_cast<double>(pos_pixels) / total_pixels;

        // ---- validation ----
        double val_sum = 0;
        long val_n = 0;
        std::vector<double> val_mious;
        for (size_t i = 0; i < split.val.size(); i += rc.train.batch_size) {
            std::vector<data::FloatImage> imgs;
            for (size_t k = i;
                 k < std::min(split.val.size(), i + rc.train.batch_size); ++k)
                imgs.push_back(cache.get(split.val[k]));
            Tensor<T> input = batch_to_tensor<T>(imgs);
            Tape<T> tape;
            auto fr = model.forward(tape, input, /*train=*/false);
            auto tl = total_loss(tape, fr, rc.loss);
            val_sum += tl.report.total * static_cast<double>(imgs.size());
            val_n += static_cast<long>(imgs.size());
            if (rc.train.val_mask_metrics) {
                for (size_t k = 0; k < imgs.size(); ++k) {
                    auto gt = data::load_mask_for(rc.dataset, split.val[i + k],
                                                  rc.dataset.resize_h, rc.dataset.resize_w);
                    if (!gt) continue;
                    metrics::Mask pred(fr.pred.h, fr.pred.w);
                    const long plane = static_cast<long>(fr.pred.h) * fr.pred.w;
                    std::copy(fr.pred.mask.begin() + static_cast<long>(k) * plane,
                              fr.pred.mask.begin() + static_cast<long>(k + 1) * plane,
                              pred.v.begin());
                    val_mious.push_back(metrics::miou(pred, *gt));
                }
            }
        }
        rec.val_total = val_sum / val_n;
        if (!val_mious.empty()) {
            double s = 0;
            for (double v : val_mious) s += v;
            rec.val_miou = s / static_cast<double>(val_mious.size());
        }

        // ---- monitors ----
        opt.set_lr(scheduler.on_epoch(rec.val_total, opt.lr()));
        const bool stop = stopper.on_epoch(rec.val_total);
        if (best_monitor.observe(rec.val_total)) {
            result.best_val = best_monitor.best;
            save_state(result.best_checkpoint, epoch);
        }
        save_state(result.last_checkpoint, epoch);

        log << rec.to_json().dump() << "\n";
        log.flush();
        result.history.push_back(rec);
        result.epochs_run = epoch;
        if (callbacks.on_epoch && !callbacks.on_epoch(rec)) break;
        if (stop) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

}  // namespace cseg
