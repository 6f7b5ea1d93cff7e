#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dermfuse/checkpoint.hpp"
#include "dermfuse/common.hpp"
#include "dermfuse/data.hpp"
#include "dermfuse/layers.hpp"
#include "dermfuse/metrics.hpp"
#include "dermfuse/models.hpp"
#include "dermfuse/splitter.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

enum class OptimizerKind { sgd_momentum, adam };

struct TrainConfig {
    int64_t epochs = 10;
    int64_t batch_size = 32;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    uint64_t seed = 1;
    bool freeze_image_branch = false;
    double oversample_ratio = 1.0;  // <= 0 disables oversampling
    int folds = 5;
    std::optional<std::pair<double, double>> class_weights;  // (benign, malignant)

    void validate() const {
        if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
        if (batch_size < 2) throw ConfigError("train: batch_size must be at least 2 (batchnorm)");
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
        if (folds < 2) throw ConfigError("train: folds must be at least 2");
        if (oversample_ratio > 1.0) throw ConfigError("train: oversample_ratio must be <= 1");
        if (class_weights && (!(class_weights->first > 0.0) || !(class_weights->second > 0.0)))
            throw ConfigError("train: class weights must be positive");
    }
};

struct EpochStats {
    int64_t epoch = 0;
    double train_loss = 0.0, train_acc = 0.0;
    std::optional<double> train_recall_benign, train_recall_malignant;
    bool has_val = false;
    double val_loss = 0.0, val_acc = 0.0;
    std::optional<double> val_recall_benign, val_recall_malignant;
    double seconds = 0.0;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// -mean over the batch of w_y * log(p_true), log clamped at 1e-12
inline Tensor cross_entropy_loss(const Tensor& probs, const std::vector<int64_t>& targets,
                                 const std::optional<std::pair<double, double>>& class_weights = {}) {
    if (probs.rank() != 2 || probs.dim(1) != 2)
        throw ShapeError("cross_entropy_loss: expected probabilities [N,2], got " +
                         shape_str(probs.shape()));
    const int64_t n = probs.dim(0);
    if (int64_t(targets.size()) != n)
        throw ShapeError("cross_entropy_loss: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(n) + " rows");
    const double wb = class_weights ? class_weights->first : 1.0;
    const double wm = class_weights ? class_weights->second : 1.0;
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t y = targets[size_t(i)];
        if (y != 0 && y != 1) throw ConfigError("cross_entropy_loss: target must be 0 or 1");
        const double p = probs.data()[size_t(i * 2 + y)];
        total += (y == 1 ? wm : wb) * -std::log(std::max(p, 1e-12));
    }
    Tensor out = Tensor::scalar(total / double(n));
    if (detail::tracking({&probs})) {
        out.set_requires_grad(true);
        Tensor pv = probs;
        Tensor ov = out;
        std::vector<int64_t> tg = targets;
        Tape::active()->record("cross_entropy", [pv, ov, tg, wb, wm, n]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !pv.requires_grad()) return;
            auto& gp = pv.grad();
            for (int64_t i = 0; i < n; ++i) {
                const int64_t y = tg[size_t(i)];
                const double p = pv.data()[size_t(i * 2 + y)];
                if (p >= 1e-12)
                    gp[size_t(i * 2 + y)] -= g[0] * (y == 1 ? wm : wb) / (double(n) * p);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

struct OptimizerState {
    struct Slot {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    std::map<const void*, Slot> slots;
};

inline void optimizer_step(std::vector<Tensor>& params, OptimizerState& state,
                           const TrainConfig& cfg) {
    for (Tensor& p : params) {
        if (!p.requires_grad()) continue;  // frozen parameters stay untouched
        const std::vector<double>& g = p.grad_view();
        if (g.empty())
            throw ConfigError("optimizer_step: trainable parameter has no gradient");
        OptimizerState::Slot& slot = state.slots[p.key()];
        std::vector<double>& x = p.data();
        if (cfg.optimizer == OptimizerKind::sgd_momentum) {
            if (slot.v.empty()) slot.v.assign(x.size(), 0.0);
            for (size_t i = 0; i < x.size(); ++i) {
                slot.v[i] = 0.9 * slot.v[i] + g[i];
                x[i] -= cfg.learning_rate * slot.v[i];
            }
        } else {
            if (slot.m.empty()) {
                slot.m.assign(x.size(), 0.0);
                slot.v.assign(x.size(), 0.0);
            }
            slot.t += 1;
            const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, double(slot.t));
            const double bc2 = 1.0 - std::pow(b2, double(slot.t));
            for (size_t i = 0; i < x.size(); ++i) {
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                x[i] -= cfg.learning_rate * (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset container and batch assembly
// ---------------------------------------------------------------------------

struct TrainDataset {
    std::vector<MetadataRecord> records;
    std::vector<Image> images;  // aligned with records
    FeatureSchema schema;
    std::map<std::string, size_t> index_of;  // image_name -> index
};

inline TrainDataset make_train_dataset(std::vector<MetadataRecord> records,
                                       std::vector<Image> images) {
    if (records.size() != images.size())
        throw DataError("dataset: " + std::to_string(records.size()) + " records for " +
                        std::to_string(images.size()) + " images");
    TrainDataset ds;
    ds.records = std::move(records);
    ds.images = std::move(images);
    ds.schema = FeatureSchema::from_records(ds.records);
    for (size_t i = 0; i < ds.records.size(); ++i) {
        if (!ds.index_of.emplace(ds.records[i].image_name, i).second)
            throw DataError("dataset: duplicate image_name '" + ds.records[i].image_name + "'");
    }
    return ds;
}

inline TrainDataset make_train_dataset(SynthDataset synth) {
    return make_train_dataset(std::move(synth.records), std::move(synth.images));
}

struct Batch {
    Tensor images;
    Tensor features;
    std::vector<int64_t> targets;
};

inline Batch make_batch(const TrainDataset& ds, const std::vector<const MetadataRecord*>& recs,
                        int64_t resolution, const AugmentPolicy& policy, uint64_t seed_base) {
    const int64_t n = int64_t(recs.size());
    Batch b;
    b.images = Tensor::zeros({n, 3, resolution, resolution});
    b.features = Tensor::zeros({n, ds.schema.width()});
    const int64_t plane = resolution * resolution;
    for (int64_t j = 0; j < n; ++j) {
        const MetadataRecord& r = *recs[size_t(j)];
        auto it = ds.index_of.find(r.image_name);
        if (it == ds.index_of.end())
            throw DataError("batch: no image for record '" + r.image_name + "'");
        SeededRng rng(hash_mix({seed_base, fnv1a64(r.image_name), r.aug_seed}));
        const Image aug = augment(ds.images[it->second], policy, rng);
        std::copy(aug.data.begin(), aug.data.end(),
                  b.images.data().begin() + j * 3 * plane);
        const std::vector<double> f = encode_features(r, ds.schema);
        std::copy(f.begin(), f.end(), b.features.data().begin() + j * ds.schema.width());
        b.targets.push_back(r.target);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Model-kind shims (image-only graph vs fusion model)
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor forward_any(ModelGraph& m, const Batch& b, Mode mode, SeededRng& rng) {
    return m.forward(b.images, mode, rng);
}
inline Tensor forward_any(FusionModel& m, const Batch& b, Mode mode, SeededRng& rng) {
    return m.forward(b.images, b.features, mode, rng);
}
inline void visit_any(ModelGraph& m, const TensorVisitor& fn) { m.visit(fn); }
inline void visit_any(FusionModel& m, const TensorVisitor& fn) { m.visit(fn); }
inline int64_t model_resolution(const ModelGraph& m) { return m.resolution; }
inline int64_t model_resolution(const FusionModel& m) { return m.image.resolution; }

// Freeze the image feature extractor, keep the classifying layers trainable.
inline void apply_freeze(ModelGraph& m, bool freeze) {
    if (!freeze) return;
    m.set_trainable(false, true);
    m.classifier.set_trainable(true);
}
inline void apply_freeze(FusionModel& m, bool freeze) {
    if (freeze) m.set_trainable(Selector::image_branch, false, true);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    std::vector<ScoredSample> scored;
    std::vector<std::string> names;
    double mean_loss = 0.0;
    ConfusionMatrix confusion;
    Rates rate_report;
    bool auc_defined = false;
    double auc_value = 0.0;
};

template <class Model>
inline EvalReport evaluate(Model& model, const TrainDataset& ds, const std::vector<size_t>& idx,
                           const TrainConfig& cfg) {
    const int64_t res = detail::model_resolution(model);
    const AugmentPolicy policy = AugmentPolicy::identity(res);
    EvalReport rep;
    SeededRng fwd_rng(0);  // eval mode draws nothing that matters
    double loss_sum = 0.0;
    for (size_t s = 0; s < idx.size(); s += size_t(cfg.batch_size)) {
        const size_t e = std::min(idx.size(), s + size_t(cfg.batch_size));
        std::vector<const MetadataRecord*> recs;
        for (size_t i = s; i < e; ++i) recs.push_back(&ds.records[idx[i]]);
        const Batch b = make_batch(ds, recs, res, policy, 0);
        Tensor probs = detail::forward_any(model, b, Mode::eval, fwd_rng);
        loss_sum += cross_entropy_loss(probs, b.targets, cfg.class_weights).item() *
                    double(b.targets.size());
        for (size_t i = 0; i < recs.size(); ++i) {
            rep.scored.push_back({probs.data()[i * 2 + 1], int(b.targets[i])});
            rep.names.push_back(recs[i]->image_name);
        }
    }
    rep.mean_loss = idx.empty() ? 0.0 : loss_sum / double(idx.size());
    rep.confusion = confusion_at(rep.scored, 0.5);
    rep.rate_report = rates(rep.confusion);
    int64_t pos = 0, neg = 0;
    for (const ScoredSample& s : rep.scored) (s.label == 1 ? pos : neg)++;
    if (pos > 0 && neg > 0) {
        rep.auc_defined = true;
        rep.auc_value = auc(rep.scored);
    }
    return rep;
}

inline MetricsRow metrics_row(const std::string& name, const std::vector<ScoredSample>& scored) {
    MetricsRow row;
    row.name = name;
    const ConfusionMatrix cm = confusion_at(scored, 0.5);
    const Rates r = rates(cm);
    row.tpr = r.tpr;
    row.fpr = r.fpr;
    row.tnr = r.tnr;
    row.fnr = r.fnr;
    row.accuracy = r.accuracy;
    row.precision = r.precision;
    int64_t pos = 0, neg = 0;
    for (const ScoredSample& s : scored) (s.label == 1 ? pos : neg)++;
    if (pos > 0 && neg > 0) row.auc = auc(scored);
    return row;
}

// ---------------------------------------------------------------------------
// Single training run (the per-fold inner loop)
// ---------------------------------------------------------------------------

template <class Model>
inline std::vector<EpochStats> fit(Model& model, const TrainDataset& ds,
                                   const std::vector<size_t>& train_idx,
                                   const std::vector<size_t>& val_idx, const TrainConfig& cfg,
                                   uint64_t salt, const AugmentPolicy* policy_override = nullptr) {
    cfg.validate();
    const int64_t res = detail::model_resolution(model);
    AugmentPolicy policy = policy_override ? *policy_override : AugmentPolicy{};
    policy.crop_size = res;

    std::vector<MetadataRecord> train_recs;
    for (size_t i : train_idx) train_recs.push_back(ds.records[i]);
    if (cfg.oversample_ratio > 0.0) {
        SeededRng os_rng(hash_mix({cfg.seed, salt, 0x05ULL}));
        train_recs = oversample(train_recs, cfg.oversample_ratio, os_rng);
    }
    if (!val_idx.empty()) {
        // leakage guard: grouped splitting must hold at the point of use
        std::set<std::string> val_patients;
        for (size_t i : val_idx) val_patients.insert(ds.records[i].patient_id);
        for (const MetadataRecord& r : train_recs)
            if (val_patients.count(r.patient_id))
                throw DataError("fit: patient '" + r.patient_id +
                                "' appears in both train and validation");
    }

    std::vector<Tensor> params;
    detail::visit_any(model, [&params](const std::string&, Tensor t, bool is_state) {
        if (!is_state) params.push_back(t);
    });
    OptimizerState opt;

    std::vector<EpochStats> stats;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        SeededRng order_rng(hash_mix({cfg.seed, salt, uint64_t(epoch), 0x11ULL}));
        std::vector<size_t> order(train_recs.size());
        std::iota(order.begin(), order.end(), size_t(0));
        order_rng.shuffle(order);

        std::vector<std::vector<size_t>> chunks;
        for (size_t s = 0; s < order.size(); s += size_t(cfg.batch_size))
            chunks.emplace_back(order.begin() + long(s),
                                order.begin() + long(std::min(order.size(), s + size_t(cfg.batch_size))));
        if (chunks.size() >= 2 && chunks.back().size() == 1) {
            // a trailing singleton would starve batchnorm; merge it back
            chunks[chunks.size() - 2].push_back(chunks.back()[0]);
            chunks.pop_back();
        }

        double loss_sum = 0.0;
        int64_t seen = 0;
        int64_t correct[2] = {0, 0}, total_class[2] = {0, 0};
        const uint64_t aug_seed = hash_mix({cfg.seed, salt, uint64_t(epoch), 0x22ULL});
        uint64_t batch_index = 0;
        for (const std::vector<size_t>& chunk : chunks) {
            std::vector<const MetadataRecord*> recs;
            for (size_t i : chunk) recs.push_back(&train_recs[i]);
            const Batch b = make_batch(ds, recs, res, policy, aug_seed);

            Tape tape;
            TapeScope scope(tape);
            SeededRng fwd_rng(hash_mix({cfg.seed, salt, uint64_t(epoch), batch_index, 0x33ULL}));
            Tensor probs = detail::forward_any(model, b, Mode::train, fwd_rng);
            Tensor loss = cross_entropy_loss(probs, b.targets, cfg.class_weights);
            if (!std::isfinite(loss.item()))
                throw DivergenceError("fit: non-finite training loss at epoch " +
                                      std::to_string(epoch));
            tape.backward(loss);
            optimizer_step(params, opt, cfg);
            for (Tensor& p : params) p.zero_grad();

            const int64_t bn = int64_t(b.targets.size());
            loss_sum += loss.item() * double(bn);
            for (int64_t i = 0; i < bn; ++i) {
                const int64_t y = b.targets[size_t(i)];
                total_class[y]++;
                const bool pred_mal = probs.data()[size_t(i * 2 + 1)] >= 0.5;
                if ((y == 1) == pred_mal) correct[y]++;
            }
            seen += bn;
            ++batch_index;
        }

        EpochStats es;
        es.epoch = epoch;
        es.train_loss = loss_sum / double(seen);
        es.train_acc = double(correct[0] + correct[1]) / double(seen);
        if (total_class[0] > 0) es.train_recall_benign = double(correct[0]) / double(total_class[0]);
        if (total_class[1] > 0)
            es.train_recall_malignant = double(correct[1]) / double(total_class[1]);
        if (!val_idx.empty()) {
            es.has_val = true;
            const EvalReport ev = evaluate(model, ds, val_idx, cfg);
            es.val_loss = ev.mean_loss;
            if (ev.confusion.total() > 0)
                es.val_acc = double(ev.confusion.a + ev.confusion.d) / double(ev.confusion.total());
            es.val_recall_benign = ev.rate_report.tnr;
            es.val_recall_malignant = ev.rate_report.tpr;
        }
        es.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        stats.push_back(es);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// K-fold training with out-of-fold prediction collection
// ---------------------------------------------------------------------------

struct FoldResult {
    std::vector<EpochStats> epochs;
    std::vector<size_t> val_indices;
};

struct TrainResult {
    std::vector<FoldResult> folds;
    std::vector<ScoredSample> oof;        // aligned with the dataset's records
    std::vector<std::string> oof_names;
    MetricsRow oof_metrics;
};

template <class Model>
inline TrainResult train_kfold(const std::function<Model(uint64_t)>& builder,
                               const TrainDataset& ds, const FoldAssignment& assignment,
                               const TrainConfig& cfg, const std::string& checkpoint_dir = "",
                               const AugmentPolicy* policy_override = nullptr) {
    cfg.validate();
    if (assignment.fold_of.size() != ds.records.size())
        throw ConfigError("train_kfold: fold assignment covers " +
                          std::to_string(assignment.fold_of.size()) + " samples, dataset has " +
                          std::to_string(ds.records.size()));
    if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);

    TrainResult result;
    result.oof.assign(ds.records.size(), ScoredSample{});
    result.oof_names.assign(ds.records.size(), std::string());
    for (int fold = 0; fold < assignment.k; ++fold) {
        const auto [train_idx, val_idx] = fold_iter(assignment, fold);
        Model model = builder(cfg.seed);
        detail::apply_freeze(model, cfg.freeze_image_branch);

        FoldResult fr;
        fr.val_indices = val_idx;
        fr.epochs = fit(model, ds, train_idx, val_idx, cfg, uint64_t(fold), policy_override);

        const EvalReport ev = evaluate(model, ds, val_idx, cfg);
        for (size_t j = 0; j < val_idx.size(); ++j) {
            result.oof[val_idx[j]] = ev.scored[j];
            result.oof_names[val_idx[j]] = ev.names[j];
        }
        if (!checkpoint_dir.empty())
            save_checkpoint(checkpoint_dir + "/fold" + std::to_string(fold) + ".ckpt", model);
        result.folds.push_back(std::move(fr));
    }
    result.oof_metrics = metrics_row("oof", result.oof);
    return result;
}

// ---------------------------------------------------------------------------
// Experiment harnesses
// ---------------------------------------------------------------------------

enum class ExperimentKind { frozen_vs_trainable, cnn_vs_fusion };

struct ExperimentArm {
    std::string name;
    TrainResult result;
    int64_t trainable_params = 0;
};

struct ExperimentReport {
    std::string kind;
    std::vector<ExperimentArm> arms;
    FoldAssignment assignment;
};

inline std::vector<std::string> patient_ids(const TrainDataset& ds) {
    std::vector<std::string> ids;
    for (const MetadataRecord& r : ds.records) ids.push_back(r.patient_id);
    return ids;
}

inline ExperimentReport run_experiment(ExperimentKind kind, const TrainDataset& ds,
                                       const TrainConfig& cfg,
                                       const std::function<FusionModel(uint64_t)>& fusion_builder,
                                       const std::function<ModelGraph(uint64_t)>& image_builder,
                                       const std::string& work_dir) {
    cfg.validate();
    std::filesystem::create_directories(work_dir);
    ExperimentReport report;
    report.assignment = group_kfold(patient_ids(ds), cfg.folds);

    auto arm_counts = [](auto& model) {
        return model.count(CountMode::include_frozen).trainable;
    };

    if (kind == ExperimentKind::frozen_vs_trainable) {
        report.kind = "frozen_vs_trainable";
        // produce local "pretrained" backbone weights on a sibling synthetic
        // task, then start both arms from that same checkpoint
        const std::string pre_path = work_dir + "/pretrained_backbone.ckpt";
        {
            ModelGraph backbone = image_builder(cfg.seed);
            const SynthDataset pre =
                synth_generate(std::max<int64_t>(60, int64_t(ds.records.size()) / 4), 0.3,
                               backbone.resolution, cfg.seed + 7777);
            const TrainDataset pre_ds = make_train_dataset(pre);
            TrainConfig pre_cfg = cfg;
            pre_cfg.epochs = 1;
            pre_cfg.freeze_image_branch = false;
            std::vector<size_t> all(pre_ds.records.size());
            std::iota(all.begin(), all.end(), size_t(0));
            fit(backbone, pre_ds, all, {}, pre_cfg, 0xFEEDULL);
            save_checkpoint(pre_path, backbone);
        }
        const std::function<FusionModel(uint64_t)> warm_builder = [&fusion_builder,
                                                                   pre_path](uint64_t seed) {
            FusionModel m = fusion_builder(seed);
            load_checkpoint(pre_path, m, true);
            return m;
        };
        for (const bool freeze : {true, false}) {
            TrainConfig arm_cfg = cfg;
            arm_cfg.freeze_image_branch = freeze;
            ExperimentArm arm;
            arm.name = freeze ? "frozen" : "trainable";
            FusionModel probe = warm_builder(cfg.seed);
            detail::apply_freeze(probe, freeze);
            arm.trainable_params = arm_counts(probe);
            arm.result = train_kfold(warm_builder, ds, report.assignment, arm_cfg,
                                     work_dir + "/" + arm.name);
            report.arms.push_back(std::move(arm));
        }
    } else {
        report.kind = "cnn_vs_fusion";
        {
            ExperimentArm arm;
            arm.name = "image_only";
            ModelGraph probe = image_builder(cfg.seed);
            arm.trainable_params = arm_counts(probe);
            arm.result = train_kfold(image_builder, ds, report.assignment, cfg,
                                     work_dir + "/image_only");
            report.arms.push_back(std::move(arm));
        }
        {
            ExperimentArm arm;
            arm.name = "fusion";
            FusionModel probe = fusion_builder(cfg.seed);
            arm.trainable_params = arm_counts(probe);
            arm.result = train_kfold(fusion_builder, ds, report.assignment, cfg,
                                     work_dir + "/fusion");
            report.arms.push_back(std::move(arm));
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// EpochStats CSV
// ---------------------------------------------------------------------------

inline void write_epoch_stats_csv(const std::string& path, const std::vector<EpochStats>& stats,
                                  bool include_seconds = true) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "epoch,split,loss,acc,recall_benign,recall_malignant";
    if (include_seconds) out << ",seconds";
    out << "\n";
    auto cell = [&out](const std::optional<double>& v) {
        out << ',';
        if (v) out << fmt_double(*v);
    };
    for (const EpochStats& es : stats) {
        out << es.epoch << ",train," << fmt_double(es.train_loss) << ','
            << fmt_double(es.train_acc);
        cell(es.train_recall_benign);
        cell(es.train_recall_malignant);
        if (include_seconds) out << ',' << fmt_double(es.seconds);
        out << "\n";
        if (es.has_val) {
            out << es.epoch << ",val," << fmt_double(es.val_loss) << ',' << fmt_double(es.val_acc);
            cell(es.val_recall_benign);
            cell(es.val_recall_malignant);
            if (include_seconds) out << ',' << fmt_double(es.seconds);
            out << "\n";
        }
    }
    if (!out) throw IoError("short write to " + path);
}

}  // namespace dermfuse
