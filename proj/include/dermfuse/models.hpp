#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dermfuse/common.hpp"
#include "dermfuse/layers.hpp"
#include "dermfuse/rng.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

// Visits every tensor in a model as (hierarchical name, handle, is_state).
// Handles share storage with the model, so writing through them updates it.
using TensorVisitor = std::function<void(const std::string&, Tensor, bool)>;

enum class Act { none, relu, swish };

inline Tensor apply_act(const Tensor& x, Act act) {
    switch (act) {
        case Act::relu: return relu(x);
        case Act::swish: return swish(x);
        default: return x;
    }
}

// ---------------------------------------------------------------------------
// ConvUnit: conv2d, optional bias, optional batchnorm, activation.
// Backbone convs are bias-free and normalized; SE convs carry biases instead.
// ---------------------------------------------------------------------------
struct ConvUnit {
    Tensor weight;  // [O, C/g, kh, kw]
    Tensor bias;    // [O] when has_bias
    LayerParams bn;
    bool has_bias = false;
    bool has_bn = true;
    bool bn_stats_frozen = false;
    int64_t stride = 1, pad = 0, groups = 1;
    Act act = Act::none;

    static ConvUnit make(int64_t in, int64_t out, int64_t k, int64_t stride, int64_t pad,
                         int64_t groups, Act act, bool with_bn, bool with_bias, SeededRng& rng) {
        ConvUnit u;
        const int64_t fan_in = (in / groups) * k * k;
        u.weight = Tensor::normal({out, in / groups, k, k}, 0.0, std::sqrt(2.0 / double(fan_in)), rng);
        u.weight.set_requires_grad(true);
        u.has_bias = with_bias;
        if (with_bias) {
            u.bias = Tensor::zeros({out});
            u.bias.set_requires_grad(true);
        }
        u.has_bn = with_bn;
        if (with_bn) u.bn = make_batchnorm(out);
        u.stride = stride;
        u.pad = pad;
        u.groups = groups;
        u.act = act;
        return u;
    }

    int64_t out_channels() const { return weight.dim(0); }

    Tensor forward(const Tensor& x, Mode mode) {
        Tensor y = conv2d(x, weight, stride, stride, pad, pad, groups);
        if (has_bias) y = add(y, reshape(bias, {out_channels(), 1, 1}));
        if (has_bn) y = batchnorm(y, bn, bn_stats_frozen ? Mode::eval : mode);
        return apply_act(y, act);
    }

    void plan(int64_t& C, int64_t& H, int64_t& W) const {
        C = out_channels();
        H = (H + 2 * pad - weight.dim(2)) / stride + 1;
        W = (W + 2 * pad - weight.dim(3)) / stride + 1;
    }

    void visit(const std::string& p, const TensorVisitor& fn) {
        fn(p + ".weight", weight, false);
        if (has_bias) fn(p + ".bias", bias, false);
        if (has_bn) {
            fn(p + ".bn.gamma", bn.param("gamma"), false);
            fn(p + ".bn.beta", bn.param("beta"), false);
            fn(p + ".bn.running_mean", bn.state("running_mean"), true);
            fn(p + ".bn.running_var", bn.state("running_var"), true);
        }
    }

    void set_trainable(bool flag, bool freeze_bn_stats) {
        weight.set_requires_grad(flag);
        if (has_bias) bias.set_requires_grad(flag);
        if (has_bn) {
            bn.set_trainable(flag);
            bn_stats_frozen = flag ? false : freeze_bn_stats;
        }
    }
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

class Block {
public:
    virtual ~Block() = default;
    virtual Tensor forward(const Tensor& x, Mode mode, SeededRng& rng) = 0;
    virtual void visit(const std::string& prefix, const TensorVisitor& fn) = 0;
    virtual void set_trainable(bool flag, bool freeze_bn_stats) = 0;
    virtual void plan(int64_t& C, int64_t& H, int64_t& W) const = 0;
};

class ConvBlock : public Block {
public:
    ConvUnit conv;
    explicit ConvBlock(ConvUnit u) : conv(std::move(u)) {}
    Tensor forward(const Tensor& x, Mode mode, SeededRng&) override { return conv.forward(x, mode); }
    void visit(const std::string& p, const TensorVisitor& fn) override { conv.visit(p, fn); }
    void set_trainable(bool f, bool fz) override { conv.set_trainable(f, fz); }
    void plan(int64_t& C, int64_t& H, int64_t& W) const override { conv.plan(C, H, W); }
};

class MaxPoolBlock : public Block {
public:
    int64_t kernel, stride, pad;
    MaxPoolBlock(int64_t k, int64_t s, int64_t p) : kernel(k), stride(s), pad(p) {}
    Tensor forward(const Tensor& x, Mode, SeededRng&) override {
        return pool(x, PoolKind::max, kernel, kernel, stride, stride, pad, pad);
    }
    void visit(const std::string&, const TensorVisitor&) override {}
    void set_trainable(bool, bool) override {}
    void plan(int64_t&, int64_t& H, int64_t& W) const override {
        H = (H + 2 * pad - kernel) / stride + 1;
        W = (W + 2 * pad - kernel) / stride + 1;
    }
};

/// ResNet bottleneck: 1x1 reduce, 3x3 (carries the stage stride), 1x1 expand
/// by 4, each conv normalized; ReLU joins the residual sum. A projection
/// shortcut (1x1 conv + BN) stands in whenever shape changes.
class BottleneckBlock : public Block {
public:
    ConvUnit conv1, conv2, conv3;
    ConvUnit down;
    bool has_down = false;
    int64_t in_ch, out_ch;

    BottleneckBlock(int64_t in, int64_t width, int64_t stride, SeededRng& rng)
        : conv1(ConvUnit::make(in, width, 1, 1, 0, 1, Act::relu, true, false, rng)),
          conv2(ConvUnit::make(width, width, 3, stride, 1, 1, Act::relu, true, false, rng)),
          conv3(ConvUnit::make(width, width * 4, 1, 1, 0, 1, Act::none, true, false, rng)),
          in_ch(in),
          out_ch(width * 4) {
        if (stride != 1 || in != out_ch) {
            down = ConvUnit::make(in, out_ch, 1, stride, 0, 1, Act::none, true, false, rng);
            has_down = true;
        }
    }

    Tensor forward(const Tensor& x, Mode mode, SeededRng&) override {
        Tensor branch = conv3.forward(conv2.forward(conv1.forward(x, mode), mode), mode);
        Tensor shortcut = has_down ? down.forward(x, mode) : x;
        return relu(add(branch, shortcut));
    }
    void visit(const std::string& p, const TensorVisitor& fn) override {
        conv1.visit(p + ".conv1", fn);
        conv2.visit(p + ".conv2", fn);
        conv3.visit(p + ".conv3", fn);
        if (has_down) down.visit(p + ".down", fn);
    }
    void set_trainable(bool f, bool fz) override {
        conv1.set_trainable(f, fz);
        conv2.set_trainable(f, fz);
        conv3.set_trainable(f, fz);
        if (has_down) down.set_trainable(f, fz);
    }
    void plan(int64_t& C, int64_t& H, int64_t& W) const override {
        C = out_ch;
        H = (H + 2 - 3) / conv2.stride + 1;
        W = (W + 2 - 3) / conv2.stride + 1;
    }
};

/// Mobile inverted bottleneck: 1x1 expansion (omitted at ratio 1), depthwise
/// k x k, squeeze-and-excitation, 1x1 projection. Identity skip plus
/// drop-connect applies only on stride-1 blocks that keep their channel
/// count, i.e. the repeats within a stage.
class MBConvBlock : public Block {
public:
    bool has_expand;
    ConvUnit expand, dw, project;
    LayerParams se;
    int64_t squeeze_ch;
    bool skip;
    double survival;
    int64_t in_ch, out_ch, expanded_ch;

    MBConvBlock(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t expand_ratio,
                double survival_p, SeededRng& rng)
        : has_expand(expand_ratio != 1),
          squeeze_ch(std::max<int64_t>(1, int64_t(std::llround(0.25 * double(in))))),
          skip(stride == 1 && in == out),
          survival(survival_p),
          in_ch(in),
          out_ch(out),
          expanded_ch(in * expand_ratio) {
        if (expand_ratio < 1) throw ConfigError("mbconv: expand_ratio must be >= 1");
        if (has_expand)
            expand = ConvUnit::make(in, expanded_ch, 1, 1, 0, 1, Act::swish, true, false, rng);
        dw = ConvUnit::make(expanded_ch, expanded_ch, kernel, stride, kernel / 2, expanded_ch,
                            Act::swish, true, false, rng);
        se = make_se_block(expanded_ch, squeeze_ch, rng);
        project = ConvUnit::make(expanded_ch, out, 1, 1, 0, 1, Act::none, true, false, rng);
    }

    Tensor forward(const Tensor& x, Mode mode, SeededRng& rng) override {
        Tensor h = has_expand ? expand.forward(x, mode) : x;
        h = dw.forward(h, mode);
        h = se_block(h, se, squeeze_ch);
        h = project.forward(h, mode);
        if (skip) {
            h = drop_connect(h, survival, mode, rng);
            h = add(h, x);
        }
        return h;
    }
    void visit(const std::string& p, const TensorVisitor& fn) override {
        if (has_expand) expand.visit(p + ".expand", fn);
        dw.visit(p + ".dw", fn);
        fn(p + ".se.reduce_weight", se.param("reduce_weight"), false);
        fn(p + ".se.reduce_bias", se.param("reduce_bias"), false);
        fn(p + ".se.expand_weight", se.param("expand_weight"), false);
        fn(p + ".se.expand_bias", se.param("expand_bias"), false);
        project.visit(p + ".project", fn);
    }
    void set_trainable(bool f, bool fz) override {
        if (has_expand) expand.set_trainable(f, fz);
        dw.set_trainable(f, fz);
        se.set_trainable(f);
        project.set_trainable(f, fz);
    }
    void plan(int64_t& C, int64_t& H, int64_t& W) const override {
        C = out_ch;
        const int64_t k = dw.weight.dim(2);
        H = (H + 2 * (k / 2) - k) / dw.stride + 1;
        W = (W + 2 * (k / 2) - k) / dw.stride + 1;
    }
};

/// FNN hidden layer: dense, batch standardization, ReLU, dropout.
class DenseBlock : public Block {
public:
    LayerParams fc;
    LayerParams bn;
    bool bn_stats_frozen = false;
    double dropout_p;
    int64_t out_width;

    DenseBlock(int64_t in, int64_t out, double p, SeededRng& rng)
        : fc(make_dense(in, out, rng)), bn(make_batchnorm(out)), dropout_p(p), out_width(out) {}

    Tensor forward(const Tensor& x, Mode mode, SeededRng& rng) override {
        Tensor h = dense(x, fc);
        h = batchnorm(h, bn, bn_stats_frozen ? Mode::eval : mode);
        h = relu(h);
        return dropout(h, dropout_p, mode, rng);
    }
    void visit(const std::string& p, const TensorVisitor& fn) override {
        fn(p + ".weight", fc.param("weight"), false);
        fn(p + ".bias", fc.param("bias"), false);
        fn(p + ".bn.gamma", bn.param("gamma"), false);
        fn(p + ".bn.beta", bn.param("beta"), false);
        fn(p + ".bn.running_mean", bn.state("running_mean"), true);
        fn(p + ".bn.running_var", bn.state("running_var"), true);
    }
    void set_trainable(bool f, bool fz) override {
        fc.set_trainable(f);
        bn.set_trainable(f);
        bn_stats_frozen = f ? false : fz;
    }
    void plan(int64_t& C, int64_t&, int64_t&) const override { C = out_width; }
};

// ---------------------------------------------------------------------------
// Stage descriptions (used by builders and by the summary table)
// ---------------------------------------------------------------------------

enum class BlockKind { stem_conv, max_pool, resnet_bottleneck, mbconv, head_conv, classifier };

struct StageSpec {
    BlockKind kind;
    int64_t kernel = 1;
    int64_t stride = 1;
    int64_t out_channels = 0;
    int64_t repeats = 1;
    int64_t expand_ratio = 0;  // mbconv only
    double se_ratio = 0.0;     // 0 = none

    void validate() const {
        if (stride != 1 && stride != 2) throw ConfigError("stage: stride must be 1 or 2");
        if (kind == BlockKind::mbconv) {
            if (expand_ratio != 1 && expand_ratio != 6)
                throw ConfigError("stage: mbconv expand_ratio must be 1 or 6");
        } else if (expand_ratio != 0) {
            throw ConfigError("stage: expand_ratio only applies to mbconv");
        }
        if (repeats < 1) throw ConfigError("stage: repeats must be positive");
    }
};

struct ScalingConfig {
    double width_mult = 1.0;
    double depth_mult = 1.0;
    int64_t resolution = 224;
    double dropout_rate = 0.2;

    void validate() const {
        if (width_mult <= 0.0 || depth_mult <= 0.0)
            throw ConfigError("scaling: multipliers must be positive");
        if (resolution < 1) throw ConfigError("scaling: resolution must be positive");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("scaling: dropout_rate must be in [0,1)");
    }
};

/// Published compound-scaling coefficients for the named variants.
inline ScalingConfig preset_scaling(const std::string& name) {
    if (name == "b0") return {1.0, 1.0, 224, 0.2};
    if (name == "b1") return {1.0, 1.1, 240, 0.2};
    if (name == "b2") return {1.1, 1.2, 260, 0.3};
    if (name == "b3") return {1.2, 1.4, 300, 0.3};
    if (name == "b4") return {1.4, 1.8, 380, 0.4};
    if (name == "b5") return {1.6, 2.2, 456, 0.4};
    if (name == "b6") return {1.8, 2.6, 528, 0.5};
    if (name == "b7") return {2.0, 3.1, 600, 0.5};
    throw ConfigError("unknown scaling preset '" + name + "'");
}

/// Width scaling: round to the nearest multiple of 8, never dropping below
/// 90% of the scaled target.
inline int64_t round_filters(int64_t channels, double width_mult) {
    if (width_mult == 1.0) return channels;
    const double scaled = double(channels) * width_mult;
    int64_t out = std::max<int64_t>(8, int64_t(scaled + 4.0) / 8 * 8);
    if (double(out) < 0.9 * scaled) out += 8;
    return out;
}

inline int64_t round_repeats(int64_t repeats, double depth_mult) {
    if (depth_mult == 1.0) return repeats;
    return int64_t(std::ceil(double(repeats) * depth_mult));
}

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------

struct ParamCounts {
    int64_t total = 0;
    int64_t trainable = 0;
    int64_t non_trainable = 0;
};

enum class CountMode { standard, include_frozen };

struct SummaryRow {
    std::string stage;
    std::string kind;
    int64_t kernel, stride, channels, repeats, params;
};

class ModelGraph {
public:
    std::string arch_id;
    bool image_input = true;   // false: flat feature input (FNN)
    int64_t input_channels = 3;
    int64_t input_width = 0;   // FNN input features
    int64_t resolution = 224;  // nominal image extent
    int64_t feature_width = 0;
    int64_t class_count = 0;   // 0: headless (FNN)
    double classifier_dropout = 0.0;
    LayerParams classifier;  // dense weight+bias when class_count > 0
    std::vector<std::unique_ptr<Block>> blocks;
    std::vector<StageSpec> stages;
    std::vector<std::string> block_stage;  // stage label per block

    /// Runs the backbone and emits the flat feature vector
    /// (global-average-pooled for image graphs).
    Tensor forward_features(const Tensor& x, Mode mode, SeededRng& rng) {
        check_input(x);
        Tensor h = x;
        for (auto& b : blocks) h = b->forward(h, mode, rng);
        if (image_input) h = reshape(pool(h, PoolKind::global_avg), {x.dim(0), feature_width});
        return h;
    }

    /// Full classifier path: features, dropout, dense, softmax probabilities.
    Tensor forward(const Tensor& x, Mode mode, SeededRng& rng) {
        if (class_count == 0) throw ConfigError(arch_id + ": graph has no classifier");
        Tensor h = forward_features(x, mode, rng);
        h = dropout(h, classifier_dropout, mode, rng);
        return softmax(dense(h, classifier));
    }

    void visit(const TensorVisitor& fn, const std::string& prefix = "") {
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i]->visit(prefix + block_stage[i], fn);
        if (class_count > 0) {
            fn(prefix + "classifier.weight", classifier.param("weight"), false);
            fn(prefix + "classifier.bias", classifier.param("bias"), false);
        }
    }

    void set_trainable(bool flag, bool freeze_bn_stats = true) {
        for (auto& b : blocks) b->set_trainable(flag, freeze_bn_stats);
        if (class_count > 0) classifier.set_trainable(flag);
    }

    /// Symbolic shape propagation: per-block output (C,H,W) for a given
    /// input extent.
    std::vector<std::array<int64_t, 3>> plan_shapes(int64_t hw) const {
        int64_t C = image_input ? input_channels : input_width;
        int64_t H = image_input ? hw : 1;
        int64_t W = H;
        std::vector<std::array<int64_t, 3>> out;
        for (const auto& b : blocks) {
            b->plan(C, H, W);
            out.push_back({C, H, W});
        }
        return out;
    }

    std::string summary() const {
        std::ostringstream os;
        os << arch_id << "\n";
        os << std::left << std::setw(10) << "stage" << std::setw(14) << "kind" << std::setw(8)
           << "kernel" << std::setw(8) << "stride" << std::setw(10) << "channels" << std::setw(9)
           << "repeats" << "params" << "\n";
        for (const SummaryRow& r : summary_rows()) {
            os << std::left << std::setw(10) << r.stage << std::setw(14) << r.kind << std::setw(8)
               << r.kernel << std::setw(8) << r.stride << std::setw(10) << r.channels << std::setw(9)
               << r.repeats << r.params << "\n";
        }
        const ParamCounts pc = count();
        os << "total " << pc.total << " trainable " << pc.trainable << " non-trainable "
           << pc.non_trainable << "\n";
        return os.str();
    }

    std::vector<SummaryRow> summary_rows() const {
        std::vector<SummaryRow> rows;
        auto* self = const_cast<ModelGraph*>(this);
        size_t bi = 0;
        for (const StageSpec& s : stages) {
            SummaryRow row;
            row.stage = stage_name(rows.size());
            row.kind = kind_name(s.kind);
            row.kernel = s.kernel;
            row.stride = s.stride;
            row.channels = s.out_channels;
            row.repeats = s.repeats;
            row.params = 0;
            const std::string label = block_stage.empty() ? "" : stage_label_for(s, rows.size());
            (void)label;
            // sum parameters of the blocks belonging to this stage
            const int64_t nblocks = (s.kind == BlockKind::resnet_bottleneck ||
                                     s.kind == BlockKind::mbconv)
                                        ? s.repeats
                                        : (s.kind == BlockKind::classifier ? 0 : 1);
            for (int64_t k = 0; k < nblocks && bi < self->blocks.size(); ++k, ++bi) {
                self->blocks[bi]->visit("", [&](const std::string&, Tensor t, bool) {
                    row.params += t.numel();
                });
            }
            if (s.kind == BlockKind::classifier) row.params = classifier.param_count();
            rows.push_back(row);
        }
        return rows;
    }

    ParamCounts count(CountMode mode = CountMode::standard) const {
        ParamCounts pc;
        const_cast<ModelGraph*>(this)->visit([&](const std::string&, Tensor t, bool is_state) {
            pc.total += t.numel();
            if (is_state || (mode == CountMode::include_frozen && !t.requires_grad()))
                pc.non_trainable += t.numel();
            else
                pc.trainable += t.numel();
        });
        return pc;
    }

    /// Canonical architecture signature: arch id plus every tensor name and
    /// shape, for checkpoint compatibility checks.
    std::string signature() const {
        std::ostringstream os;
        os << arch_id << "|in=" << (image_input ? input_channels : input_width) << "|";
        const_cast<ModelGraph*>(this)->visit([&](const std::string& n, Tensor t, bool) {
            os << n << ":" << shape_str(t.shape()) << ";";
        });
        return os.str();
    }

private:
    void check_input(const Tensor& x) const {
        if (image_input) {
            if (x.rank() != 4 || x.dim(1) != input_channels)
                throw ShapeError(arch_id + ": expected [N," + std::to_string(input_channels) +
                                 ",H,W], got " + shape_str(x.shape()));
        } else {
            if (x.rank() != 2 || x.dim(1) != input_width)
                throw ShapeError(arch_id + ": expected [N," + std::to_string(input_width) +
                                 "], got " + shape_str(x.shape()));
        }
    }

    static std::string kind_name(BlockKind k) {
        switch (k) {
            case BlockKind::stem_conv: return "stem_conv";
            case BlockKind::max_pool: return "max_pool";
            case BlockKind::resnet_bottleneck: return "bottleneck";
            case BlockKind::mbconv: return "mbconv";
            case BlockKind::head_conv: return "head_conv";
            default: return "classifier";
        }
    }
    std::string stage_name(size_t idx) const { return "stage" + std::to_string(idx + 1); }
    std::string stage_label_for(const StageSpec&, size_t idx) const { return stage_name(idx); }
};

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

inline ModelGraph build_resnet50(int64_t classes, int64_t input_channels, SeededRng& rng) {
    if (classes < 2) throw ConfigError("build_resnet50: classes must be >= 2");
    if (input_channels < 1) throw ConfigError("build_resnet50: input_channels must be positive");
    ModelGraph g;
    g.arch_id = "resnet50";
    g.input_channels = input_channels;
    g.resolution = 224;
    g.class_count = classes;
    g.classifier_dropout = 0.5;

    g.stages.push_back({BlockKind::stem_conv, 7, 2, 64, 1});
    g.blocks.push_back(std::make_unique<ConvBlock>(
        ConvUnit::make(input_channels, 64, 7, 2, 3, 1, Act::relu, true, false, rng)));
    g.block_stage.push_back("stem");

    g.stages.push_back({BlockKind::max_pool, 3, 2, 64, 1});
    g.blocks.push_back(std::make_unique<MaxPoolBlock>(3, 2, 1));
    g.block_stage.push_back("pool");

    const int64_t widths[4] = {64, 128, 256, 512};
    const int64_t repeats[4] = {3, 4, 6, 3};
    int64_t in = 64;
    for (int s = 0; s < 4; ++s) {
        const int64_t stage_stride = (s == 0) ? 1 : 2;
        g.stages.push_back(
            {BlockKind::resnet_bottleneck, 3, stage_stride, widths[s] * 4, repeats[s]});
        for (int64_t r = 0; r < repeats[s]; ++r) {
            const int64_t stride = (r == 0) ? stage_stride : 1;
            g.blocks.push_back(std::make_unique<BottleneckBlock>(in, widths[s], stride, rng));
            g.block_stage.push_back("stage" + std::to_string(s + 2) + ".block" +
                                    std::to_string(r + 1));
            in = widths[s] * 4;
        }
    }
    g.feature_width = in;  // 2048

    g.stages.push_back({BlockKind::classifier, 1, 1, classes, 1});
    g.classifier = make_dense(g.feature_width, classes, rng);
    for (StageSpec& s : g.stages) s.validate();
    return g;
}

inline ModelGraph build_efficientnet(const ScalingConfig& scaling, int64_t classes, SeededRng& rng,
                                     int64_t input_channels = 3, double drop_connect_survival = 0.8) {
    scaling.validate();
    if (classes < 2) throw ConfigError("build_efficientnet: classes must be >= 2");
    ModelGraph g;
    g.arch_id = "efficientnet";
    g.input_channels = input_channels;
    g.resolution = scaling.resolution;
    g.class_count = classes;
    g.classifier_dropout = scaling.dropout_rate;

    // base stage table: out channels, repeats, kernel, stride, expand ratio
    struct Row {
        int64_t out, reps, kernel, stride, expand;
    };
    const Row base[7] = {{16, 1, 3, 1, 1}, {24, 2, 3, 2, 6}, {40, 2, 5, 2, 6}, {80, 3, 3, 2, 6},
                         {112, 3, 5, 1, 6}, {192, 4, 5, 2, 6}, {320, 1, 3, 1, 6}};

    int64_t in = round_filters(32, scaling.width_mult);
    g.stages.push_back({BlockKind::stem_conv, 3, 2, in, 1});
    g.blocks.push_back(std::make_unique<ConvBlock>(
        ConvUnit::make(input_channels, in, 3, 2, 1, 1, Act::swish, true, false, rng)));
    g.block_stage.push_back("stage1");

    for (int s = 0; s < 7; ++s) {
        const int64_t out = round_filters(base[s].out, scaling.width_mult);
        const int64_t reps = round_repeats(base[s].reps, scaling.depth_mult);
        g.stages.push_back(
            {BlockKind::mbconv, base[s].kernel, base[s].stride, out, reps, base[s].expand, 0.25});
        for (int64_t r = 0; r < reps; ++r) {
            const int64_t stride = (r == 0) ? base[s].stride : 1;
            g.blocks.push_back(std::make_unique<MBConvBlock>(
                in, out, base[s].kernel, stride, base[s].expand, drop_connect_survival, rng));
            g.block_stage.push_back("stage" + std::to_string(s + 2) + ".block" +
                                    std::to_string(r + 1));
            in = out;
        }
    }

    const int64_t head = round_filters(1280, scaling.width_mult);
    g.stages.push_back({BlockKind::head_conv, 1, 1, head, 1});
    g.blocks.push_back(std::make_unique<ConvBlock>(
        ConvUnit::make(in, head, 1, 1, 0, 1, Act::swish, true, false, rng)));
    g.block_stage.push_back("stage9");
    g.feature_width = head;

    g.stages.push_back({BlockKind::classifier, 1, 1, classes, 1});
    g.classifier = make_dense(head, classes, rng);
    for (StageSpec& s : g.stages) s.validate();
    return g;
}

inline ModelGraph build_fnn(int64_t input_dim, const std::vector<int64_t>& hidden, double dropout_p,
                            SeededRng& rng) {
    if (input_dim < 1) throw ConfigError("build_fnn: input_dim must be positive");
    if (hidden.empty()) throw ConfigError("build_fnn: hidden layer list is empty");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("build_fnn: dropout_p must be in [0,1)");
    ModelGraph g;
    g.arch_id = "fnn";
    g.image_input = false;
    g.input_width = input_dim;
    int64_t in = input_dim;
    for (size_t i = 0; i < hidden.size(); ++i) {
        if (hidden[i] < 1) throw ConfigError("build_fnn: hidden width must be positive");
        g.blocks.push_back(std::make_unique<DenseBlock>(in, hidden[i], dropout_p, rng));
        g.block_stage.push_back("hidden" + std::to_string(i + 1));
        in = hidden[i];
    }
    g.feature_width = in;
    return g;
}

// ---------------------------------------------------------------------------
// Fusion model: image branch features + tabular branch features, one hidden
// fusion layer, 2-way softmax. The malignant probability is column 1.
// ---------------------------------------------------------------------------

enum class Selector { all, image_branch, tabular_branch, head };

class FusionModel {
public:
    ModelGraph image;
    ModelGraph tabular;
    LayerParams head_dense1;
    LayerParams head_bn;
    bool head_bn_stats_frozen = false;
    LayerParams head_dense2;
    double head_dropout = 0.3;
    int64_t head_hidden = 128;

    Tensor forward(const Tensor& images, const Tensor& features, Mode mode, SeededRng& rng) {
        Tensor fi = image.forward_features(images, mode, rng);
        Tensor ft = tabular.forward_features(features, mode, rng);
        Tensor h = concat_cols({fi, ft});
        h = dense(h, head_dense1);
        h = batchnorm(h, head_bn, head_bn_stats_frozen ? Mode::eval : mode);
        h = relu(h);
        h = dropout(h, head_dropout, mode, rng);
        return softmax(dense(h, head_dense2));
    }

    void visit(const TensorVisitor& fn) {
        image.visit(fn);  // unprefixed: fusion checkpoints line up with backbone ones
        tabular.visit(fn, "tabular.");
        fn("fusion_head.dense1.weight", head_dense1.param("weight"), false);
        fn("fusion_head.dense1.bias", head_dense1.param("bias"), false);
        fn("fusion_head.bn.gamma", head_bn.param("gamma"), false);
        fn("fusion_head.bn.beta", head_bn.param("beta"), false);
        fn("fusion_head.bn.running_mean", head_bn.state("running_mean"), true);
        fn("fusion_head.bn.running_var", head_bn.state("running_var"), true);
        fn("fusion_head.dense2.weight", head_dense2.param("weight"), false);
        fn("fusion_head.dense2.bias", head_dense2.param("bias"), false);
    }

    void set_trainable(Selector sel, bool flag, bool freeze_bn_stats = true) {
        switch (sel) {
            case Selector::all:
                image.set_trainable(flag, freeze_bn_stats);
                tabular.set_trainable(flag, freeze_bn_stats);
                set_head_trainable(flag, freeze_bn_stats);
                break;
            case Selector::image_branch: image.set_trainable(flag, freeze_bn_stats); break;
            case Selector::tabular_branch: tabular.set_trainable(flag, freeze_bn_stats); break;
            case Selector::head: set_head_trainable(flag, freeze_bn_stats); break;
        }
        freeze_branch_classifiers();
    }

    ParamCounts count(CountMode mode = CountMode::standard) const {
        ParamCounts pc;
        const_cast<FusionModel*>(this)->visit([&](const std::string&, Tensor t, bool is_state) {
            pc.total += t.numel();
            if (is_state || (mode == CountMode::include_frozen && !t.requires_grad()))
                pc.non_trainable += t.numel();
            else
                pc.trainable += t.numel();
        });
        return pc;
    }

    std::string signature() const {
        std::ostringstream os;
        os << "fusion[" << image.arch_id << "+" << tabular.arch_id << "]|";
        const_cast<FusionModel*>(this)->visit([&](const std::string& n, Tensor t, bool) {
            os << n << ":" << shape_str(t.shape()) << ";";
        });
        return os.str();
    }

    /// The branch softmax heads are bypassed by forward(); they stay frozen so
    /// a training loop never sees trainable parameters outside the graph.
    void freeze_branch_classifiers() {
        if (image.class_count > 0) image.classifier.set_trainable(false);
        if (tabular.class_count > 0) tabular.classifier.set_trainable(false);
    }

private:
    void set_head_trainable(bool flag, bool freeze_bn_stats) {
        head_dense1.set_trainable(flag);
        head_bn.set_trainable(flag);
        head_bn_stats_frozen = flag ? false : freeze_bn_stats;
        head_dense2.set_trainable(flag);
    }
};

inline FusionModel build_fusion(ModelGraph image_branch, ModelGraph tabular_branch,
                                int64_t head_hidden, double dropout_p, SeededRng& rng) {
    if (image_branch.feature_width < 1 || tabular_branch.feature_width < 1)
        throw ShapeError("build_fusion: branches must emit flat feature vectors");
    if (head_hidden < 1) throw ConfigError("build_fusion: head_hidden must be positive");
    FusionModel f;
    f.image = std::move(image_branch);
    f.tabular = std::move(tabular_branch);
    f.head_hidden = head_hidden;
    f.head_dropout = dropout_p;
    const int64_t in = f.image.feature_width + f.tabular.feature_width;
    f.head_dense1 = make_dense(in, head_hidden, rng);
    f.head_bn = make_batchnorm(head_hidden);
    f.head_dense2 = make_dense(head_hidden, 2, rng);
    f.freeze_branch_classifiers();
    return f;
}

// Spec-shaped free functions.
inline ParamCounts count_params(const ModelGraph& g, CountMode mode = CountMode::standard) {
    return g.count(mode);
}
inline ParamCounts count_params(const FusionModel& f, CountMode mode = CountMode::standard) {
    return f.count(mode);
}
inline Tensor forward(FusionModel& f, const Tensor& images, const Tensor& features, Mode mode,
                      SeededRng& rng) {
    return f.forward(images, features, mode, rng);
}
inline void set_trainable(FusionModel& f, Selector sel, bool flag, bool freeze_bn_stats = true) {
    f.set_trainable(sel, flag, freeze_bn_stats);
}

}  // namespace dermfuse
