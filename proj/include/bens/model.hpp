#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bens/arch.hpp"
#include "bens/autodiff.hpp"
#include "bens/ops.hpp"
#include "bens/rng.hpp"

namespace bens {

/// Similarity scale applied to cosine scores before the cross-entropy term of the
/// cosine-plus-xe head.
inline constexpr double kCosineScale = 16.0;

enum class LayerKind { conv, batch_norm, relu, add, concat, max_pool, avg_pool, global_avg_pool, flatten, dropout, dense, cosine };

/// One step of a model program. Values live in numbered slots; slot 0 is the input.
struct Layer {
    LayerKind kind;
    int in = -1;
    int in2 = -1;
    int out = -1;
    int weight = -1;  // conv/dense kernel, batch-norm gamma, cosine prototypes
    int bias = -1;    // dense bias, batch-norm beta
    int stats = -1;   // batch-norm running statistics
    int stride = 1;
    double rate = 0.0;
    // geometry, kept for topology walks
    std::size_t out_h = 0, out_w = 0, in_channels = 0, out_channels = 0, kernel = 0;
};

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    bool decay = false;  // weight decay applies (conv/dense weights only)
    std::string init;
};

/// A built network: parameters, batch-norm state and the layer program.
template <class T>
struct ModelInstance {
    ArchitectureSpec spec;
    std::vector<Parameter<T>> params;
    std::vector<std::string> stats_names;
    std::vector<RunningStats<T>> bn_stats;
    std::vector<Layer> layers;
    std::size_t head_begin = 0;
    int num_slots = 1;
    int feature_slot = 0;
    int output_slot = 0;

    std::uint64_t parameter_total() const {
        std::uint64_t n = 0;
        for (const auto& p : params) n += p.value.numel();
        return n;
    }

    /// Walks the layer program: conv and dense MACs.
    FlopCount walked_flops() const {
        FlopCount f;
        for (const auto& l : layers) {
            if (l.kind == LayerKind::conv)
                f.macs += l.out_h * l.out_w * l.in_channels * l.out_channels * l.kernel * l.kernel;
            else if (l.kind == LayerKind::dense || l.kind == LayerKind::cosine)
                f.macs += l.in_channels * l.out_channels;
        }
        return f;
    }

    std::size_t count(LayerKind kind) const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.kind == kind;
        return n;
    }

    template <class U>
    ModelInstance<U> cast() const {
        ModelInstance<U> m;
        m.spec = spec;
        for (const auto& p : params) m.params.push_back({p.name, p.value.template cast<U>(), p.decay, p.init});
        m.stats_names = stats_names;
        for (const auto& s : bn_stats) {
            RunningStats<U> r;
            r.mean = s.mean.template cast<U>();
            r.var = s.var.template cast<U>();
            m.bn_stats.push_back(std::move(r));
        }
        m.layers = layers;
        m.head_begin = head_begin;
        m.num_slots = num_slots;
        m.feature_slot = feature_slot;
        m.output_slot = output_slot;
        return m;
    }
};

namespace detail {

template <class T>
class ModelBuilder {
   public:
    ModelBuilder(const ArchitectureSpec& spec, RngStream rng) : rng_(rng) {
        model_.spec = spec;
        shapes_.push_back({static_cast<std::size_t>(spec.input.height), static_cast<std::size_t>(spec.input.width),
                           static_cast<std::size_t>(spec.input.channels)});
    }

    int conv(int in, std::size_t cout, std::size_t k, int stride, const std::string& name) {
        auto [h, w, c] = shapes_[in];
        Layer l{LayerKind::conv, in};
        l.stride = stride;
        l.out_h = (h + stride - 1) / stride;
        l.out_w = (w + stride - 1) / stride;
        l.in_channels = c;
        l.out_channels = cout;
        l.kernel = k;
        const double std = std::sqrt(2.0 / static_cast<double>(k * k * c));
        l.weight = gaussian(name + ".weight", Shape{k, k, c, cout}, std, "he-normal");
        return emit(l, {l.out_h, l.out_w, cout});
    }

    int bn(int in, const std::string& name) {
        const std::size_t c = std::get<2>(shapes_[in]);
        Layer l{LayerKind::batch_norm, in};
        l.weight = constant(name + ".gamma", Shape{c}, T(1));
        l.bias = constant(name + ".beta", Shape{c}, T(0));
        l.stats = static_cast<int>(model_.bn_stats.size());
        model_.bn_stats.emplace_back(c);
        model_.stats_names.push_back(name);
        return emit(l, shapes_[in]);
    }

    int relu(int in) { return emit(Layer{LayerKind::relu, in}, shapes_[in]); }

    int dropout(int in, double rate) {
        if (rate <= 0.0) return in;
        Layer l{LayerKind::dropout, in};
        l.rate = rate;
        return emit(l, shapes_[in]);
    }

    int add(int a, int b) {
        Layer l{LayerKind::add, a, b};
        return emit(l, shapes_[a]);
    }

    int concat(int a, int b) {
        auto [h, w, ca] = shapes_[a];
        Layer l{LayerKind::concat, a, b};
        return emit(l, {h, w, ca + std::get<2>(shapes_[b])});
    }

    int pool(int in, LayerKind kind) {
        auto [h, w, c] = shapes_[in];
        Layer l{kind, in};
        l.stride = 2;
        if (kind == LayerKind::global_avg_pool) return emit(l, {1, 1, c});
        return emit(l, {(h - 2) / 2 + 1, (w - 2) / 2 + 1, c});
    }

    int flatten(int in) {
        auto [h, w, c] = shapes_[in];
        return emit(Layer{LayerKind::flatten, in}, {1, 1, h * w * c});
    }

    void mark_features(int slot) {
        model_.feature_slot = slot;
        model_.head_begin = model_.layers.size();
    }

    /// Classifier on the feature slot; built last so body initialisation does not
    /// depend on the head kind.
    void head(int features) {
        const auto& s = model_.spec;
        const std::size_t F = std::get<2>(shapes_[features]);
        const std::size_t K = s.num_classes;
        int x = features;
        if (s.family == Family::vgg) x = dropout(x, s.dropout_rate());
        if (s.head == Head::softmax_xe) {
            Layer l{LayerKind::dense, x};
            l.in_channels = F;
            l.out_channels = K;
            l.weight = gaussian("classifier.weight", Shape{F, K}, std::sqrt(1.0 / static_cast<double>(F)), "fan-in-normal");
            l.bias = constant("classifier.bias", Shape{K}, T(0));
            model_.params[l.weight].decay = true;
            model_.output_slot = emit(l, {1, 1, K});
        } else {
            Layer l{LayerKind::cosine, x};
            l.in_channels = F;
            l.out_channels = K;
            l.weight = gaussian("classifier.prototypes", Shape{K, F}, 1.0, "normal(unit-normalised at use)");
            model_.output_slot = emit(l, {1, 1, K});
        }
    }

    ModelInstance<T> finish() {
        model_.num_slots = static_cast<int>(shapes_.size());
        return std::move(model_);
    }

   private:
    int emit(Layer l, std::tuple<std::size_t, std::size_t, std::size_t> shape) {
        l.out = static_cast<int>(shapes_.size());
        shapes_.push_back(shape);
        model_.layers.push_back(l);
        return l.out;
    }

    int gaussian(const std::string& name, Shape shape, double std, const std::string& init) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<T>(rng_.normal() * std);
        model_.params.push_back({name, std::move(t), true, init + " std=" + std::to_string(std)});
        return static_cast<int>(model_.params.size() - 1);
    }

    int constant(const std::string& name, Shape shape, T value) {
        model_.params.push_back({name, Tensor<T>(std::move(shape), value), false, "constant"});
        return static_cast<int>(model_.params.size() - 1);
    }

    RngStream rng_;
    ModelInstance<T> model_;
    std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> shapes_;
};

template <class T>
void build_residual(ModelBuilder<T>& b, const ArchitectureSpec& s) {
    const bool wrn = s.family == Family::wrn;
    const std::size_t stem = wrn ? 16 : s.width;
    const std::size_t base = wrn ? 16ull * s.width : s.width;
    const double rate = s.dropout_rate();
    int x = b.relu(b.bn(b.conv(0, stem, 3, 1, "stem.conv"), "stem.bn"));
    std::size_t cin = stem;
    const int n = blocks_per_stage(s);
    for (int stage = 0; stage < 3; ++stage) {
        const std::size_t cout = base << stage;
        for (int blk = 0; blk < n; ++blk) {
            const std::string p = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(blk);
            const int stride = stage > 0 && blk == 0 ? 2 : 1;
            int y = b.relu(b.bn(b.conv(x, cout, 3, stride, p + ".conv1"), p + ".bn1"));
            y = b.dropout(y, rate);
            y = b.bn(b.conv(y, cout, 3, 1, p + ".conv2"), p + ".bn2");
            int shortcut = x;
            if (stride != 1 || cin != cout) shortcut = b.bn(b.conv(x, cout, 1, stride, p + ".proj"), p + ".proj_bn");
            x = b.relu(b.add(y, shortcut));
            cin = cout;
        }
    }
    int f = b.flatten(b.pool(x, LayerKind::global_avg_pool));
    b.mark_features(f);
    b.head(f);
}

template <class T>
void build_densenet(ModelBuilder<T>& b, const ArchitectureSpec& s) {
    const std::size_t k = s.width;
    int x = b.conv(0, 2 * k, 3, 1, "stem.conv");
    std::size_t ch = 2 * k;
    const int n = blocks_per_stage(s);
    for (int stack = 0; stack < 3; ++stack) {
        for (int blk = 0; blk < n; ++blk) {
            const std::string p = "stack" + std::to_string(stack + 1) + ".block" + std::to_string(blk);
            int y = b.conv(b.relu(b.bn(x, p + ".bn1")), 4 * k, 1, 1, p + ".conv1");
            y = b.conv(b.relu(b.bn(y, p + ".bn2")), k, 3, 1, p + ".conv2");
            y = b.dropout(y, s.dropout_rate());
            x = b.concat(x, y);
            ch += k;
        }
        if (stack < 2) {
            const std::string p = "transition" + std::to_string(stack + 1);
            x = b.conv(b.relu(b.bn(x, p + ".bn")), ch / 2, 1, 1, p + ".conv");
            ch /= 2;
            x = b.pool(x, LayerKind::avg_pool);
        }
    }
    x = b.relu(b.bn(x, "final.bn"));
    int f = b.flatten(b.pool(x, LayerKind::global_avg_pool));
    b.mark_features(f);
    b.head(f);
}

template <class T>
void build_vgg(ModelBuilder<T>& b, const ArchitectureSpec& s) {
    int x = 0;
    int block_index = 0;
    for (const auto& block : vgg_blocks(s.depth, s.width)) {
        ++block_index;
        int conv_index = 0;
        for (int ch : block) {
            const std::string p = "block" + std::to_string(block_index) + ".conv" + std::to_string(++conv_index);
            x = b.relu(b.bn(b.conv(x, static_cast<std::size_t>(ch), 3, 1, p), p + "_bn"));
        }
        x = b.pool(x, LayerKind::max_pool);
    }
    int f = b.flatten(x);
    b.mark_features(f);
    b.head(f);
}

}  // namespace detail

/// Builds a freshly initialised network: He-normal convs, fan-in normal classifier,
/// batch-norm gamma=1 / beta=0. Deterministic in (spec, rng).
template <class T = float>
ModelInstance<T> build(const ArchitectureSpec& spec, RngStream rng) {
    require_valid(spec);
    detail::ModelBuilder<T> b(spec, rng);
    switch (spec.family) {
        case Family::resnet:
        case Family::wrn: detail::build_residual(b, spec); break;
        case Family::densenet_bc: detail::build_densenet(b, spec); break;
        case Family::vgg: detail::build_vgg(b, spec); break;
    }
    return b.finish();
}

template <class T>
std::vector<Var<T>> bind_parameters(const ModelInstance<T>& m, Tape<T>& tape, bool requires_grad) {
    std::vector<Var<T>> vars;
    vars.reserve(m.params.size());
    for (const auto& p : m.params) vars.push_back(tape.leaf(p.value, requires_grad));
    return vars;
}

template <class T>
struct ForwardOutput {
    Var<T> features;
    Var<T> output;  // logits (softmax-xe) or cosine similarities
};

/// Runs the layer program. In train mode `update_stats` (usually &model.bn_stats of a
/// mutable copy) receives the batch-norm moving averages and `dropout_rng` drives the
/// masks.
template <class T>
ForwardOutput<T> forward(const ModelInstance<T>& m, std::span<const Var<T>> params, Var<T> input, Mode mode,
                         std::vector<RunningStats<T>>* update_stats = nullptr, RngStream* dropout_rng = nullptr,
                         bool features_only = false) {
    const auto& in = input.shape();
    const auto& is = m.spec.input;
    if (in.size() != 4 || in[1] != static_cast<std::size_t>(is.height) || in[2] != static_cast<std::size_t>(is.width) ||
        in[3] != static_cast<std::size_t>(is.channels))
        throw ShapeError("model " + arch_name(m.spec) + " expects [B," + std::to_string(is.height) + "," +
                         std::to_string(is.width) + "," + std::to_string(is.channels) + "] input, got " + shape_str(in));
    if (params.size() != m.params.size()) throw ShapeError("parameter binding does not match the model");

    std::vector<Var<T>> slots(m.num_slots);
    slots[0] = input;
    const std::size_t end = features_only ? m.head_begin : m.layers.size();
    for (std::size_t i = 0; i < end; ++i) {
        const Layer& l = m.layers[i];
        Var<T> x = slots[l.in];
        Var<T> y;
        switch (l.kind) {
            case LayerKind::conv: y = ops::conv2d(x, params[l.weight], std::nullopt, l.stride, Padding::same); break;
            case LayerKind::batch_norm: {
                RunningStats<T>* upd = update_stats ? &(*update_stats)[l.stats] : nullptr;
                y = ops::batch_norm(x, params[l.weight], params[l.bias], m.bn_stats[l.stats], upd, mode);
                break;
            }
            case LayerKind::relu: y = ops::relu(x); break;
            case LayerKind::add: y = ops::add(x, slots[l.in2]); break;
            case LayerKind::concat: y = ops::concat_channels(x, slots[l.in2]); break;
            case LayerKind::max_pool: y = ops::max_pool(x, 2, 2); break;
            case LayerKind::avg_pool: y = ops::avg_pool(x, 2, 2); break;
            case LayerKind::global_avg_pool: y = ops::global_avg_pool(x); break;
            case LayerKind::flatten: y = ops::flatten(x); break;
            case LayerKind::dropout:
                if (mode == Mode::train && !dropout_rng) throw ConfigError("train-mode dropout needs an rng stream");
                y = mode == Mode::train ? ops::dropout(x, l.rate, mode, *dropout_rng) : x;
                break;
            case LayerKind::dense: y = ops::dense(x, params[l.weight], std::optional<Var<T>>(params[l.bias])); break;
            case LayerKind::cosine:
                y = ops::matmul(ops::l2_normalize(x), ops::transpose(ops::l2_normalize(params[l.weight])));
                break;
        }
        slots[l.out] = y;
    }
    return {slots[m.feature_slot], features_only ? slots[m.feature_slot] : slots[m.output_slot]};
}

/// Post-pool, pre-classifier activations in eval mode.
template <class T>
Tensor<T> extract_features(const ModelInstance<T>& m, const Tensor<T>& batch) {
    Tape<T> tape;
    auto params = bind_parameters(m, tape, false);
    auto x = tape.constant(batch);
    return forward<T>(m, params, x, Mode::eval, nullptr, nullptr, true).features.value();
}

template <class T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t num_classes) {
    Tensor<T> t(Shape{labels.size(), num_classes}, T(0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
            throw ConfigError("label " + std::to_string(labels[i]) + " outside [0," + std::to_string(num_classes) + ")");
        t[i * num_classes + labels[i]] = T(1);
    }
    return t;
}

template <class T>
void check_one_hot(const Tensor<T>& t) {
    if (t.rank() != 2) throw ConfigError("targets must be [B,K] one-hot rows");
    const std::size_t K = t.dim(1);
    for (std::size_t b = 0; b < t.dim(0); ++b) {
        int ones = 0;
        for (std::size_t k = 0; k < K; ++k) {
            T v = t[b * K + k];
            if (v == T(1))
                ++ones;
            else if (v != T(0))
                throw ConfigError("target row " + std::to_string(b) + " is not one-hot");
        }
        if (ones != 1) throw ConfigError("target row " + std::to_string(b) + " is not one-hot");
    }
}

/// Training loss for the head kind, averaged over the batch.
/// softmax-xe: cross-entropy of softmax(logits). cosine: 1 - cos(embedding, target
/// prototype). cosine-plus-xe: cosine term + cross-entropy of kCosineScale * cosines.
template <class T>
Var<T> loss(Head head, Var<T> output, const Tensor<T>& targets) {
    check_one_hot(targets);
    if (output.shape() != targets.shape())
        throw ShapeError("loss: output " + shape_str(output.shape()) + " vs targets " + shape_str(targets.shape()));
    switch (head) {
        case Head::softmax_xe: return ops::softmax_cross_entropy(output, targets);
        case Head::cosine: return ops::affine(ops::target_dot_mean(output, targets), T(-1), T(1));
        case Head::cosine_plus_xe:
            return ops::add(ops::affine(ops::target_dot_mean(output, targets), T(-1), T(1)),
                            ops::softmax_cross_entropy(ops::scale(output, static_cast<T>(kCosineScale)), targets));
    }
    throw ConfigError("unknown head");
}

/// Scaling applied to a member's raw output before averaging: softmax for softmax-xe,
/// (1 + cos)/2 for cosine heads. Both land in [0,1]^K.
template <class T>
Var<T> phi(Var<T> output, Head head) {
    if (head == Head::softmax_xe) return ops::softmax(output);
    return ops::affine(output, T(0.5), T(0.5));
}

}  // namespace bens
