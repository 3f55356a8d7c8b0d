#pragma once

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtc/backbone.hpp"
#include "rtc/compensator.hpp"
#include "rtc/crr.hpp"
#include "rtc/ctr.hpp"
#include "rtc/dataset.hpp"
#include "rtc/io.hpp"
#include "rtc/random.hpp"
#include "rtc/tensor.hpp"

// Two-view training loop: classification, SEAM-style equivariance terms,
// cross-view contrast, compensatory feedback and a pseudo-mask supervised
// segmentation head, optimized with poly-scheduled momentum SGD. The
// segmentation term is switched on after a warm-up phase.

namespace rtc {

struct TrainConfig {
    double alpha = 0.1;
    double beta = 1.0;
    std::size_t top_k = 8;
    double tau = 0.1;
    double theta_conf = 0.5;
    double theta_fg = 0.55;
    double theta_bg = 0.35;
    double lr0 = 0.01;
    double poly_power = 0.9;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch = 4;
    std::size_t epochs_total = 10;
    std::size_t epochs_warmup = 3;
    std::size_t view1 = 64;
    std::size_t view2 = 32;
    std::uint64_t seed = 1;

    bool enable_crr = true;
    bool enable_ctr = true;
    bool enable_comloss = true;
    bool str_mode = false;
    bool pcm_mode = false;
    bool detach_affinity = false;
    bool detach_comp_target = true;
    bool cross_labels_self = false;

    void validate() const {
        auto fail = [](const char* field, const char* why) {
            throw std::invalid_argument(std::string("config.") + field + ": " + why);
        };
        if (!(theta_bg > 0.0 && theta_bg < theta_fg && theta_fg < 1.0))
            fail("theta_fg/theta_bg", "need 0 < theta_bg < theta_fg < 1");
        if (epochs_warmup >= epochs_total) fail("epochs_warmup", "must be < epochs_total");
        if (batch == 0) fail("batch", "must be positive");
        if (view1 % 8 != 0 || view2 % 8 != 0 || view1 == 0 || view2 == 0)
            fail("view1/view2", "view sizes must be positive multiples of 8");
        if (view2 > view1) fail("view2", "second view must not exceed the first");
        if (top_k == 0) fail("top_k", "must be >= 1");
        if (tau <= 0.0) fail("tau", "must be positive");
        if (str_mode && !enable_ctr) fail("str_mode", "requires enable_ctr");
        if (pcm_mode && !enable_crr) fail("pcm_mode", "substitutes the refinement path, enable_crr must stay on");
        if (lr0 < 0.0) fail("lr0", "must be nonnegative");
        if (alpha < 0.0 || beta < 0.0) fail("alpha/beta", "must be nonnegative");
    }

    CrrConfig crr_config() const {
        CrrConfig c;
        c.enabled = enable_crr;
        c.pcm_mode = pcm_mode;
        c.detach_affinity = detach_affinity;
        return c;
    }
    CtrConfig ctr_config() const {
        CtrConfig c;
        c.top_k = top_k;
        c.tau = tau;
        c.conf_threshold = theta_conf;
        c.str_mode = str_mode;
        c.cross_labels_self = cross_labels_self;
        return c;
    }
    ComConfig com_config() const {
        ComConfig c;
        c.top_k = top_k;
        c.detach_target = detach_comp_target;
        return c;
    }
};

struct StepLosses {
    double cls = 0.0, er = 0.0, ecr = 0.0, contrast = 0.0, com = 0.0, seg = 0.0;
    double total = 0.0;
};

inline double recompute_total(const StepLosses& l, double alpha, double beta) {
    return ((((l.cls + l.er) + l.ecr) + alpha * l.contrast) + beta * l.com) + l.seg;
}

// ---------------------------------------------------------------------------
// views
// ---------------------------------------------------------------------------

struct Views {
    Tensor v1, v2;
    std::size_t offset_y = 0, offset_x = 0;
    double scale = 1.0;  // v1 extent / v2 extent
};

inline Views make_views(const Tensor& image, std::size_t size1, std::size_t size2, Rng& rng) {
    detail::require(image.rank() == 3, "make_views: 3 x H x W image required");
    const std::size_t h = image.extent(1), w = image.extent(2);
    const std::size_t crop = std::min(size1, std::min(h, w));
    Views out;
    out.offset_y = static_cast<std::size_t>(rng.below(h - crop + 1));
    out.offset_x = static_cast<std::size_t>(rng.below(w - crop + 1));
    if (crop == h && crop == w) {
        out.v1 = image;
    } else {
        // crop by gathering rows of the flattened spatial grid
        std::vector<double> vals(3 * crop * crop);
        const auto& src = image.values();
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < crop; ++y)
                for (std::size_t x = 0; x < crop; ++x)
                    vals[(c * crop + y) * crop + x] =
                        src[(c * h + out.offset_y + y) * w + out.offset_x + x];
        out.v1 = Tensor::from({3, crop, crop}, std::move(vals));
    }
    out.v2 = bilinear_resize(out.v1, size2, size2);
    out.scale = static_cast<double>(crop) / static_cast<double>(size2);
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Stable binary cross-entropy with logits, one value per class.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<int>& label) {
    detail::require(logits.rank() == 1 && logits.extent(0) == label.size(),
                    "bce: logits/label size mismatch");
    std::vector<double> target(label.begin(), label.end());
    Tensor y = Tensor::from({label.size()}, std::move(target));
    Tensor softplus = log(add(exp(mul(abs(logits), Tensor::scalar(-1.0))), Tensor::scalar(1.0)));
    return add(sub(relu(logits), mul(logits, y)), softplus);
}

// Mean BCE over every (image, view, class) triple.
inline Tensor cls_loss(const std::vector<Tensor>& per_view_logits,
                       const std::vector<const std::vector<int>*>& labels) {
    detail::require(per_view_logits.size() == labels.size() && !labels.empty(),
                    "cls_loss: logits/label count mismatch");
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < per_view_logits.size(); ++i)
        parts.push_back(bce_with_logits(per_view_logits[i], *labels[i]));
    return mean_all(concat0(parts));
}

// Divides each class map by its spatial maximum plus a guard constant. The
// guard also bounds the gradient amplification (1/denominator) on near-zero
// maps, which otherwise drives early CAMs into the all-zero fixed point.
inline Tensor max_normalize(const Tensor& cams, double guard = 1e-8) {
    detail::require(cams.rank() == 3, "max_normalize: C x h x w CAMs required");
    const std::size_t c = cams.extent(0), hw = cams.extent(1) * cams.extent(2);
    Tensor flat = reshape(cams, {c, hw});
    Tensor maxes = add(reshape(max_axis(flat, 1), {c, 1}), Tensor::scalar(guard));
    Tensor denom = matmul(maxes, Tensor::full({1, hw}, 1.0));
    return reshape(divide(flat, denom), cams.shape());
}

inline constexpr double kEquivarianceGuard = 1.0;

struct EquivarianceLosses {
    Tensor er, ecr;
};

// L1 consistency between the rescaled view-1 maps and the view-2 maps, all
// max-normalized; the cross term swaps refined and raw maps across views.
inline EquivarianceLosses equivariance_losses(const Tensor& raw1, const Tensor& refined1,
                                              const Tensor& raw2, const Tensor& refined2,
                                              double guard = kEquivarianceGuard) {
    const std::size_t h2 = raw2.extent(1), w2 = raw2.extent(2);
    Tensor n_raw1 = max_normalize(raw1, guard);
    Tensor n_ref1 = max_normalize(refined1, guard);
    Tensor n_raw2 = max_normalize(raw2, guard);
    Tensor n_ref2 = max_normalize(refined2, guard);
    auto down = [&](const Tensor& t) { return bilinear_resize(t, h2, w2); };
    EquivarianceLosses out;
    out.er = mean_all(abs(sub(down(n_raw1), n_raw2)));
    out.ecr = add(mean_all(abs(sub(down(n_ref1), n_raw2))),
                  mean_all(abs(sub(down(n_raw1), n_ref2))));
    return out;
}

// ---------------------------------------------------------------------------
// pseudo-masks and segmentation
// ---------------------------------------------------------------------------

struct PseudoMask {
    std::vector<int> labels;   // 0 = background, 1..C = classes; only valid when !ignore
    std::vector<bool> ignore;  // confidence between the two thresholds
    std::size_t height = 0, width = 0;
};

// Dual-threshold rule on max-normalized present-class scores: confident
// foreground above theta_fg, background below theta_bg, an ignore band between.
inline PseudoMask pseudo_mask(const Tensor& refined, const std::vector<int>& present,
                              double theta_fg, double theta_bg, double eps = 1e-8) {
    detail::require(refined.rank() == 3, "pseudo_mask: C x h x w CAMs required");
    detail::require(theta_bg < theta_fg, "pseudo_mask: thresholds out of order");
    const std::size_t hw = refined.extent(1) * refined.extent(2);
    const auto& mv = refined.values();

    std::vector<double> class_max(present.size());
    for (std::size_t p = 0; p < present.size(); ++p) {
        const std::size_t c = static_cast<std::size_t>(present[p]);
        double mx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) mx = std::max(mx, mv[c * hw + i]);
        class_max[p] = mx + eps;
    }

    PseudoMask out;
    out.height = refined.extent(1);
    out.width = refined.extent(2);
    out.labels.assign(hw, 0);
    out.ignore.assign(hw, false);
    TraceCollector* tc = trace_collector();
    for (std::size_t i = 0; i < hw; ++i) {
        double best = -1.0;
        int best_cls = 0;
        for (std::size_t p = 0; p < present.size(); ++p) {
            const double s = mv[static_cast<std::size_t>(present[p]) * hw + i] / class_max[p];
            if (s > best) {
                best = s;
                best_cls = present[p] + 1;
            }
        }
        if (best >= theta_fg) {
            out.labels[i] = best_cls;
        } else if (best >= theta_bg) {
            out.ignore[i] = true;
        }
        if (tc) {
            tc->feed(static_cast<std::uint64_t>(out.labels[i]));
            tc->feed_bool(out.ignore[i]);
        }
    }
    return out;
}

inline Tensor seg_logits(const Tensor& f6, const ModelParams& p) {
    return conv_bias(f6, p.seg_k, p.seg_b);
}

// Mean cross-entropy over non-ignored pixels; zero when everything is ignored.
inline Tensor seg_loss(const Tensor& logits, const PseudoMask& mask) {
    detail::require(logits.rank() == 3, "seg_loss: (C+1) x h x w logits required");
    const std::size_t classes = logits.extent(0);
    const std::size_t hw = logits.extent(1) * logits.extent(2);
    detail::require(mask.labels.size() == hw, "seg_loss: mask size mismatch");
    std::vector<double> pick(classes * hw, 0.0);
    std::size_t scored = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        if (mask.ignore[i]) continue;
        pick[static_cast<std::size_t>(mask.labels[i]) * hw + i] = 1.0;
        ++scored;
    }
    if (scored == 0) return Tensor::scalar(0.0);
    Tensor scores = log_softmax(reshape(logits, {classes, hw}), 0);
    Tensor picked = mul(scores, Tensor::from({classes, hw}, std::move(pick)));
    return divide(mul(sum_all(picked), Tensor::scalar(-1.0)),
                  Tensor::scalar(static_cast<double>(scored)));
}

// ---------------------------------------------------------------------------
// optimizer and schedule
// ---------------------------------------------------------------------------

inline double poly_lr(std::size_t iter, std::size_t max_iter, double lr0, double power) {
    detail::require(iter <= max_iter && max_iter > 0, "poly_lr: iter out of range");
    return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

class SgdOptimizer {
public:
    SgdOptimizer(std::vector<std::pair<std::string, Tensor>> params, double momentum,
                 double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        velocity_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i)
            velocity_[i].assign(params_[i].second.numel(), 0.0);
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& t = params_[i].second;
            const auto& g = t.grad();
            auto& w = t.values_mut();
            auto& v = velocity_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double eff = g[j] + weight_decay_ * w[j];
                v[j] = momentum_ * v[j] + eff;
                w[j] -= lr * v[j];
            }
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_, weight_decay_;
};

// ---------------------------------------------------------------------------
// batch forward
// ---------------------------------------------------------------------------

struct ImageState {
    Views views;
    Tensor logits1, logits2;
    Tensor raw1, raw2;          // native grids
    Tensor refined1, refined2;  // native grids
    Tensor raw2_up, refined2_up;
    AlignedFeatures aligned;
    Tensor f6_view1;
    Tensor comp1, comp2;  // compensatory CAMs on the common grid
    PseudoMask pmask;
    std::vector<int> present;
};

struct BatchForward {
    StepLosses losses;
    Tensor total;  // graph scalar
    Tensor term_cls, term_er, term_ecr, term_contrast, term_com, term_seg;
    std::vector<ImageState> images;
};

inline BatchForward forward_batch(const std::vector<const Sample*>& batch,
                                  const ModelParams& params, const TrainConfig& cfg,
                                  bool warmup, Rng& view_rng) {
    detail::require(!batch.empty(), "forward_batch: empty batch");
    BatchForward out;
    const CrrConfig crr_cfg = cfg.crr_config();
    const CtrConfig ctr_cfg = cfg.ctr_config();

    std::vector<Tensor> all_logits;
    std::vector<const std::vector<int>*> all_labels;
    Tensor er_sum = Tensor::scalar(0.0);
    Tensor ecr_sum = Tensor::scalar(0.0);
    Tensor contrast_sum = Tensor::scalar(0.0);
    Tensor seg_sum = Tensor::scalar(0.0);

    for (const Sample* sample : batch) {
        ImageState st;
        for (std::size_t c = 0; c < sample->label.size(); ++c)
            if (sample->label[c]) st.present.push_back(static_cast<int>(c));
        detail::require(!st.present.empty(), "forward_batch: sample without any class");

        st.views = make_views(sample->image, cfg.view1, cfg.view2, view_rng);
        FeaturePyramid pyr1 = encode(st.views.v1, params);
        FeaturePyramid pyr2 = encode(st.views.v2, params);
        st.f6_view1 = pyr1.f6;
        st.logits1 = classify(pyr1.projected, params.classifier);
        st.logits2 = classify(pyr2.projected, params.classifier);
        st.raw1 = raw_cams(pyr1.projected, params.classifier);
        st.raw2 = raw_cams(pyr2.projected, params.classifier);
        st.refined1 = run_crr(pyr1, st.views.v1, st.raw1, params, crr_cfg).refined;
        st.refined2 = run_crr(pyr2, st.views.v2, st.raw2, params, crr_cfg).refined;

        const std::size_t h1 = st.raw1.extent(1), w1 = st.raw1.extent(2);
        st.raw2_up = bilinear_resize(st.raw2, h1, w1);
        st.refined2_up = bilinear_resize(st.refined2, h1, w1);
        st.aligned = align_views(pyr1.projected, pyr2.projected);

        all_logits.push_back(st.logits1);
        all_labels.push_back(&sample->label);
        all_logits.push_back(st.logits2);
        all_labels.push_back(&sample->label);

        EquivarianceLosses eq =
            equivariance_losses(st.raw1, st.refined1, st.raw2, st.refined2);
        er_sum = add(er_sum, eq.er);
        ecr_sum = add(ecr_sum, eq.ecr);

        if (cfg.enable_ctr) {
            CtrOutput ctr = ctr_total(st.refined1, st.refined2_up, st.aligned, st.present, ctr_cfg);
            contrast_sum = add(contrast_sum, ctr.loss);
        }

        if (!warmup) {
            st.pmask = pseudo_mask(st.refined1, st.present, cfg.theta_fg, cfg.theta_bg);
            seg_sum = add(seg_sum, seg_loss(seg_logits(pyr1.f6, params), st.pmask));
        }
        out.images.push_back(std::move(st));
    }

    const double n = static_cast<double>(batch.size());
    Tensor l_cls = cls_loss(all_logits, all_labels);
    Tensor l_er = divide(er_sum, Tensor::scalar(n));
    Tensor l_ecr = divide(ecr_sum, Tensor::scalar(n));
    Tensor l_contrast = divide(contrast_sum, Tensor::scalar(n));
    Tensor l_seg = warmup ? Tensor::scalar(0.0) : divide(seg_sum, Tensor::scalar(n));

    Tensor l_com = Tensor::scalar(0.0);
    if (cfg.enable_comloss) {
        const ComConfig com_cfg = cfg.com_config();
        ComViewInputs view1_in, view2_in;
        for (std::size_t b = 0; b < out.images.size(); ++b) {
            ImageState& st = out.images[b];
            view1_in.refined.push_back(st.refined1);
            view1_in.raw.push_back(st.raw1);
            view1_in.other_features.push_back(st.aligned.x2);
            view1_in.present.push_back(st.present);
            view2_in.refined.push_back(st.refined2_up);
            view2_in.raw.push_back(st.raw2_up);
            view2_in.other_features.push_back(st.aligned.x1);
            view2_in.present.push_back(st.present);
        }
        ComViewOutput com1 = comloss_view(view1_in, com_cfg);
        ComViewOutput com2 = comloss_view(view2_in, com_cfg);
        l_com = add(com1.loss, com2.loss);
        for (std::size_t b = 0; b < out.images.size(); ++b) {
            out.images[b].comp1 = com1.comp_cams[b];
            out.images[b].comp2 = com2.comp_cams[b];
        }
    }

    out.total = add(add(add(add(add(l_cls, l_er), l_ecr),
                            mul(Tensor::scalar(cfg.alpha), l_contrast)),
                        mul(Tensor::scalar(cfg.beta), l_com)),
                    l_seg);

    out.term_cls = l_cls;
    out.term_er = l_er;
    out.term_ecr = l_ecr;
    out.term_contrast = l_contrast;
    out.term_com = l_com;
    out.term_seg = l_seg;
    out.losses.cls = l_cls.item();
    out.losses.er = l_er.item();
    out.losses.ecr = l_ecr.item();
    out.losses.contrast = l_contrast.item();
    out.losses.com = l_com.item();
    out.losses.seg = l_seg.item();
    out.losses.total = out.total.item();
    return out;
}

inline StepLosses train_step(const std::vector<const Sample*>& batch, ModelParams& params,
                             SgdOptimizer& opt, const TrainConfig& cfg, bool warmup, double lr,
                             Rng& view_rng) {
    BatchForward fwd = forward_batch(batch, params, cfg, warmup, view_rng);
    if (!std::isfinite(fwd.losses.total)) {
        char msg[256];
        std::snprintf(msg, sizeof(msg),
                      "non-finite loss: cls=%g er=%g ecr=%g contrast=%g com=%g seg=%g",
                      fwd.losses.cls, fwd.losses.er, fwd.losses.ecr, fwd.losses.contrast,
                      fwd.losses.com, fwd.losses.seg);
        throw numeric_error(msg);
    }
    opt.zero_grad();
    backward(fwd.total);
    opt.step(lr);
    return fwd.losses;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline io::NamedTensors params_to_sections(const ModelParams& p) {
    io::NamedTensors out;
    for (const auto& [name, tensor] : p.named_parameters()) out.emplace_back(name, tensor);
    return out;
}

inline ModelParams params_from_sections(const io::NamedTensors& sections) {
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& [n, t] : sections)
            if (n == name) return t;
        throw std::runtime_error("checkpoint: missing section " + name);
    };
    const Tensor& cls = find("classifier.weight");
    ModelParams p = init_params(cls.extent(0), 0);
    for (auto& [name, tensor] : p.named_parameters()) {
        const Tensor& stored = find(name);
        detail::require(stored.shape() == tensor.shape(), "checkpoint: section shape mismatch");
        tensor.values_mut() = stored.values();
    }
    return p;
}

namespace detail {

template <typename Fn>
void for_each_param(ModelParams& p, Fn&& fn) {
    for (Tensor* t : {&p.stem1_k, &p.stem1_b, &p.stem2_k, &p.stem2_b, &p.stem3_k, &p.stem3_b,
                      &p.block5_k, &p.block5_b, &p.block6_k, &p.block6_b, &p.reduce4_k,
                      &p.reduce4_b, &p.reduce5_k, &p.reduce5_b, &p.reduce6_k, &p.reduce6_b,
                      &p.fuse_shallow_k, &p.fuse_shallow_b, &p.fuse_deep_k, &p.fuse_deep_b,
                      &p.proj_k, &p.proj_b, &p.classifier, &p.seg_k, &p.seg_b})
        fn(*t);
}

}  // namespace detail

// Deep copy without gradient tracking (cheap evaluation forwards).
inline ModelParams detached_params(const ModelParams& p) {
    ModelParams out = p;
    detail::for_each_param(out, [](Tensor& t) { t = Tensor::from(t.shape(), t.values(), false); });
    return out;
}

// Deep copy that keeps gradient tracking (parameter snapshots).
inline ModelParams clone_params(const ModelParams& p) {
    ModelParams out = p;
    detail::for_each_param(out, [](Tensor& t) { t = Tensor::from(t.shape(), t.values(), true); });
    return out;
}

}  // namespace rtc
