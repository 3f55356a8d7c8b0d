#pragma once

#include <map>
#include <string>
#include <vector>

#include "rtc/dataset.hpp"
#include "rtc/trainer.hpp"

// Finite-difference verification of every loss term on a small batch.
//
// Analytic gradients come from one recorded forward per term; numeric ones
// from central differences over a deterministic sample of each parameter
// tensor. A parameter is excluded when nudging it by the kink radius changes
// any discrete decision of the forward pass (relu signs, argmax positions,
// top-k sets, threshold bands), detected by comparing trace signatures.

namespace rtc {

struct GradCheckConfig {
    double fd_step = 1e-5;
    double kink_radius = 1e-4;
    double tolerance = 1e-3;
    std::size_t samples_per_tensor = 8;
    std::uint64_t seed = 7;
};

struct GradCheckEntry {
    std::string term;
    std::string param;
    double worst_rel_err = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_term_param;
    std::map<std::string, double> worst_per_term;
    std::string worst_param;
    std::string worst_term;
    double worst = 0.0;
    std::size_t total_checked = 0;
    std::size_t total_skipped = 0;
    bool passed = false;
};

namespace detail {

inline const std::vector<std::string>& loss_term_names() {
    static const std::vector<std::string> names = {"cls", "er",  "ecr", "contrast",
                                                   "com", "seg", "total"};
    return names;
}

inline std::vector<const Tensor*> loss_term_tensors(const BatchForward& fwd) {
    return {&fwd.term_cls, &fwd.term_er,  &fwd.term_ecr, &fwd.term_contrast,
            &fwd.term_com, &fwd.term_seg, &fwd.total};
}

inline std::vector<double> loss_term_values(const BatchForward& fwd) {
    std::vector<double> out;
    for (const Tensor* t : loss_term_tensors(fwd)) out.push_back(t->item());
    return out;
}

}  // namespace detail

namespace detail {

// Stop-gradient targets make the optimized gradient differ from the true
// derivative of the recomputed loss, so finite differences must evaluate the
// compensatory term against targets frozen at the base parameters. This
// recomputes that frozen-target L1 with exactly the reduction used in
// comloss_view.
inline double frozen_com_value(const BatchForward& fwd,
                               const std::vector<std::vector<double>>& targets1,
                               const std::vector<std::vector<double>>& targets2) {
    double total1 = 0.0, total2 = 0.0;
    std::size_t scored1 = 0, scored2 = 0;
    for (std::size_t b = 0; b < fwd.images.size(); ++b) {
        const ImageState& st = fwd.images[b];
        const std::size_t hw = st.raw1.extent(1) * st.raw1.extent(2);
        for (int cls : st.present) {
            const std::size_t c = static_cast<std::size_t>(cls);
            for (std::size_t i = 0; i < hw; ++i) {
                total1 += std::fabs(targets1[b][c * hw + i] - st.raw1.v(c * hw + i));
                total2 += std::fabs(targets2[b][c * hw + i] - st.raw2_up.v(c * hw + i));
            }
            scored1 += hw;
            scored2 += hw;
        }
    }
    double out = 0.0;
    if (scored1 > 0) out += total1 / static_cast<double>(scored1);
    if (scored2 > 0) out += total2 / static_cast<double>(scored2);
    return out;
}

}  // namespace detail

inline GradCheckReport run_grad_check(const Dataset& data, const TrainConfig& cfg,
                                      const GradCheckConfig& gc) {
    detail::require(data.samples.size() >= 2, "grad check: need at least two samples");
    std::vector<const Sample*> batch = {&data.samples[0], &data.samples[1]};
    ModelParams params = init_params(data.classes, cfg.seed);
    auto named = params.named_parameters();
    const auto& term_names = detail::loss_term_names();

    auto forward_full = [&]() {
        Rng rng(gc.seed);
        return forward_batch(batch, params, cfg, /*warmup=*/false, rng);
    };
    auto forward_signature = [&]() {
        TraceCollector collector;
        trace_collector() = &collector;
        Rng rng(gc.seed);
        forward_batch(batch, params, cfg, /*warmup=*/false, rng);
        trace_collector() = nullptr;
        return collector.hash();
    };

    const bool freeze_com = cfg.enable_comloss && cfg.detach_comp_target;
    std::vector<std::vector<double>> com_targets1, com_targets2;

    // analytic gradients, one backward per loss term over one recorded graph
    std::vector<std::vector<std::vector<double>>> analytic(term_names.size());
    {
        BatchForward fwd = forward_full();
        if (freeze_com)
            for (const ImageState& st : fwd.images) {
                com_targets1.push_back(st.comp1.values());
                com_targets2.push_back(st.comp2.values());
            }
        auto terms = detail::loss_term_tensors(fwd);
        for (std::size_t t = 0; t < terms.size(); ++t) {
            for (auto& [name, tensor] : named) tensor.zero_grad();
            backward(*terms[t]);
            for (auto& [name, tensor] : named) analytic[t].push_back(tensor.grad());
        }
    }

    auto forward_values = [&]() {
        BatchForward fwd = forward_full();
        std::vector<double> vals = detail::loss_term_values(fwd);
        if (freeze_com) {
            const double frozen = detail::frozen_com_value(fwd, com_targets1, com_targets2);
            vals[6] += cfg.beta * (frozen - vals[4]);  // total uses the frozen term too
            vals[4] = frozen;
        }
        return vals;
    };

    const std::uint64_t base_sig = forward_signature();
    Rng pick_rng(derive_seed(gc.seed, 3));

    GradCheckReport report;
    report.worst = 0.0;
    for (const auto& name : term_names) report.worst_per_term[name] = 0.0;

    for (std::size_t pi = 0; pi < named.size(); ++pi) {
        Tensor& tensor = named[pi].second;
        auto& values = tensor.values_mut();
        const std::size_t n = values.size();
        const std::size_t want = std::min(gc.samples_per_tensor, n);
        std::vector<std::size_t> sample_idx;
        while (sample_idx.size() < want) {
            const std::size_t candidate = static_cast<std::size_t>(pick_rng.below(n));
            bool seen = false;
            for (std::size_t s : sample_idx) seen = seen || s == candidate;
            if (!seen) sample_idx.push_back(candidate);
        }

        std::vector<GradCheckEntry> entries(term_names.size());
        for (std::size_t t = 0; t < term_names.size(); ++t) {
            entries[t].term = term_names[t];
            entries[t].param = named[pi].first;
        }

        for (std::size_t idx : sample_idx) {
            const double original = values[idx];

            values[idx] = original + gc.kink_radius;
            const std::uint64_t sig_plus = forward_signature();
            values[idx] = original - gc.kink_radius;
            const std::uint64_t sig_minus = forward_signature();
            if (sig_plus != base_sig || sig_minus != base_sig) {
                values[idx] = original;
                for (auto& e : entries) e.skipped++;
                report.total_skipped++;
                continue;
            }

            values[idx] = original + gc.fd_step;
            const std::vector<double> plus = forward_values();
            values[idx] = original - gc.fd_step;
            const std::vector<double> minus = forward_values();
            values[idx] = original;

            for (std::size_t t = 0; t < term_names.size(); ++t) {
                const double fd = (plus[t] - minus[t]) / (2.0 * gc.fd_step);
                const double an = analytic[t][pi][idx];
                const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-5});
                const double rel = std::fabs(fd - an) / denom;
                entries[t].checked++;
                entries[t].worst_rel_err = std::max(entries[t].worst_rel_err, rel);
                if (rel > report.worst_per_term[term_names[t]])
                    report.worst_per_term[term_names[t]] = rel;
                if (rel > report.worst) {
                    report.worst = rel;
                    report.worst_param = named[pi].first;
                    report.worst_term = term_names[t];
                }
            }
            report.total_checked++;
        }
        for (auto& e : entries) report.per_term_param.push_back(std::move(e));
    }
    report.passed = report.worst < gc.tolerance && report.total_checked > 0;
    return report;
}

inline std::string grad_check_summary(const GradCheckReport& report) {
    std::string out;
    char buf[160];
    for (const auto& [term, worst] : report.worst_per_term) {
        std::snprintf(buf, sizeof(buf), "term %-8s worst relative error %.3e\n", term.c_str(),
                      worst);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "checked %zu parameter samples, skipped %zu near kinks\n",
                  report.total_checked, report.total_skipped);
    out += buf;
    if (!report.passed) {
        std::snprintf(buf, sizeof(buf), "WORST: %s on term %s (%.3e)\n",
                      report.worst_param.c_str(), report.worst_term.c_str(), report.worst);
        out += buf;
    }
    return out;
}

}  // namespace rtc
