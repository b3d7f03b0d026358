#include "cmc/optim.hpp"

#include <cmath>

namespace cmc::optim {

Kind kind_from_string(const std::string& s) {
    if (s == "sgd") return Kind::sgd;
    if (s == "adam") return Kind::adam;
    throw ValidationError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::string to_string(Kind k) { return k == Kind::sgd ? "sgd" : "adam"; }

Optimizer::Optimizer(std::vector<nn::Param*> params, Settings settings)
    : params_(std::move(params)), settings_(settings) {
    for (auto* p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p->value.numel()), 0.0f);
        if (settings_.kind == Kind::adam) v_.emplace_back(static_cast<std::size_t>(p->value.numel()), 0.0f);
    }
}

void Optimizer::zero_grad() { nn::zero_grad(params_); }

void Optimizer::step(double lr) {
    ++steps_;
    const auto t = static_cast<double>(steps_);
    const double bc1 = 1.0 - std::pow(settings_.beta1, t);
    const double bc2 = 1.0 - std::pow(settings_.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        const double wd = p.decay ? settings_.weight_decay : 0.0;
        auto& m = m_[k];
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const double g = static_cast<double>(p.grad[i]) + wd * p.value[i];
            const auto ui = static_cast<std::size_t>(i);
            if (settings_.kind == Kind::sgd) {
                m[ui] = static_cast<float>(settings_.momentum * m[ui] + g);
                p.value[i] = static_cast<float>(p.value[i] - lr * m[ui]);
            } else {
                auto& v = v_[k];
                m[ui] = static_cast<float>(settings_.beta1 * m[ui] + (1.0 - settings_.beta1) * g);
                v[ui] = static_cast<float>(settings_.beta2 * v[ui] + (1.0 - settings_.beta2) * g * g);
                const double mh = m[ui] / bc1;
                const double vh = v[ui] / bc2;
                p.value[i] = static_cast<float>(p.value[i] - lr * mh / (std::sqrt(vh) + settings_.eps));
            }
        }
    }
}

std::vector<float> Optimizer::state() const {
    std::vector<float> out;
    for (const auto& m : m_) out.insert(out.end(), m.begin(), m.end());
    for (const auto& v : v_) out.insert(out.end(), v.begin(), v.end());
    return out;
}

void Optimizer::load_state(std::span<const float> flat, std::int64_t steps) {
    std::size_t off = 0;
    auto take = [&](std::vector<float>& dst) {
        if (off + dst.size() > flat.size()) throw ValidationError("optimizer state blob too short");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.begin());
        off += dst.size();
    };
    for (auto& m : m_) take(m);
    for (auto& v : v_) take(v);
    if (off != flat.size()) throw ValidationError("optimizer state blob size mismatch");
    steps_ = steps;
}

}  // namespace cmc::optim
