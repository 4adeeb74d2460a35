#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ucap/autodiff.hpp"

namespace ucap {

// Ordered collection of named trainable tensors. Insertion order is the
// serialization and update order, so runs are reproducible.
class ParamSet {
public:
    Tensor add(const std::string& name, Tensor t) {
        if (contains(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
        items_.emplace_back(name, t);
        return t;
    }

    bool contains(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return true;
        return false;
    }

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw std::invalid_argument("ParamSet: no parameter named " + name);
    }

    void merge(const ParamSet& other) {
        for (const auto& [n, t] : other.items_) add(n, t);
    }

    std::size_t size() const { return items_.size(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    void zero_grad() {
        for (auto& [n, t] : items_) t.zero_grad();
    }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// Rescales grads so their global L2 norm is at most max_norm. Returns the
// pre-clip norm.
inline double clip_grad_norm(ParamSet& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : params)
        for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& [name, t] : params) {
            Tensor tt = t;  // shared handle; grads are mutable through the copy
            for (double& g : tt.mutable_grad()) g *= s;
        }
    }
    return norm;
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by position in the
// ParamSet, which must not change between steps.
class AdamState {
public:
    explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    long step_count() const { return step_; }

    // One update over all params; grads must be populated (backward ran) and
    // are cleared afterwards.
    void step(ParamSet& params) {
        if (m_.empty()) init_buffers(params);
        if (m_.size() != params.size())
            throw std::invalid_argument("AdamState: parameter set changed size");
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        std::size_t idx = 0;
        for (auto& [name, t] : params) {
            Tensor tensor = t;
            if (!tensor.requires_grad())
                throw std::invalid_argument("AdamState: parameter " + name + " has no gradient buffer");
            auto grad = tensor.grad();
            auto& m = m_[idx];
            auto& v = v_[idx];
            if (m.size() != grad.size())
                throw std::invalid_argument("AdamState: shape of " + name + " changed");
            auto data = tensor.mutable_data();
            for (std::size_t i = 0; i < grad.size(); ++i) {
                const double g = grad[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
            }
            tensor.zero_grad();
            ++idx;
        }
    }

private:
    void init_buffers(const ParamSet& params) {
        for (const auto& [name, t] : params) {
            m_.emplace_back(t.numel(), 0.0);
            v_.emplace_back(t.numel(), 0.0);
        }
    }

    AdamConfig cfg_;
    long step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Clip-then-update, the per-step path used by every trainer loop.
inline double adam_step(ParamSet& params, AdamState& state, double clip_norm) {
    const double norm = clip_grad_norm(params, clip_norm);
    state.step(params);
    return norm;
}

}  // namespace ucap
