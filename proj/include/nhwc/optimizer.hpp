#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nhwc/error.hpp"
#include "nhwc/tensor.hpp"

namespace nhwc {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01; // decoupled
    std::size_t accumulation_target = 1;
};

/// Adam with decoupled weight decay and micro-batch gradient accumulation.
/// Fresh gradients are summed into an accumulator; once accumulation_target
/// micro-steps have arrived, one update is applied using the MEAN of the
/// accumulated gradients, so the loss scale is independent of the target.
template <class Real>
class AdamW {
public:
    AdamW(AdamConfig cfg, std::span<Tensor<Real>* const> params) : cfg_(cfg) {
        if (cfg_.accumulation_target == 0)
            throw InvalidInputError("optimizer: accumulation_target must be positive");
        params_.assign(params.begin(), params.end());
        moment1_.resize(params_.size());
        moment2_.resize(params_.size());
        accum_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            moment1_[i].assign(params_[i]->numel(), Real(0));
            moment2_[i].assign(params_[i]->numel(), Real(0));
            accum_[i].assign(params_[i]->numel(), Real(0));
        }
    }

    std::size_t step_count() const { return step_count_; }
    std::size_t accumulation_count() const { return accumulation_count_; }
    const AdamConfig& config() const { return cfg_; }

    /// Returns true when a parameter update was applied, false for a pure
    /// accumulation micro-step.
    bool accumulate_and_step(std::span<const std::vector<Real>* const> fresh_grads) {
        if (fresh_grads.size() != params_.size())
            throw InvalidInputError("optimizer: gradient count mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (fresh_grads[i]->size() != params_[i]->numel())
                throw InvalidInputError("optimizer: gradient shape mismatch at parameter " +
                                        std::to_string(i));
            for (std::size_t j = 0; j < accum_[i].size(); ++j)
                accum_[i][j] += (*fresh_grads[i])[j];
        }
        ++accumulation_count_;
        if (accumulation_count_ < cfg_.accumulation_target) return false;

        apply_update();
        accumulation_count_ = 0;
        for (auto& a : accum_) std::fill(a.begin(), a.end(), Real(0));
        return true;
    }

    /// Convenience: read fresh gradients from the parameters' grad buffers.
    bool accumulate_and_step_from_grads() {
        std::vector<const std::vector<Real>*> grads;
        grads.reserve(params_.size());
        for (Tensor<Real>* p : params_) {
            if (!p->requires_grad())
                throw InvalidInputError("optimizer: parameter has no gradient buffer");
            grads.push_back(&p->grad_vec());
        }
        return accumulate_and_step(std::span<const std::vector<Real>* const>(grads));
    }

private:
    void apply_update() {
        ++step_count_;
        const Real lr = static_cast<Real>(cfg_.lr);
        const Real b1 = static_cast<Real>(cfg_.beta1);
        const Real b2 = static_cast<Real>(cfg_.beta2);
        const Real eps = static_cast<Real>(cfg_.eps);
        const Real wd = static_cast<Real>(cfg_.weight_decay);
        const Real inv_n = Real(1) / static_cast<Real>(cfg_.accumulation_target);
        const Real bc1 = Real(1) - std::pow(b1, static_cast<Real>(step_count_));
        const Real bc2 = Real(1) - std::pow(b2, static_cast<Real>(step_count_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Real* p = params_[i]->data();
            for (std::size_t j = 0; j < accum_[i].size(); ++j) {
                const Real g = accum_[i][j] * inv_n;
                moment1_[i][j] = b1 * moment1_[i][j] + (Real(1) - b1) * g;
                moment2_[i][j] = b2 * moment2_[i][j] + (Real(1) - b2) * g * g;
                const Real m_hat = moment1_[i][j] / bc1;
                const Real v_hat = moment2_[i][j] / bc2;
                p[j] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * p[j]);
            }
        }
    }

    AdamConfig cfg_;
    std::vector<Tensor<Real>*> params_;
    std::vector<std::vector<Real>> moment1_;
    std::vector<std::vector<Real>> moment2_;
    std::vector<std::vector<Real>> accum_;
    std::size_t step_count_ = 0;
    std::size_t accumulation_count_ = 0;
};

template <class Real>
void zero_grads(std::span<Tensor<Real>* const> params) {
    for (Tensor<Real>* p : params) p->zero_grad();
}

} // namespace nhwc
