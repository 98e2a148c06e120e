#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dreamdiff/tensor.hpp"

namespace dreamdiff {

// Named parameter set for one network. Iteration order is construction order,
// stable across runs given identical construction.
class ParameterStore {
   public:
    explicit ParameterStore(std::string name = "") : name_(std::move(name)) {}

    // fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    Tensor create(const std::string& name, Shape shape, int fan_in, Rng& rng) {
        size_t n = numel(shape);
        std::vector<scalar> data(n);
        scalar bound = fan_in > 0 ? scalar(1) / std::sqrt(static_cast<scalar>(fan_in)) : scalar(0);
        for (size_t i = 0; i < n; ++i) data[i] = static_cast<scalar>(rng.uniform(-bound, bound));
        return add_param(name, Tensor::leaf(std::move(shape), std::move(data), true, qualified(name)));
    }

    Tensor create_const(const std::string& name, Shape shape, scalar value) {
        size_t n = numel(shape);
        return add_param(name, Tensor::leaf(std::move(shape), std::vector<scalar>(n, value), true, qualified(name)));
    }

    Tensor add_param(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::invalid_argument("ParameterStore '" + name_ + "': duplicate name " + name);
        index_[name] = params_.size();
        names_.push_back(name);
        params_.push_back(std::move(t));
        return params_.back();
    }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw std::invalid_argument("ParameterStore '" + name_ + "': unknown parameter " + name);
        return params_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    size_t size() const { return params_.size(); }
    const std::string& param_name(size_t i) const { return names_[i]; }
    Tensor& param(size_t i) { return params_[i]; }
    const Tensor& param(size_t i) const { return params_[i]; }
    const std::string& name() const { return name_; }

    size_t value_count() const {
        size_t n = 0;
        for (const Tensor& p : params_) n += p.size();
        return n;
    }

    void zero_grads() {
        for (Tensor& p : params_) {
            p.grad().assign(p.size(), 0);
            p.node()->grad_valid = true;
        }
    }

    scalar grad_norm() const {
        scalar acc = 0;
        for (const Tensor& p : params_)
            for (scalar g : p.grad()) acc += g * g;
        return std::sqrt(acc);
    }

   private:
    std::string qualified(const std::string& name) const { return name_.empty() ? name : name_ + "." + name; }

    std::string name_;
    std::vector<std::string> names_;
    std::vector<Tensor> params_;
    std::unordered_map<std::string, size_t> index_;
};

// Scalar-loss backward over a fixed set of stores: parameters not reached by
// the graph end up with zero gradients, reached ones with their partials.
// Non-finite parameter gradients fail loudly, naming the parameter.
inline void backward(const Tensor& loss, const std::vector<ParameterStore*>& stores) {
    for (ParameterStore* s : stores) s->zero_grads();
    backward(loss);
    for (ParameterStore* s : stores)
        for (size_t i = 0; i < s->size(); ++i)
            for (scalar g : s->param(i).grad())
                if (!std::isfinite(g))
                    throw std::runtime_error("backward: non-finite gradient in parameter " +
                                             s->param(i).label());
}

struct AdamConfig {
    scalar lr = scalar(3e-4);
    scalar beta1 = scalar(0.9);
    scalar beta2 = scalar(0.999);
    scalar eps = scalar(1e-8);
};

// Adam over one or more stores; per-parameter moments keyed by position.
class Adam {
   public:
    Adam(std::vector<ParameterStore*> stores, AdamConfig cfg = {}) : stores_(std::move(stores)), cfg_(cfg) {
        for (ParameterStore* s : stores_)
            for (size_t i = 0; i < s->size(); ++i) {
                m_.emplace_back(s->param(i).size(), 0);
                v_.emplace_back(s->param(i).size(), 0);
            }
    }

    // applies one update from populated gradients, then clears them
    void step() {
        ++step_count_;
        scalar b1t = scalar(1) - std::pow(cfg_.beta1, static_cast<scalar>(step_count_));
        scalar b2t = scalar(1) - std::pow(cfg_.beta2, static_cast<scalar>(step_count_));
        size_t slot = 0;
        for (ParameterStore* s : stores_) {
            for (size_t i = 0; i < s->size(); ++i, ++slot) {
                Tensor& p = s->param(i);
                if (!p.grad_valid() || p.grad().size() != p.size())
                    throw std::runtime_error("Adam: missing gradient for parameter " + p.label());
                auto& m = m_[slot];
                auto& v = v_[slot];
                auto& w = p.data();
                auto& g = p.grad();
                for (size_t j = 0; j < w.size(); ++j) {
                    m[j] = cfg_.beta1 * m[j] + (scalar(1) - cfg_.beta1) * g[j];
                    v[j] = cfg_.beta2 * v[j] + (scalar(1) - cfg_.beta2) * g[j] * g[j];
                    scalar mhat = m[j] / b1t;
                    scalar vhat = v[j] / b2t;
                    w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                }
                g.assign(w.size(), 0);
                p.node()->grad_valid = false;
            }
        }
    }

    long step_count() const { return step_count_; }
    void set_step_count(long t) { step_count_ = t; }
    const AdamConfig& config() const { return cfg_; }
    AdamConfig& config() { return cfg_; }

    std::vector<std::vector<scalar>>& moments1() { return m_; }
    std::vector<std::vector<scalar>>& moments2() { return v_; }
    const std::vector<std::vector<scalar>>& moments1() const { return m_; }
    const std::vector<std::vector<scalar>>& moments2() const { return v_; }

   private:
    std::vector<ParameterStore*> stores_;
    AdamConfig cfg_;
    long step_count_ = 0;
    std::vector<std::vector<scalar>> m_, v_;
};

// Exponential moving average of parameters: shadow <- d*shadow + (1-d)*live.
class EmaShadow {
   public:
    EmaShadow(std::vector<ParameterStore*> stores, scalar decay) : stores_(std::move(stores)), decay_(decay) {
        if (decay_ < 0 || decay_ > 1) throw std::invalid_argument("EmaShadow: decay must be in [0,1]");
        for (ParameterStore* s : stores_)
            for (size_t i = 0; i < s->size(); ++i) shadow_.push_back(s->param(i).data());
    }

    void update() {
        size_t slot = 0;
        for (ParameterStore* s : stores_)
            for (size_t i = 0; i < s->size(); ++i, ++slot) {
                const auto& w = s->param(i).data();
                auto& sh = shadow_[slot];
                if (sh.size() != w.size())
                    throw std::runtime_error("EmaShadow: shape drift on parameter " + s->param(i).label());
                for (size_t j = 0; j < w.size(); ++j)
                    sh[j] = decay_ * sh[j] + (scalar(1) - decay_) * w[j];
            }
    }

    // overwrite live parameters with the shadow (used at inference)
    void copy_to_live() {
        size_t slot = 0;
        for (ParameterStore* s : stores_)
            for (size_t i = 0; i < s->size(); ++i, ++slot) s->param(i).data() = shadow_[slot];
    }

    scalar decay() const { return decay_; }
    std::vector<std::vector<scalar>>& values() { return shadow_; }
    const std::vector<std::vector<scalar>>& values() const { return shadow_; }

   private:
    std::vector<ParameterStore*> stores_;
    scalar decay_;
    std::vector<std::vector<scalar>> shadow_;
};

}  // namespace dreamdiff
