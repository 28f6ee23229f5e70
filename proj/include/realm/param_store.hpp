// Named parameter store with gradient and AdamW moment buffers, the AdamW
// update, global-norm clipping, and LR schedules.

#pragma once

#include <cstring>
#include <map>
#include <unordered_map>

#include "realm/tape.hpp"

namespace realm {

template <typename T>
class ParamStore {
public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> grad;
        Tensor<T> m, v;  // Adam moments, allocated on first optimizer step
        bool trainable = true;
    };

    void add(const std::string& name, Tensor<T> value, bool trainable = true) {
        if (entries_.count(name)) fail("param_store: duplicate name '" + name + "'");
        Entry e;
        e.value = std::move(value);
        e.trainable = trainable;
        entries_.emplace(name, std::move(e));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) fail("param_store: unknown parameter '" + name + "'");
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) fail("param_store: unknown parameter '" + name + "'");
        return it->second;
    }

    Tensor<T>& value(const std::string& name) { return entry(name).value; }
    const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
    Tensor<T>& grad(const std::string& name) { return entry(name).grad; }

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& [name, e] : entries_) {
            if (e.grad.data.empty())
                e.grad = Tensor<T>::zeros(e.value.shape);
            else
                std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
        }
    }

    void set_trainable(const std::string& prefix, bool trainable) {
        for (auto& [name, e] : entries_)
            if (name.rfind(prefix, 0) == 0) e.trainable = trainable;
    }

    int64_t total_params(const std::string& prefix = "") const {
        int64_t n = 0;
        for (const auto& [name, e] : entries_)
            if (prefix.empty() || name.rfind(prefix, 0) == 0) n += e.value.numel();
        return n;
    }

    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }

    // decoupled weight decay Adam over trainable entries
    void adamw_step(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8) {
        for (auto& [name, e] : entries_)
            if (e.trainable && e.grad.data.empty())
                fail("adamw_step: missing gradient buffer for '" + name + "'");
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        for (auto& [name, e] : entries_) {
            if (!e.trainable) continue;
            if (e.m.data.empty()) {
                e.m = Tensor<T>::zeros(e.value.shape);
                e.v = Tensor<T>::zeros(e.value.shape);
            }
            for (int64_t i = 0; i < e.value.numel(); ++i) {
                const double g = static_cast<double>(e.grad[i]);
                const double m = beta1 * static_cast<double>(e.m[i]) + (1.0 - beta1) * g;
                const double v = beta2 * static_cast<double>(e.v[i]) + (1.0 - beta2) * g * g;
                e.m[i] = static_cast<T>(m);
                e.v[i] = static_cast<T>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                double p = static_cast<double>(e.value[i]);
                p -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p);
                e.value[i] = static_cast<T>(p);
            }
        }
    }

    // scales trainable grads so the global L2 norm is at most max_norm; returns the factor
    double clip_global_norm(double max_norm) {
        if (max_norm <= 0.0) fail("clip_global_norm: max_norm must be > 0");
        double sq = 0.0;
        for (auto& [name, e] : entries_) {
            if (!e.trainable) continue;
            if (e.grad.data.empty()) fail("clip_global_norm: missing gradient buffer for '" + name + "'");
            for (int64_t i = 0; i < e.grad.numel(); ++i) {
                const double g = static_cast<double>(e.grad[i]);
                sq += g * g;
            }
        }
        const double norm = std::sqrt(sq);
        if (norm <= max_norm || norm == 0.0) return 1.0;
        const double factor = max_norm / norm;
        for (auto& [name, e] : entries_) {
            if (!e.trainable) continue;
            for (int64_t i = 0; i < e.grad.numel(); ++i) e.grad[i] = static_cast<T>(e.grad[i] * factor);
        }
        return factor;
    }

    uint64_t checksum(const std::string& prefix = "") const {
        uint64_t h = 0x9e3779b97f4a7c15ULL;
        for (const auto& [name, e] : entries_) {
            if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
            for (char c : name) h = splitmix64(h ^ static_cast<uint64_t>(static_cast<unsigned char>(c)));
            for (int64_t i = 0; i < e.value.numel(); ++i) {
                uint64_t bits = 0;
                const double d = static_cast<double>(e.value[i]);
                static_assert(sizeof(double) == 8);
                std::memcpy(&bits, &d, 8);
                h = splitmix64(h ^ bits);
            }
        }
        return h;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>(), e.trainable);
        return out;
    }

private:
    std::map<std::string, Entry> entries_;  // ordered: deterministic iteration
    int64_t step_ = 0;
};

// Per-tape leaf cache: fetches a parameter as a tape leaf exactly once, so a
// parameter used in several places accumulates one gradient.
template <typename T>
struct BoundParams {
    Tape<T>& tape;
    ParamStore<T>& store;
    std::unordered_map<std::string, NodePtr<T>> leaves;

    BoundParams(Tape<T>& t, ParamStore<T>& s) : tape(t), store(s) {}

    NodePtr<T> operator[](const std::string& name) {
        auto it = leaves.find(name);
        if (it != leaves.end()) return it->second;
        auto& e = store.entry(name);
        NodePtr<T> leaf = tape.leaf(e.value, e.trainable, "param");
        leaves.emplace(name, leaf);
        return leaf;
    }

    // accumulate leaf grads into the store after tape.backward()
    void harvest_grads() {
        for (auto& [name, leaf] : leaves) {
            if (leaf->grad.data.empty()) continue;
            auto& g = store.grad(name);
            if (g.data.empty()) g = Tensor<T>::zeros(store.value(name).shape);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += leaf->grad[i];
        }
    }
};

// ---------------------------------------------------------------------------
// LR schedules
// ---------------------------------------------------------------------------

enum class SchedulerKind { WarmupExpDecay, CosineAnnealing };

struct TrainSchedule {
    double peak_lr = 6.25e-4;
    double min_lr = 0.0;
    SchedulerKind kind = SchedulerKind::WarmupExpDecay;
    int warmup_epochs = 30;
    double decay_rate = 0.995;
    double weight_decay = 1e-5;
    double clip_norm = 1.0;
    int max_epochs = 75;
    int patience = 10;
    int batch_size = 32;

    void validate() const {
        if (min_lr > peak_lr) fail("schedule: min_lr > peak_lr");
        if (patience > max_epochs) fail("schedule: patience > max_epochs");
        if (max_epochs < 0 || warmup_epochs < 0) fail("schedule: negative epoch count");
    }

    // epoch is 0-based
    double lr_at(int epoch) const {
        double lr;
        if (kind == SchedulerKind::WarmupExpDecay) {
            if (warmup_epochs > 0 && epoch < warmup_epochs)
                lr = peak_lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
            else
                lr = peak_lr * std::pow(decay_rate, static_cast<double>(epoch - std::max(warmup_epochs - 1, 0)));
        } else {
            const int horizon = std::max(max_epochs - 1, 1);
            const double x = std::min(static_cast<double>(epoch) / horizon, 1.0);
            lr = min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + std::cos(M_PI * x));
        }
        return std::max(lr, min_lr);
    }
};

}  // namespace realm
