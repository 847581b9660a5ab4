#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "moekit/errors.hpp"
#include "moekit/rng.hpp"

namespace moekit {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Flat arena of named parameter matrices. One arena backs a whole model so
/// that the optimizer, gradient clipping, hashing and finite differencing can
/// all run over contiguous storage; modules hold entry indices and fetch
/// Eigen maps on demand.
template <typename T>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        size_t offset = 0;
        int rows = 0;
        int cols = 0;
        bool frozen = false;
        T init_mean = 0;
        T init_std = 0;
    };

    int add(const std::string & name, int rows, int cols, bool frozen, T init_mean, T init_std) {
        if (finalized_) throw config_error("ParamStore already finalized");
        if (index_.count(name)) throw config_error("duplicate parameter name: " + name);
        Entry e;
        e.name = name;
        e.rows = rows;
        e.cols = cols;
        e.frozen = frozen;
        e.init_mean = init_mean;
        e.init_std = init_std;
        e.offset = total_;
        total_ += static_cast<size_t>(rows) * cols;
        index_[name] = static_cast<int>(entries_.size());
        entries_.push_back(std::move(e));
        return static_cast<int>(entries_.size()) - 1;
    }

    void finalize() {
        data_.assign(total_, T(0));
        finalized_ = true;
    }

    // Deterministic per-name init; independent of registration order.
    void randomize(uint64_t seed) {
        require_finalized();
        for (const auto & e : entries_) {
            Rng rng = seeded_rng(seed, e.name);
            T * p = data_.data() + e.offset;
            const size_t n = static_cast<size_t>(e.rows) * e.cols;
            for (size_t i = 0; i < n; ++i)
                p[i] = e.init_mean + e.init_std * static_cast<T>(rng.next_normal());
        }
    }

    Eigen::Map<MatX<T>> mat(int idx) {
        const Entry & e = entries_[static_cast<size_t>(idx)];
        return {data_.data() + e.offset, e.rows, e.cols};
    }
    Eigen::Map<const MatX<T>> mat(int idx) const {
        const Entry & e = entries_[static_cast<size_t>(idx)];
        return {data_.data() + e.offset, e.rows, e.cols};
    }

    // View of an external buffer laid out like this store (gradients, moments).
    Eigen::Map<MatX<T>> view(std::vector<T> & buf, int idx) const {
        const Entry & e = entries_[static_cast<size_t>(idx)];
        return {buf.data() + e.offset, e.rows, e.cols};
    }
    Eigen::Map<const MatX<T>> view(const std::vector<T> & buf, int idx) const {
        const Entry & e = entries_[static_cast<size_t>(idx)];
        return {buf.data() + e.offset, e.rows, e.cols};
    }

    std::vector<T> make_buffer() const { return std::vector<T>(total_, T(0)); }

    int find(const std::string & name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }
    int require(const std::string & name) const {
        const int idx = find(name);
        if (idx < 0) throw config_error("unknown parameter: " + name);
        return idx;
    }

    const std::vector<Entry> & entries() const { return entries_; }
    size_t size() const { return total_; }
    std::vector<T> & raw() { return data_; }
    const std::vector<T> & raw() const { return data_; }

    uint64_t hash(const std::string & prefix = "") const { // FNV-1a over raw bytes
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto & e : entries_) {
            if (e.name.rfind(prefix, 0) != 0) continue;
            const auto * bytes = reinterpret_cast<const unsigned char *>(data_.data() + e.offset);
            const size_t n = static_cast<size_t>(e.rows) * e.cols * sizeof(T);
            for (size_t i = 0; i < n; ++i) {
                h ^= bytes[i];
                h *= 0x100000001b3ull;
            }
        }
        return h;
    }

  private:
    void require_finalized() const {
        if (!finalized_) throw config_error("ParamStore not finalized");
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
    std::vector<T> data_;
    size_t total_ = 0;
    bool finalized_ = false;
};

// ---- elementwise helpers ----------------------------------------------------

template <typename T> T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }
template <typename T> T silu(T x) { return x * sigmoid(x); }
template <typename T> T silu_grad(T x) {
    const T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}
template <typename T> T gelu(T x) { // tanh approximation
    const T c = T(0.7978845608028654); // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

// In-place softmax over each row; -inf entries come out as exact zeros.
template <typename T> void softmax_rows(Eigen::Ref<MatX<T>> m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index c = 0; c < m.cols(); ++c) mx = std::max(mx, m(r, c));
        T sum = 0;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const T v = std::isinf(m(r, c)) && m(r, c) < 0 ? T(0) : std::exp(m(r, c) - mx);
            m(r, c) = v;
            sum += v;
        }
        m.row(r) /= sum;
    }
}

template <typename T> VecX<T> softmax_vec(const VecX<T> & v) {
    VecX<T> out = v;
    const T mx = v.maxCoeff();
    out = (out.array() - mx).exp();
    out /= out.sum();
    return out;
}

// dL/dz for p = softmax(z): p .* (dp - <p, dp>)
template <typename T> VecX<T> softmax_backward(const VecX<T> & p, const VecX<T> & dp) {
    const T dot = p.dot(dp);
    return (p.array() * (dp.array() - dot)).matrix();
}

// ---- RMSNorm ----------------------------------------------------------------

template <typename T> struct RmsNormCache {
    MatX<T> x_hat;   // x / rms
    VecX<T> inv_rms; // per row
};

template <typename T>
MatX<T> rmsnorm_forward(const MatX<T> & x, const Eigen::Ref<const MatX<T>> & gain,
                        RmsNormCache<T> * cache = nullptr, T eps = T(1e-5)) {
    const auto n = x.cols();
    MatX<T> out(x.rows(), n);
    VecX<T> inv_rms(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T ms = x.row(r).squaredNorm() / static_cast<T>(n);
        inv_rms(r) = T(1) / std::sqrt(ms + eps);
        out.row(r) = x.row(r) * inv_rms(r);
    }
    if (cache) {
        cache->x_hat = out;
        cache->inv_rms = inv_rms;
    }
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        out.row(r) = out.row(r).cwiseProduct(gain.row(0));
    return out;
}

template <typename T>
MatX<T> rmsnorm_backward(const MatX<T> & dout, const RmsNormCache<T> & cache,
                         const Eigen::Ref<const MatX<T>> & gain, Eigen::Ref<MatX<T>> dgain) {
    const auto n = cache.x_hat.cols();
    MatX<T> dx(cache.x_hat.rows(), n);
    for (Eigen::Index r = 0; r < dout.rows(); ++r) {
        const auto x_hat = cache.x_hat.row(r);
        Eigen::Matrix<T, 1, Eigen::Dynamic> dg = dout.row(r).cwiseProduct(gain.row(0));
        dgain.row(0) += dout.row(r).cwiseProduct(x_hat);
        const T proj = dg.cwiseProduct(x_hat).sum() / static_cast<T>(n);
        dx.row(r) = (dg - x_hat * proj) * cache.inv_rms(r);
    }
    return dx;
}

// ---- rotary position embedding ---------------------------------------------

// Rotates consecutive pairs within each head; `sign` -1 applies the inverse
// rotation (used by the backward pass).
template <typename T>
void rope_apply(Eigen::Ref<MatX<T>> x, int n_heads, int sign = 1, T base = T(10000)) {
    const int d = static_cast<int>(x.cols());
    const int dh = d / n_heads;
    for (Eigen::Index pos = 0; pos < x.rows(); ++pos) {
        for (int h = 0; h < n_heads; ++h) {
            for (int j = 0; j + 1 < dh; j += 2) {
                const T theta = static_cast<T>(pos) *
                                std::pow(base, -static_cast<T>(j) / static_cast<T>(dh));
                const T c = std::cos(theta);
                const T s = std::sin(theta) * static_cast<T>(sign);
                const int i0 = h * dh + j;
                const T x0 = x(pos, i0), x1 = x(pos, i0 + 1);
                x(pos, i0) = x0 * c - x1 * s;
                x(pos, i0 + 1) = x0 * s + x1 * c;
            }
        }
    }
}

} // namespace moekit
