#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "coot/common.hpp"

namespace coot {

// Dense row-major float32 matrix. Everything in the model is rank-2:
// a vector is 1xN, a scalar is 1x1.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {
        COOT_CHECK(rows > 0 && cols > 0, "tensor: extents must be positive");
    }

    static Tensor from_rows(std::size_t rows, std::size_t cols,
                            std::vector<float> data) {
        COOT_CHECK(rows * cols == data.size(), "tensor: shape/data mismatch (",
                   rows, "x", cols, " vs ", data.size(), " values)");
        Tensor t;
        t.rows_ = rows;
        t.cols_ = cols;
        t.data_ = std::move(data);
        return t;
    }

    static Tensor row(std::vector<float> v) {
        const std::size_t n = v.size();
        return from_rows(1, n, std::move(v));
    }

    static Tensor scalar(float v) { return from_rows(1, 1, {v}); }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    bool same_shape(const Tensor& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Per-timestep validity of a variable-length sequence.
struct Mask {
    std::vector<std::uint8_t> valid;

    Mask() = default;
    explicit Mask(std::vector<std::uint8_t> v) : valid(std::move(v)) {}

    static Mask all(std::size_t n) {
        return Mask(std::vector<std::uint8_t>(n, 1));
    }

    std::size_t size() const { return valid.size(); }

    std::size_t count_valid() const {
        std::size_t n = 0;
        for (auto v : valid) n += v ? 1 : 0;
        return n;
    }

    bool all_valid() const { return count_valid() == valid.size(); }
};

enum class ParamKind { Weight, Bias, Gain };

// One named trainable tensor with its gradient slot.
struct Param {
    std::string name;
    ParamKind kind = ParamKind::Weight;
    Tensor value;
    Tensor grad;

    void zero_grad() { grad.fill(0.0f); }
};

// Named, ordered store of trainable parameters. Registration order is the
// canonical iteration order for init, optimizer updates and serialization.
class ParamStore {
public:
    Param& create(const std::string& name, std::size_t rows, std::size_t cols,
                  ParamKind kind) {
        COOT_CHECK(by_name_.find(name) == by_name_.end(),
                   "param already registered: ", name);
        auto p = std::make_unique<Param>();
        p->name = name;
        p->kind = kind;
        p->value = Tensor(rows, cols);
        p->grad = Tensor(rows, cols);
        Param& ref = *p;
        by_name_[name] = p.get();
        ordered_.push_back(std::move(p));
        return ref;
    }

    Param& get(const std::string& name) {
        auto it = by_name_.find(name);
        COOT_CHECK(it != by_name_.end(), "unknown param: ", name);
        return *it->second;
    }

    const Param& get(const std::string& name) const {
        auto it = by_name_.find(name);
        COOT_CHECK(it != by_name_.end(), "unknown param: ", name);
        return *it->second;
    }

    bool has(const std::string& name) const {
        return by_name_.find(name) != by_name_.end();
    }

    std::size_t count() const { return ordered_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : ordered_) n += p->value.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : ordered_) p->zero_grad();
    }

    // Iteration in registration order.
    auto begin() { return ordered_.begin(); }
    auto end() { return ordered_.end(); }
    auto begin() const { return ordered_.begin(); }
    auto end() const { return ordered_.end(); }

private:
    std::vector<std::unique_ptr<Param>> ordered_;
    std::map<std::string, Param*> by_name_;
};

// 1 - x.y / (|x||y|), range [0, 2]. Inputs are 1xN rows.
float cosine_distance(const Tensor& x, const Tensor& y);

} // namespace coot
