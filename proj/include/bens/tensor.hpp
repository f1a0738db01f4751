#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bens/errors.hpp"

namespace bens {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major array. Image batches are NHWC.
template <class T>
class Tensor {
   public:
    using value_type = T;

    Tensor() : shape_{1}, data_(1, T(0)) {}

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    Tensor(Shape shape, std::initializer_list<T> values)
        : Tensor(std::move(shape), std::vector<T>(values)) {}

    static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool flag = true) {
        requires_grad_ = flag;
        return *this;
    }

    Tensor reshaped(Shape shape) const {
        Tensor out(std::move(shape), data_);
        out.requires_grad_ = requires_grad_;
        return out;
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        Tensor<U> t(shape_, std::move(out));
        t.set_requires_grad(requires_grad_);
        return t;
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    bool operator==(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

   private:
    void check_extents() const {
        if (shape_.empty()) throw ShapeError("tensor rank must be at least 1");
        for (auto e : shape_)
            if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
    bool requires_grad_ = false;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                 static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
    os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw FormatError(std::string("unexpected end of stream reading ") + what);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

/// "TNSR" dump: magic, u32 rank, u32 extents, float32 values; all little-endian.
template <class T>
void write_tnsr(std::ostream& os, const Tensor<T>& t) {
    os.write("TNSR", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
    for (T v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline Tensor<float> read_tnsr(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "TNSR", 4) != 0)
        throw FormatError("bad TNSR magic");
    std::uint32_t rank = detail::get_u32(is, "TNSR rank");
    if (rank == 0 || rank > 8) throw FormatError("bad TNSR rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = detail::get_u32(is, "TNSR extent");
    std::size_t n = shape_numel(shape);
    if (n == 0) throw FormatError("TNSR with zero extent");
    std::vector<float> values(n);
    for (auto& v : values) v = std::bit_cast<float>(detail::get_u32(is, "TNSR values"));
    return Tensor<float>(std::move(shape), std::move(values));
}

}  // namespace bens
