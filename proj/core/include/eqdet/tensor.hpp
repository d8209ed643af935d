#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqdet {

/// Dense row-major multi-axis array of doubles.
///
/// Axis meaning is positional by convention: feature maps are [B,C,Y,X],
/// lifted maps [B,C,S,Y,X], kernels [Cout,Cin,K,K] or [Cout,Cin,S,K,K].
class GridTensor {
public:
    GridTensor() = default;

    explicit GridTensor(std::vector<int> shape) : shape_(std::move(shape)) {
        std::int64_t n = 1;
        for (int d : shape_) {
            if (d < 1) throw std::invalid_argument("GridTensor: axis length must be >= 1");
            n *= d;
        }
        numel_ = n;
        data_.assign(static_cast<std::size_t>(n), 0.0);
        init_strides();
    }

    GridTensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
        std::int64_t n = 1;
        for (int d : shape_) {
            if (d < 1) throw std::invalid_argument("GridTensor: axis length must be >= 1");
            n *= d;
        }
        if (n != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("GridTensor: data length does not match shape product");
        numel_ = n;
        data_ = std::move(data);
        init_strides();
    }

    static GridTensor zeros(std::vector<int> shape) { return GridTensor(std::move(shape)); }

    static GridTensor full(std::vector<int> shape, double v) {
        GridTensor t(std::move(shape));
        for (double& x : t.data_) x = v;
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::int64_t numel() const { return numel_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return {data_.data(), data_.size()}; }
    std::span<const double> values() const { return {data_.data(), data_.size()}; }

    bool same_shape(const GridTensor& o) const { return shape_ == o.shape_; }

    /// Row-major flat offset of a full multi-index.
    std::int64_t offset_of(std::span<const int> idx) const {
        if (static_cast<int>(idx.size()) != rank())
            throw std::invalid_argument("offset_of: index rank mismatch");
        std::int64_t off = 0;
        for (std::size_t a = 0; a < idx.size(); ++a) {
            if (idx[a] < 0 || idx[a] >= shape_[a]) throw std::out_of_range("offset_of: index out of range");
            off += idx[a] * strides_[a];
        }
        return off;
    }

    /// Inverse of offset_of.
    std::vector<int> index_of(std::int64_t offset) const {
        if (offset < 0 || offset >= numel_) throw std::out_of_range("index_of: offset out of range");
        std::vector<int> idx(shape_.size());
        for (std::size_t a = 0; a < shape_.size(); ++a) {
            idx[a] = static_cast<int>(offset / strides_[a]);
            offset %= strides_[a];
        }
        return idx;
    }

    template <typename... Ix>
    double& at(Ix... i) {
        const int idx[] = {static_cast<int>(i)...};
        return data_[static_cast<std::size_t>(offset_of(std::span<const int>(idx, sizeof...(i))))];
    }

    template <typename... Ix>
    double at(Ix... i) const {
        const int idx[] = {static_cast<int>(i)...};
        return data_[static_cast<std::size_t>(offset_of(std::span<const int>(idx, sizeof...(i))))];
    }

    void fill(double v) {
        for (double& x : data_) x = v;
    }

    void add_scaled(const GridTensor& o, double s) {
        if (!same_shape(o)) throw std::invalid_argument("add_scaled: shape mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    }

    double sum_squares() const {
        double s = 0.0;
        for (double x : data_) s += x * x;
        return s;
    }

private:
    void init_strides() {
        strides_.assign(shape_.size(), 1);
        for (int a = static_cast<int>(shape_.size()) - 2; a >= 0; --a)
            strides_[static_cast<std::size_t>(a)] =
                strides_[static_cast<std::size_t>(a) + 1] * shape_[static_cast<std::size_t>(a) + 1];
    }

    std::vector<int> shape_;
    std::vector<std::int64_t> strides_;
    std::vector<double> data_;
    std::int64_t numel_ = 0;
};

/// Geometry of a (transposed) 2D convolution. stride is limited to {1,2},
/// padding is zero-fill, kernels must be odd so they rotate exactly about
/// their center.
struct ConvSpec {
    int in_channels = 1;
    int out_channels = 1;
    int kernel_size = 1;
    int stride = 1;
    int padding = 0;
    bool transposed = false;

    void validate() const {
        if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("ConvSpec: channel counts must be >= 1");
        if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("ConvSpec: kernel_size must be odd");
        if (stride != 1 && stride != 2) throw std::invalid_argument("ConvSpec: stride must be 1 or 2");
        if (padding < 0) throw std::invalid_argument("ConvSpec: padding must be >= 0");
    }

    /// Spatial output extent. Rejects geometries where the stride does not
    /// divide the window count exactly; all equivariance identities rely on
    /// exact arithmetic here.
    int output_extent(int in_extent) const {
        validate();
        if (!transposed) {
            const int span = in_extent + 2 * padding - kernel_size;
            if (span < 0) throw std::invalid_argument("ConvSpec: kernel larger than padded input");
            if (span % stride != 0)
                throw std::invalid_argument("ConvSpec: stride does not divide input span exactly");
            return span / stride + 1;
        }
        const int out = (in_extent - 1) * stride - 2 * padding + kernel_size;
        if (out < 1) throw std::invalid_argument("ConvSpec: transposed output extent < 1");
        return out;
    }
};

}  // namespace eqdet
