#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cellnas {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage, which is what the
// tape needs to route gradients back to parameters. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    bool same(const Tensor& other) const { return impl_ == other.impl_; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;
    double& at(std::size_t flat) { return data()[flat]; }
    double at(std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    void set_requires_grad(bool flag);

    // Gradient buffer, allocated zero-filled on first access. Writable through
    // any handle: backward rules accumulate into their inputs' buffers.
    std::span<double> grad() const;
    bool has_grad() const;
    void zero_grad();

    // Deep copy of shape and values; the copy has no gradient buffer.
    Tensor clone() const;
    // Deep copy with requires_grad cleared.
    Tensor detach() const;

    // Overwrite values from another tensor of identical shape.
    void assign(const Tensor& other);

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    std::shared_ptr<Impl> impl_;
};

// Define-by-run record of executed primitives. A fresh tape is built for every
// forward pass; backward() walks the records in reverse execution order.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    bool recording() const { return recording_; }
    std::size_t size() const { return records_.size(); }

    // True when an op consuming `inputs` must be recorded.
    bool needs_grad(std::initializer_list<const Tensor*> inputs) const;
    bool needs_grad(std::span<const Tensor> inputs) const;

    // Registers `output` as produced by a primitive whose vector-Jacobian
    // product is `backward`. Marks output as requiring grad.
    void record(Tensor output, std::function<void()> backward);

    // Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate
    // across calls; intermediate gradients are reset on every call.
    void backward(Tensor loss);

private:
    struct Record {
        Tensor output;
        std::function<void()> backward;
    };
    bool recording_;
    std::vector<Record> records_;
};

}  // namespace cellnas
