#ifndef CMC_NN_HPP
#define CMC_NN_HPP

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cmc/kernels.hpp"
#include "cmc/tensor.hpp"

// Layer library with hand-written backward passes. Each module caches what its
// backward needs during a train-phase forward, so a module instance serves one
// forward/backward pair at a time. Eval-phase forwards skip the caches.

namespace cmc::nn {

enum class Phase { train, eval };

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    bool decay = true;
};

struct Buffer {
    std::string name;
    Tensor* tensor;
};

class Module {
public:
    virtual ~Module() = default;
    virtual Tensor forward(const Tensor& x, Phase phase) = 0;
    virtual Tensor backward(const Tensor& dy) = 0;
    virtual void parameters(std::vector<Param*>& out) { (void)out; }
    virtual void buffers(std::vector<Buffer>& out) { (void)out; }
};

std::vector<Param*> parameters_of(Module& m);
std::vector<Buffer> buffers_of(Module& m);
std::int64_t parameter_count(Module& m);
void zero_grad(std::span<Param* const> params);

class Conv : public Module {
public:
    Conv(std::string name, kernels::ConvGeometry geometry, std::mt19937_64& rng, bool bias = true);
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;
    void parameters(std::vector<Param*>& out) override;
    const kernels::ConvGeometry& geometry() const { return geometry_; }

private:
    kernels::ConvGeometry geometry_;
    Param weight_, bias_;
    bool has_bias_;
    Tensor input_;
};

class BatchNorm : public Module {
public:
    BatchNorm(std::string name, std::int64_t channels, float momentum = 0.1f, float eps = 1e-5f);
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;
    void parameters(std::vector<Param*>& out) override;
    void buffers(std::vector<Buffer>& out) override;

private:
    std::string name_;
    std::int64_t channels_;
    float momentum_, eps_;
    Param gamma_, beta_;
    Tensor running_mean_, running_var_;
    Tensor normalized_;
    std::vector<float> inv_std_;
    bool cached_train_ = false;
};

class ReLU : public Module {
public:
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;

private:
    Tensor output_;
};

class MaxPool : public Module {
public:
    explicit MaxPool(kernels::Extent3 window) : window_(window) {}
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;

private:
    kernels::Extent3 window_;
    Shape input_shape_;
    std::vector<std::int64_t> argmax_;
};

class Upsample : public Module {
public:
    explicit Upsample(kernels::Extent3 factor) : factor_(factor) {}
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;

private:
    kernels::Extent3 factor_;
};

/// (N,C,D,H,W) -> (N,C).
class GlobalAvgPool : public Module {
public:
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;

private:
    Shape input_shape_;
};

/// (N,in) -> (N,out).
class Linear : public Module {
public:
    Linear(std::string name, std::int64_t in, std::int64_t out, std::mt19937_64& rng);
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;
    void parameters(std::vector<Param*>& out) override;
    const Tensor& weight() const { return weight_.value; }
    const Tensor& bias() const { return bias_.value; }
    std::int64_t in_features() const { return in_; }
    std::int64_t out_features() const { return out_; }

private:
    std::int64_t in_, out_;
    Param weight_, bias_;
    Tensor input_;
};

class Sequential : public Module {
public:
    Sequential() = default;
    template <typename M, typename... Args>
    M& add(Args&&... args) {
        auto m = std::make_unique<M>(std::forward<Args>(args)...);
        M& ref = *m;
        layers_.push_back(std::move(m));
        return ref;
    }
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;
    void parameters(std::vector<Param*>& out) override;
    void buffers(std::vector<Buffer>& out) override;
    std::size_t size() const { return layers_.size(); }

private:
    std::vector<std::unique_ptr<Module>> layers_;
};

/// conv-bn-relu-conv-bn plus identity or projected shortcut, then relu.
class ResidualBlock : public Module {
public:
    ResidualBlock(const std::string& name, std::int64_t in, std::int64_t out, kernels::Extent3 stride,
                  std::mt19937_64& rng);
    Tensor forward(const Tensor& x, Phase phase) override;
    Tensor backward(const Tensor& dy) override;
    void parameters(std::vector<Param*>& out) override;
    void buffers(std::vector<Buffer>& out) override;

private:
    Sequential main_;
    std::unique_ptr<Sequential> shortcut_;
    ReLU out_relu_;
};

/// Channel concatenation for NCDHW tensors and its adjoint.
Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::int64_t first_channels);

/// Serialises parameters and buffers in visiting order as little-endian float32.
std::vector<float> flatten_state(Module& m);
void load_state(Module& m, std::span<const float> flat);

}  // namespace cmc::nn

#endif
