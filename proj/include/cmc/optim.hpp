#ifndef CMC_OPTIM_HPP
#define CMC_OPTIM_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cmc/nn.hpp"

namespace cmc::optim {

enum class Kind { sgd, adam };

Kind kind_from_string(const std::string& s);
std::string to_string(Kind k);

struct Settings {
    Kind kind = Kind::adam;
    double weight_decay = 0.0;
    double momentum = 0.9;  // sgd
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam
};

/// SGD with momentum or Adam. Weight decay is the coupled L2 form (added to the
/// gradient) and only applies to params with `decay` set.
class Optimizer {
public:
    Optimizer(std::vector<nn::Param*> params, Settings settings);

    void step(double lr);
    void zero_grad();

    const Settings& settings() const { return settings_; }
    std::int64_t steps() const { return steps_; }

    /// Moment buffers flattened in parameter order, followed by nothing else;
    /// the step counter travels separately.
    std::vector<float> state() const;
    void load_state(std::span<const float> flat, std::int64_t steps);

private:
    std::vector<nn::Param*> params_;
    Settings settings_;
    std::vector<std::vector<float>> m_, v_;
    std::int64_t steps_ = 0;
};

}  // namespace cmc::optim

#endif
