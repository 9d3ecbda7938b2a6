#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace bivo::nn
{

using Rng = std::mt19937_64;

/// Dense row-major tensor.
struct Tensor
{
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape_, std::vector<double> data_);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  /// Trailing extent of a 2-D tensor.
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  double & operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool operator==(const Tensor &) const = default;
};

/// Concatenate two matrices along columns.
Tensor hconcat(const Tensor & a, const Tensor & b);
/// Columns [from, from + count) of a matrix.
Tensor column_slice(const Tensor & a, std::size_t from, std::size_t count);

enum class Activation { kIdentity, kRelu, kTanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string & s);

struct MlpSpec
{
  /// Input width followed by each layer's output width.
  std::vector<std::size_t> widths;
  std::vector<Activation> activations;

  std::size_t layers() const { return activations.size(); }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }
  std::size_t parameter_count() const;
  void validate() const;
  std::string descriptor() const;

  bool operator==(const MlpSpec &) const = default;
};

/// Hidden layers share `hidden`, the last layer is identity.
MlpSpec make_mlp_spec(std::size_t input, std::vector<std::size_t> hidden, std::size_t output,
                      Activation hidden_activation = Activation::kRelu);

struct ForwardCache
{
  /// inputs[l] is the input to layer l; pre[l] its pre-activation.
  std::vector<Tensor> inputs;
  std::vector<Tensor> pre;
};

/// A layer list whose weights live in a slice of a shared flat parameter buffer. Layer l stores
/// W (out x in, row-major) then b (out).
class Mlp
{
public:
  Mlp() = default;
  Mlp(MlpSpec spec, std::size_t offset);

  const MlpSpec & spec() const { return spec_; }
  std::size_t offset() const { return offset_; }
  std::size_t parameter_count() const { return spec_.parameter_count(); }
  std::size_t end() const { return offset_ + parameter_count(); }

  /// Glorot-uniform weights, zero biases.
  void initialize(std::span<double> params, Rng & rng) const;

  /// Throws std::invalid_argument on an input width mismatch.
  Tensor forward(std::span<const double> params, const Tensor & input, ForwardCache * cache = nullptr) const;
  /// Accumulates parameter gradients into `grads` and returns the gradient w.r.t. the input.
  Tensor backward(
    std::span<const double> params, const ForwardCache & cache, const Tensor & grad_output,
    std::span<double> grads) const;

private:
  MlpSpec spec_;
  std::size_t offset_{0};
};

/// Seeds reverse mode from a scalar output (a 1x1 tensor); throws std::invalid_argument otherwise.
Tensor backward_scalar(
  const Mlp & mlp, std::span<const double> params, const ForwardCache & cache, const Tensor & loss,
  std::span<double> grads);

// ---------------------------------------------------------------------------
// Distributions

inline constexpr double kLogVarMin = -20.0;
inline constexpr double kLogVarMax = 5.0;

double clamp_log_var(double lv);

void softmax(std::span<const double> logits, std::span<double> out);
std::vector<double> softmax(std::span<const double> logits);
double entropy(std::span<const double> probs);

/// 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
double kl_gaussian_standard(std::span<const double> mean, std::span<const double> log_var);

struct GaussianKl
{
  double value{0.0};
  std::vector<double> d_mean_q, d_log_var_q, d_mean_p, d_log_var_p;
};

/// KL(q || p) between diagonal Gaussians with gradients w.r.t. all four inputs.
GaussianKl kl_gaussian(
  std::span<const double> mean_q, std::span<const double> log_var_q, std::span<const double> mean_p,
  std::span<const double> log_var_p);

/// sum q log(q / p) with 0 log 0 = 0. Throws std::invalid_argument when either input does not sum
/// to one within 1e-6, and std::domain_error when p is zero where q is positive.
double kl_categorical(std::span<const double> q, std::span<const double> p);

struct GumbelSample
{
  std::vector<double> sample;
  std::vector<double> noise;
};

/// softmax((logits + g) / temperature) with g ~ Gumbel(0, 1).
GumbelSample gumbel_softmax_sample(std::span<const double> logits, double temperature, Rng & rng);

struct GaussianSample
{
  std::vector<double> sample;
  std::vector<double> eps;
};

/// mean + exp(0.5 * clamp(log_var)) * eps with eps ~ N(0, 1).
GaussianSample gaussian_reparam(std::span<const double> mean, std::span<const double> log_var, Rng & rng);

// ---------------------------------------------------------------------------
// Optimisation

struct AdamState
{
  double learning_rate{3e-4};
  double beta1{0.9};
  double beta2{0.999};
  double epsilon{1e-8};
  std::uint64_t step{0};
  std::vector<double> m;
  std::vector<double> v;

  explicit AdamState(std::size_t n = 0, double lr = 3e-4) : learning_rate(lr), m(n, 0.0), v(n, 0.0) {}
};

void adam_step(AdamState & state, std::span<double> params, std::span<const double> grads);

/// Largest relative error between `analytic` and central differences of `loss` at `params`.
/// Relative error uses max(|a|, |n|, floor) in the denominator.
double finite_difference_check(
  const std::function<double(std::span<const double>)> & loss, std::vector<double> params,
  std::span<const double> analytic, double step = 1e-5, double floor = 1e-6);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint
{
  std::string descriptor;
  std::vector<double> params;
};

/// "BIVOCKPT" magic, u32 version, length-prefixed descriptor, u64 count, little-endian f64 blob,
/// trailing CRC-32 over everything before it.
std::string encode_checkpoint(const Checkpoint & ckpt);
/// Throws std::runtime_error on bad magic, version, truncation or checksum.
Checkpoint decode_checkpoint(const std::string & bytes);
void save_checkpoint(const std::string & path, const Checkpoint & ckpt);
Checkpoint load_checkpoint(const std::string & path);

}  // namespace bivo::nn
