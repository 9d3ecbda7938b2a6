#include "bivo/nn.hpp"

#include <Eigen/Dense>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace bivo::nn
{

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;
using VecMap = Eigen::Map<Eigen::RowVectorXd>;

Tensor::Tensor(std::vector<std::size_t> shape_, double fill) : shape(std::move(shape_))
{
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  data.assign(n, fill);
}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> data_) : shape(std::move(shape_)), data(std::move(data_))
{
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  if (n != data.size()) {
    throw std::invalid_argument("tensor data length does not match shape");
  }
}

Tensor hconcat(const Tensor & a, const Tensor & b)
{
  if (a.rows() != b.rows()) throw std::invalid_argument("hconcat row mismatch");
  Tensor out = Tensor::matrix(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
    std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return out;
}

Tensor column_slice(const Tensor & a, std::size_t from, std::size_t count)
{
  if (from + count > a.cols()) throw std::invalid_argument("column slice out of range");
  Tensor out = Tensor::matrix(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto src = a.row(r).subspan(from, count);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

std::string to_string(Activation a)
{
  switch (a) {
    case Activation::kIdentity:
      return "identity";
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
  }
  return "identity";
}

Activation activation_from_string(const std::string & s)
{
  if (s == "identity") return Activation::kIdentity;
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

std::size_t MlpSpec::parameter_count() const
{
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
  return n;
}

void MlpSpec::validate() const
{
  if (activations.empty() || widths.size() != activations.size() + 1) {
    throw std::invalid_argument("mlp spec needs one activation per layer and at least one layer");
  }
  for (const auto w : widths) {
    if (w == 0) throw std::invalid_argument("mlp widths must be positive");
  }
}

std::string MlpSpec::descriptor() const
{
  std::ostringstream os;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    if (l) os << '-' << to_string(activations[l - 1]) << '-';
    os << widths[l];
  }
  return os.str();
}

MlpSpec make_mlp_spec(std::size_t input, std::vector<std::size_t> hidden, std::size_t output, Activation hidden_activation)
{
  MlpSpec spec;
  spec.widths.push_back(input);
  for (const auto h : hidden) {
    spec.widths.push_back(h);
    spec.activations.push_back(hidden_activation);
  }
  spec.widths.push_back(output);
  spec.activations.push_back(Activation::kIdentity);
  spec.validate();
  return spec;
}

Mlp::Mlp(MlpSpec spec, std::size_t offset) : spec_(std::move(spec)), offset_(offset) { spec_.validate(); }

void Mlp::initialize(std::span<double> params, Rng & rng) const
{
  std::size_t at = offset_;
  for (std::size_t l = 0; l < spec_.layers(); ++l) {
    const std::size_t in = spec_.widths[l];
    const std::size_t out = spec_.widths[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (std::size_t i = 0; i < in * out; ++i) params[at++] = dist(rng);
    for (std::size_t i = 0; i < out; ++i) params[at++] = 0.0;
  }
}

namespace
{

void apply_activation(Activation a, const RowMatrix & pre, MatMap out)
{
  switch (a) {
    case Activation::kIdentity:
      out = pre;
      break;
    case Activation::kRelu:
      out = pre.cwiseMax(0.0);
      break;
    case Activation::kTanh:
      out = pre.array().tanh().matrix();
      break;
  }
}

}  // namespace

Tensor Mlp::forward(std::span<const double> params, const Tensor & input, ForwardCache * cache) const
{
  if (input.shape.size() != 2 || input.cols() != spec_.input_width()) {
    throw std::invalid_argument(
      "mlp input width " + std::to_string(input.cols()) + " does not match " +
      std::to_string(spec_.input_width()));
  }
  if (params.size() < end()) throw std::invalid_argument("parameter buffer too small for mlp");
  const auto batch = static_cast<Eigen::Index>(input.rows());
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Tensor current = input;
  std::size_t at = offset_;
  for (std::size_t l = 0; l < spec_.layers(); ++l) {
    const auto in = static_cast<Eigen::Index>(spec_.widths[l]);
    const auto out = static_cast<Eigen::Index>(spec_.widths[l + 1]);
    ConstMatMap W(params.data() + at, out, in);
    ConstVecMap b(params.data() + at + static_cast<std::size_t>(in * out), out);
    at += static_cast<std::size_t>(in * out + out);
    ConstMatMap X(current.data.data(), batch, in);
    RowMatrix Z = X * W.transpose();
    Z.rowwise() += b;
    Tensor next = Tensor::matrix(static_cast<std::size_t>(batch), static_cast<std::size_t>(out));
    apply_activation(spec_.activations[l], Z, MatMap(next.data.data(), batch, out));
    if (cache) {
      cache->inputs.push_back(std::move(current));
      Tensor pre = Tensor::matrix(static_cast<std::size_t>(batch), static_cast<std::size_t>(out));
      MatMap(pre.data.data(), batch, out) = Z;
      cache->pre.push_back(std::move(pre));
    }
    current = std::move(next);
  }
  return current;
}

Tensor Mlp::backward(
  std::span<const double> params, const ForwardCache & cache, const Tensor & grad_output,
  std::span<double> grads) const
{
  if (cache.inputs.size() != spec_.layers()) throw std::invalid_argument("forward cache does not match mlp");
  const auto batch = static_cast<Eigen::Index>(cache.inputs.front().rows());
  if (grad_output.rows() != static_cast<std::size_t>(batch) || grad_output.cols() != spec_.output_width()) {
    throw std::invalid_argument("output gradient shape mismatch");
  }
  std::vector<std::size_t> layer_offset(spec_.layers());
  std::size_t at = offset_;
  for (std::size_t l = 0; l < spec_.layers(); ++l) {
    layer_offset[l] = at;
    at += spec_.widths[l] * spec_.widths[l + 1] + spec_.widths[l + 1];
  }
  RowMatrix upstream = ConstMatMap(grad_output.data.data(), batch, static_cast<Eigen::Index>(grad_output.cols()));
  for (std::size_t li = spec_.layers(); li-- > 0;) {
    const auto in = static_cast<Eigen::Index>(spec_.widths[li]);
    const auto out = static_cast<Eigen::Index>(spec_.widths[li + 1]);
    ConstMatMap Z(cache.pre[li].data.data(), batch, out);
    RowMatrix dZ;
    switch (spec_.activations[li]) {
      case Activation::kIdentity:
        dZ = upstream;
        break;
      case Activation::kRelu:
        dZ = (Z.array() > 0.0).select(upstream, 0.0);
        break;
      case Activation::kTanh:
        dZ = upstream.array() * (1.0 - Z.array().tanh().square());
        break;
    }
    ConstMatMap X(cache.inputs[li].data.data(), batch, in);
    ConstMatMap W(params.data() + layer_offset[li], out, in);
    MatMap dW(grads.data() + layer_offset[li], out, in);
    VecMap db(grads.data() + layer_offset[li] + static_cast<std::size_t>(in * out), out);
    dW.noalias() += dZ.transpose() * X;
    db += dZ.colwise().sum();
    upstream = dZ * W;
  }
  Tensor grad_input = Tensor::matrix(static_cast<std::size_t>(batch), spec_.input_width());
  MatMap(grad_input.data.data(), batch, static_cast<Eigen::Index>(spec_.input_width())) = upstream;
  return grad_input;
}

Tensor backward_scalar(
  const Mlp & mlp, std::span<const double> params, const ForwardCache & cache, const Tensor & loss,
  std::span<double> grads)
{
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got " + std::to_string(loss.numel()) + " values");
  }
  return mlp.backward(params, cache, Tensor::matrix(1, 1, 1.0), grads);
}

// ---------------------------------------------------------------------------

double clamp_log_var(double lv) { return std::clamp(lv, kLogVarMin, kLogVarMax); }

void softmax(std::span<const double> logits, std::span<double> out)
{
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] /= sum;
}

std::vector<double> softmax(std::span<const double> logits)
{
  std::vector<double> out(logits.size());
  softmax(logits, out);
  return out;
}

double entropy(std::span<const double> probs)
{
  double h = 0.0;
  for (const double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double kl_gaussian_standard(std::span<const double> mean, std::span<const double> log_var)
{
  if (mean.size() != log_var.size()) throw std::invalid_argument("mean/log_var shape mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double lv = clamp_log_var(log_var[i]);
    kl += mean[i] * mean[i] + std::exp(lv) - 1.0 - lv;
  }
  return std::max(0.0, 0.5 * kl);
}

GaussianKl kl_gaussian(
  std::span<const double> mean_q, std::span<const double> log_var_q, std::span<const double> mean_p,
  std::span<const double> log_var_p)
{
  const std::size_t n = mean_q.size();
  if (log_var_q.size() != n || mean_p.size() != n || log_var_p.size() != n) {
    throw std::invalid_argument("gaussian kl shape mismatch");
  }
  GaussianKl out;
  out.d_mean_q.resize(n);
  out.d_log_var_q.resize(n);
  out.d_mean_p.resize(n);
  out.d_log_var_p.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lq = clamp_log_var(log_var_q[i]);
    const double lp = clamp_log_var(log_var_p[i]);
    const bool q_free = lq == log_var_q[i];
    const bool p_free = lp == log_var_p[i];
    const double inv_vp = std::exp(-lp);
    const double vq = std::exp(lq);
    const double diff = mean_q[i] - mean_p[i];
    out.value += 0.5 * (lp - lq + (vq + diff * diff) * inv_vp - 1.0);
    out.d_mean_q[i] = diff * inv_vp;
    out.d_mean_p[i] = -diff * inv_vp;
    out.d_log_var_q[i] = q_free ? 0.5 * (vq * inv_vp - 1.0) : 0.0;
    out.d_log_var_p[i] = p_free ? 0.5 * (1.0 - (vq + diff * diff) * inv_vp) : 0.0;
  }
  return out;
}

double kl_categorical(std::span<const double> q, std::span<const double> p)
{
  if (q.size() != p.size()) throw std::invalid_argument("categorical kl size mismatch");
  const double sq = std::accumulate(q.begin(), q.end(), 0.0);
  const double sp = std::accumulate(p.begin(), p.end(), 0.0);
  if (std::abs(sq - 1.0) > 1e-6 || std::abs(sp - 1.0) > 1e-6) {
    throw std::invalid_argument("categorical kl inputs must sum to one");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    if (p[i] <= 0.0) throw std::domain_error("categorical kl is infinite: p is zero where q is positive");
    kl += q[i] * std::log(q[i] / p[i]);
  }
  return std::max(0.0, kl);
}

GumbelSample gumbel_softmax_sample(std::span<const double> logits, double temperature, Rng & rng)
{
  if (!(temperature > 0.0)) throw std::invalid_argument("gumbel temperature must be positive");
  std::uniform_real_distribution<double> uni(std::numeric_limits<double>::min(), 1.0);
  GumbelSample out;
  out.noise.resize(logits.size());
  std::vector<double> perturbed(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.noise[i] = -std::log(-std::log(uni(rng)));
    perturbed[i] = (logits[i] + out.noise[i]) / temperature;
  }
  out.sample = softmax(perturbed);
  return out;
}

GaussianSample gaussian_reparam(std::span<const double> mean, std::span<const double> log_var, Rng & rng)
{
  if (mean.size() != log_var.size()) throw std::invalid_argument("mean/log_var shape mismatch");
  std::normal_distribution<double> normal(0.0, 1.0);
  GaussianSample out;
  out.eps.resize(mean.size());
  out.sample.resize(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    out.eps[i] = normal(rng);
    out.sample[i] = mean[i] + std::exp(0.5 * clamp_log_var(log_var[i])) * out.eps[i];
  }
  return out;
}

void adam_step(AdamState & state, std::span<double> params, std::span<const double> grads)
{
  if (state.m.size() != params.size() || state.v.size() != params.size() || grads.size() != params.size()) {
    throw std::invalid_argument("adam state does not match parameters");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

double finite_difference_check(
  const std::function<double(std::span<const double>)> & loss, std::vector<double> params,
  std::span<const double> analytic, double step, double floor)
{
  if (analytic.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + step;
    const double up = loss(params);
    params[i] = orig - step;
    const double down = loss(params);
    params[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

// ---------------------------------------------------------------------------

namespace
{

constexpr char kMagic[8] = {'B', 'I', 'V', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string & out, std::uint32_t v)
{
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string & out, std::uint64_t v)
{
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u(const std::string & in, std::size_t & at, int bytes)
{
  if (at + static_cast<std::size_t>(bytes) > in.size()) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  }
  at += static_cast<std::size_t>(bytes);
  return v;
}

std::uint32_t crc_of(const std::string & bytes, std::size_t len)
{
  return static_cast<std::uint32_t>(
    crc32(0L, reinterpret_cast<const Bytef *>(bytes.data()), static_cast<uInt>(len)));
}

}  // namespace

std::string encode_checkpoint(const Checkpoint & ckpt)
{
  std::string out(kMagic, kMagic + 8);
  put_u32(out, kVersion);
  put_u64(out, ckpt.descriptor.size());
  out += ckpt.descriptor;
  put_u64(out, ckpt.params.size());
  for (const double p : ckpt.params) {
    std::uint64_t bits;
    std::memcpy(&bits, &p, sizeof(bits));
    put_u64(out, bits);
  }
  put_u32(out, crc_of(out, out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string & bytes)
{
  if (bytes.size() < 8 + 4 + 8 + 8 + 4 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint (bad magic)");
  }
  std::size_t at = 8;
  if (get_u(bytes, at, 4) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  const auto dlen = get_u(bytes, at, 8);
  if (at + dlen > bytes.size()) throw std::runtime_error("checkpoint truncated");
  Checkpoint ckpt;
  ckpt.descriptor = bytes.substr(at, dlen);
  at += dlen;
  const auto n = get_u(bytes, at, 8);
  if (at + n * 8 + 4 != bytes.size()) throw std::runtime_error("checkpoint truncated");
  ckpt.params.resize(n);
  for (auto & p : ckpt.params) {
    const std::uint64_t bits = get_u(bytes, at, 8);
    std::memcpy(&p, &bits, sizeof(bits));
  }
  const auto stored = static_cast<std::uint32_t>(get_u(bytes, at, 4));
  if (stored != crc_of(bytes, bytes.size() - 4)) throw std::runtime_error("checkpoint checksum mismatch");
  return ckpt;
}

void save_checkpoint(const std::string & path, const Checkpoint & ckpt)
{
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  const auto bytes = encode_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string & path)
{
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace bivo::nn
