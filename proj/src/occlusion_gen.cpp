#include "bivo/occlusion_gen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace bivo::gen
{

namespace
{

constexpr std::array<double, 4> kScale{10.0, 10.0, 1.0, 5.0};
constexpr double kPositionScale = 10.0;
// Below this speed the decoded heading holds its previous value.
constexpr double kMinHeadingSpeed = 0.5;

nn::MlpSpec four_layer(std::size_t in, std::size_t hidden, std::size_t out)
{
  return nn::make_mlp_spec(in, {hidden, hidden, hidden}, out);
}

}  // namespace

std::string to_string(Conditioning c)
{
  switch (c) {
    case Conditioning::kFused:
      return "fused";
    case Conditioning::kObserved:
      return "observed";
    case Conditioning::kNone:
      return "none";
  }
  return "fused";
}

Conditioning conditioning_from_string(const std::string & s)
{
  if (s == "fused") return Conditioning::kFused;
  if (s == "observed") return Conditioning::kObserved;
  if (s == "none") return Conditioning::kNone;
  throw std::invalid_argument("unknown conditioning '" + s + "'");
}

OcclusionGenModel::OcclusionGenModel(GenConfig config) : config_(config)
{
  if (config_.downsample <= 0 || config_.grid_size % config_.downsample != 0) {
    throw std::invalid_argument("grid size must be a multiple of the downsample factor");
  }
  const std::size_t F = config_.condition_features;
  const std::size_t Z = config_.latent_dim;
  const std::size_t H = config_.hidden;
  std::size_t at = 0;
  condition_ = nn::Mlp(
    nn::MlpSpec{{config_.condition_width(), H, F}, {nn::Activation::kRelu, nn::Activation::kTanh}}, at);
  at = condition_.end();
  prior_ = nn::Mlp(four_layer(F, H, 2 * Z), at);
  at = prior_.end();
  posterior_ = nn::Mlp(four_layer(config_.trajectory_width() + F, H, 2 * Z), at);
  at = posterior_.end();
  if (config_.control_points < 2) throw std::invalid_argument("decoder needs at least two control points");
  decoder_ = nn::Mlp(four_layer(Z + F, H, config_.decoder_width()), at);
  params_.assign(decoder_.end(), 0.0);
}

void OcclusionGenModel::initialize(std::uint64_t seed)
{
  nn::Rng rng(seed);
  for (const auto * m : {&condition_, &prior_, &posterior_, &decoder_}) m->initialize(params_, rng);
}

std::string OcclusionGenModel::descriptor() const
{
  nlohmann::json j;
  j["latent_dim"] = config_.latent_dim;
  j["hidden"] = config_.hidden;
  j["condition_features"] = config_.condition_features;
  j["control_points"] = config_.control_points;
  j["grid_size"] = config_.grid_size;
  j["downsample"] = config_.downsample;
  j["horizon_steps"] = config_.horizon_steps;
  j["dt"] = config_.dt;
  j["conditioning"] = to_string(config_.conditioning);
  j["decoder"] = decoder_.spec().descriptor();
  return j.dump();
}

nn::Tensor bezier_basis(std::size_t samples, std::size_t control_points, bool derivative)
{
  if (samples < 2 || control_points < 2) throw std::invalid_argument("bezier basis needs two samples and two points");
  const int n = static_cast<int>(control_points) - 1;
  auto bernstein = [](int deg, int j, double t) {
    if (j < 0 || j > deg) return 0.0;
    double binom = 1.0;
    for (int i = 1; i <= j; ++i) binom = binom * (deg - j + i) / i;
    return binom * std::pow(t, j) * std::pow(1.0 - t, deg - j);
  };
  nn::Tensor out = nn::Tensor::matrix(samples, control_points);
  for (std::size_t k = 0; k < samples; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(samples - 1);
    for (int j = 0; j <= n; ++j) {
      out(k, static_cast<std::size_t>(j)) =
        derivative ? n * (bernstein(n - 1, j - 1, t) - bernstein(n - 1, j, t)) : bernstein(n, j, t);
    }
  }
  return out;
}

std::vector<double> condition_input(
  const world::RoadRaster & road, const raster::OccupancyGrid * occupancy, const GenConfig & config)
{
  const int n = config.grid_size;
  const int d = config.downsample;
  const int p = config.pooled_size();
  if (road.height != n || road.width != n) throw std::invalid_argument("road raster size mismatch");
  if (occupancy && (occupancy->height() != n || occupancy->width() != n)) {
    throw std::invalid_argument("occupancy grid size mismatch");
  }
  std::vector<double> out(config.condition_width(), 0.0);
  const double inv = 1.0 / static_cast<double>(d * d);
  const std::size_t half = static_cast<std::size_t>(p * p);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const std::size_t cell = static_cast<std::size_t>((r / d) * p + (c / d));
      if (road.at(r, c) == world::RoadCell::kDrivable) out[cell] += inv;
      if (occupancy) out[half + cell] += occupancy->at(r, c) * inv;
    }
  }
  return out;
}

GenExample make_example(const raster::OccludedSample & sample, const GenConfig & config)
{
  const raster::OccupancyGrid * grid = nullptr;
  switch (config.conditioning) {
    case Conditioning::kFused:
      if (sample.fused_grid.cell_count() == 0) throw std::invalid_argument("occluded sample has no fused grid");
      grid = &sample.fused_grid;
      break;
    case Conditioning::kObserved:
      grid = &sample.observed_grid;
      break;
    case Conditioning::kNone:
      break;
  }
  if (sample.trajectory.size() != config.states()) {
    throw std::invalid_argument("occluded trajectory length does not match the horizon");
  }
  GenExample ex;
  ex.condition = condition_input(sample.road_raster, grid, config);
  ex.trajectory.reserve(config.trajectory_width());
  for (const auto & s : sample.trajectory.states()) {
    ex.trajectory.insert(ex.trajectory.end(), {s.x, s.y, s.heading, s.speed});
  }
  return ex;
}

GenLossBreakdown gen_elbo_loss(
  const OcclusionGenModel & model, std::span<const double> params, std::span<const GenExample * const> batch,
  nn::Rng & rng, std::vector<double> * grads)
{
  const auto & cfg = model.config();
  const std::size_t B = batch.size();
  if (B == 0) throw std::invalid_argument("gen_elbo_loss needs a non-empty batch");
  const std::size_t Z = cfg.latent_dim;
  const std::size_t T = cfg.trajectory_width();
  const std::size_t F = cfg.condition_features;
  const double inv_b = 1.0 / static_cast<double>(B);

  nn::Tensor cond = nn::Tensor::matrix(B, cfg.condition_width());
  nn::Tensor traj_in = nn::Tensor::matrix(B, T);
  for (std::size_t i = 0; i < B; ++i) {
    if (batch[i]->condition.size() != cfg.condition_width() || batch[i]->trajectory.size() != T) {
      throw std::invalid_argument("generator example does not match model dimensions");
    }
    std::copy(batch[i]->condition.begin(), batch[i]->condition.end(), cond.row(i).begin());
    for (std::size_t k = 0; k < T; ++k) traj_in(i, k) = batch[i]->trajectory[k] / kScale[k % 4];
  }

  nn::ForwardCache cond_cache, prior_cache, post_cache, dec_cache;
  const auto features = model.condition().forward(params, cond, &cond_cache);
  const auto prior_out = model.prior().forward(params, features, &prior_cache);
  const auto post_out = model.posterior().forward(params, nn::hconcat(traj_in, features), &post_cache);

  nn::Tensor latent = nn::Tensor::matrix(B, Z);
  nn::Tensor eps = nn::Tensor::matrix(B, Z);
  GenLossBreakdown out;
  std::vector<nn::GaussianKl> kls;
  kls.reserve(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto mean_q = post_out.row(i).subspan(0, Z);
    const auto lv_q = post_out.row(i).subspan(Z, Z);
    const auto draw = nn::gaussian_reparam(mean_q, lv_q, rng);
    std::copy(draw.sample.begin(), draw.sample.end(), latent.row(i).begin());
    std::copy(draw.eps.begin(), draw.eps.end(), eps.row(i).begin());
    kls.push_back(nn::kl_gaussian(mean_q, lv_q, prior_out.row(i).subspan(0, Z), prior_out.row(i).subspan(Z, Z)));
    out.kl += kls.back().value * inv_b;
  }
  const auto decoded = model.decoder().forward(params, nn::hconcat(latent, features), &dec_cache);

  const std::size_t S = cfg.states();
  const std::size_t P = cfg.control_points;
  const auto basis = bezier_basis(S, P);
  nn::Tensor d_dec = nn::Tensor::matrix(B, cfg.decoder_width());
  double sq = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t axis = 0; axis < 2; ++axis) {
      for (std::size_t k = 0; k < S; ++k) {
        double pred = 0.0;
        for (std::size_t j = 0; j < P; ++j) pred += basis(k, j) * decoded(i, axis * P + j);
        const double resid = pred * kPositionScale - batch[i]->trajectory[k * 4 + axis];
        sq += resid * resid;
        for (std::size_t j = 0; j < P; ++j) d_dec(i, axis * P + j) += resid * kPositionScale * basis(k, j) * inv_b;
      }
    }
  }
  out.reconstruction = 0.5 * sq * inv_b;
  out.mse = sq / static_cast<double>(B * S * 2);
  out.total = out.reconstruction + out.kl;
  if (!grads) return out;
  grads->assign(params.size(), 0.0);

  const auto d_dec_in = model.decoder().backward(params, dec_cache, d_dec, *grads);
  nn::Tensor d_post = nn::Tensor::matrix(B, 2 * Z);
  nn::Tensor d_prior = nn::Tensor::matrix(B, 2 * Z);
  nn::Tensor d_features = nn::column_slice(d_dec_in, Z, F);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < Z; ++j) {
      const double dz = d_dec_in(i, j);
      const double lv = post_out(i, Z + j);
      const bool free = nn::clamp_log_var(lv) == lv;
      d_post(i, j) = dz + kls[i].d_mean_q[j] * inv_b;
      d_post(i, Z + j) = (free ? dz * eps(i, j) * 0.5 * std::exp(0.5 * lv) : 0.0) + kls[i].d_log_var_q[j] * inv_b;
      d_prior(i, j) = kls[i].d_mean_p[j] * inv_b;
      d_prior(i, Z + j) = kls[i].d_log_var_p[j] * inv_b;
    }
  }
  const auto d_post_in = model.posterior().backward(params, post_cache, d_post, *grads);
  const auto d_prior_in = model.prior().backward(params, prior_cache, d_prior, *grads);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t f = 0; f < F; ++f) d_features(i, f) += d_post_in(i, T + f) + d_prior_in(i, f);
  }
  model.condition().backward(params, cond_cache, d_features, *grads);
  return out;
}

GenTrainState make_train_state(const GenConfig & config, const GenTrainConfig & train)
{
  GenTrainState state{OcclusionGenModel(config), nn::AdamState(0), 0, {}, {}};
  state.model.initialize(train.seed);
  state.adam = nn::AdamState(state.model.params().size(), train.learning_rate);
  return state;
}

void train_generator(GenTrainState & state, const std::vector<GenExample> & dataset, const GenTrainConfig & train)
{
  if (dataset.empty()) throw std::invalid_argument("generator dataset is empty");
  const std::size_t batch_size = std::max<std::size_t>(1, std::min(train.batch_size, dataset.size()));
  const std::size_t per_epoch = (dataset.size() + batch_size - 1) / batch_size;
  const std::uint64_t total = per_epoch * train.epochs;
  std::vector<double> grads;
  std::vector<const GenExample *> batch;
  while (state.step < total) {
    const std::uint64_t epoch = state.step / per_epoch;
    const std::uint64_t within = state.step % per_epoch;
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    nn::Rng shuffle_rng(train.seed * 0x9E3779B97F4A7C15ULL + epoch + 17);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::size_t from = within * batch_size;
    const std::size_t to = std::min(order.size(), from + batch_size);
    batch.clear();
    for (std::size_t i = from; i < to; ++i) batch.push_back(&dataset[order[i]]);
    nn::Rng rng(train.seed * 0xD1B54A32D192ED03ULL + state.step + 1);
    const auto loss = gen_elbo_loss(state.model, state.model.params(), batch, rng, &grads);
    nn::adam_step(state.adam, state.model.params(), grads);
    state.step_history.push_back(loss);
    ++state.step;
    if (state.step % per_epoch == 0) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t k = state.step_history.size() >= per_epoch ? state.step_history.size() - per_epoch : 0;
           k < state.step_history.size(); ++k, ++n) {
        sum += state.step_history[k].total;
      }
      state.epoch_elbo.push_back(n ? sum / static_cast<double>(n) : 0.0);
    }
  }
}

GenTrainState train_generator(
  const std::vector<GenExample> & dataset, const GenConfig & config, const GenTrainConfig & train)
{
  auto state = make_train_state(config, train);
  train_generator(state, dataset, train);
  return state;
}

double evaluate_elbo(const OcclusionGenModel & model, const std::vector<GenExample> & examples, std::uint64_t seed)
{
  if (examples.empty()) throw std::invalid_argument("no examples to evaluate");
  nn::Rng rng(seed);
  double sum = 0.0;
  constexpr std::size_t chunk = 64;
  std::vector<const GenExample *> batch;
  for (std::size_t from = 0; from < examples.size(); from += chunk) {
    batch.clear();
    for (std::size_t i = from; i < std::min(examples.size(), from + chunk); ++i) batch.push_back(&examples[i]);
    sum += gen_elbo_loss(model, model.params(), batch, rng).total * static_cast<double>(batch.size());
  }
  return sum / static_cast<double>(examples.size());
}

std::vector<world::Trajectory> decode_trajectories(
  const OcclusionGenModel & model, std::span<const double> condition_features, const nn::Tensor & latents,
  const world::AgentState & ego_state, int step)
{
  const auto & cfg = model.config();
  const std::size_t K = latents.rows();
  const std::size_t Z = cfg.latent_dim;
  const std::size_t F = cfg.condition_features;
  nn::Tensor input = nn::Tensor::matrix(K, Z + F);
  for (std::size_t k = 0; k < K; ++k) {
    std::copy(latents.row(k).begin(), latents.row(k).end(), input.row(k).begin());
    std::copy(condition_features.begin(), condition_features.end(), input.row(k).begin() + static_cast<std::ptrdiff_t>(Z));
  }
  const auto decoded = model.decoder().forward(model.params(), input);
  std::vector<world::Trajectory> out;
  out.reserve(K);
  const std::size_t S = cfg.states();
  const std::size_t P = cfg.control_points;
  const auto basis = bezier_basis(S, P);
  const auto slope = bezier_basis(S, P, true);
  const double span = cfg.horizon_steps * cfg.dt;
  for (std::size_t k = 0; k < K; ++k) {
    const auto row = decoded.row(k);
    std::vector<world::AgentState> states(S);
    std::vector<double> vx(S), vy(S);
    for (std::size_t s = 0; s < S; ++s) {
      double x = 0.0, y = 0.0;
      for (std::size_t j = 0; j < P; ++j) {
        x += basis(s, j) * row[j];
        y += basis(s, j) * row[P + j];
        vx[s] += slope(s, j) * row[j];
        vy[s] += slope(s, j) * row[P + j];
      }
      states[s].x = x * kPositionScale;
      states[s].y = y * kPositionScale;
      vx[s] *= kPositionScale / span;
      vy[s] *= kPositionScale / span;
      states[s].speed = std::hypot(vx[s], vy[s]);
    }
    // Heading follows the curve tangent while moving and holds otherwise; slow leading states take
    // the first moving heading, a standing agent faces its overall displacement.
    double heading = std::atan2(row[2 * P - 1] - row[P], row[P - 1] - row[0]);
    for (std::size_t s = 0; s < S; ++s) {
      if (states[s].speed > kMinHeadingSpeed) {
        heading = std::atan2(vy[s], vx[s]);
        break;
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      if (states[s].speed > kMinHeadingSpeed) heading = std::atan2(vy[s], vx[s]);
      states[s].heading = world::normalize_angle(heading);
    }
    for (std::size_t s = 1; s < S; ++s) states[s].accel = (states[s].speed - states[s - 1].speed) / cfg.dt;
    if (S > 1) states[0].accel = states[1].accel;
    for (auto & st : states) st = world::from_ego_frame(st, ego_state);
    out.emplace_back(-static_cast<world::AgentId>(k) - 1, step, cfg.dt, std::move(states));
  }
  return out;
}

SampleResult sample_trajectories(const OcclusionGenModel & model, const SampleRequest & request, nn::Rng & rng)
{
  if (request.count == 0) throw std::invalid_argument("sample count must be at least one");
  if (!(request.existence_prior >= 0.0 && request.existence_prior <= 1.0)) {
    throw std::invalid_argument("existence prior must lie in [0, 1]");
  }
  if (!request.road || !request.observed) throw std::invalid_argument("sampling needs a road raster and observed grid");
  const auto & cfg = model.config();
  SampleResult result;
  result.drawn = request.count;
  const bool any_occluded = std::any_of(
    request.observed->values().begin(), request.observed->values().end(),
    [](double v) { return v == raster::kOccluded; });
  if (!any_occluded) {
    result.rejected_origin = request.count;
    return result;
  }
  const raster::OccupancyGrid * grid = cfg.conditioning == Conditioning::kNone ? nullptr : request.condition_grid;
  if (cfg.conditioning != Conditioning::kNone && !grid) throw std::invalid_argument("conditioning grid missing");
  const auto cond = condition_input(*request.road, grid, cfg);
  const nn::Tensor cond_t({1, cond.size()}, cond);
  const auto features = model.condition().forward(model.params(), cond_t);

  const std::size_t Z = cfg.latent_dim;
  nn::Tensor latents = nn::Tensor::matrix(request.count, Z);
  std::normal_distribution<double> normal(0.0, 1.0);
  if (request.latent == LatentSource::kLearnedPrior) {
    const auto prior = model.prior().forward(model.params(), features);
    for (std::size_t k = 0; k < request.count; ++k) {
      for (std::size_t j = 0; j < Z; ++j) {
        latents(k, j) = prior(0, j) + std::exp(0.5 * nn::clamp_log_var(prior(0, Z + j))) * normal(rng);
      }
    }
  } else {
    for (auto & v : latents.data) v = normal(rng);
  }
  auto trajectories = decode_trajectories(model, features.row(0), latents, request.ego_state, request.step);
  const double weight = request.existence_prior / static_cast<double>(request.count);
  for (auto & traj : trajectories) {
    const auto & origin = traj.front();
    if (!raster::is_occluded(*request.observed, origin.x, origin.y)) {
      ++result.rejected_origin;
      continue;
    }
    if (!world::kinematically_feasible(traj, request.limits)) {
      ++result.rejected_feasibility;
      continue;
    }
    result.survivors.push_back({std::move(traj), weight});
  }
  return result;
}

nn::Checkpoint to_checkpoint(const GenTrainState & state, const GenTrainConfig & train)
{
  nlohmann::json j = nlohmann::json::parse(state.model.descriptor());
  j["kind"] = "generator";
  j["step"] = state.step;
  j["adam_step"] = state.adam.step;
  j["learning_rate"] = train.learning_rate;
  j["epochs"] = train.epochs;
  j["batch_size"] = train.batch_size;
  j["seed"] = train.seed;
  nn::Checkpoint ckpt{j.dump(), state.model.params()};
  ckpt.params.insert(ckpt.params.end(), state.adam.m.begin(), state.adam.m.end());
  ckpt.params.insert(ckpt.params.end(), state.adam.v.begin(), state.adam.v.end());
  return ckpt;
}

GenTrainState from_checkpoint(const nn::Checkpoint & ckpt, GenTrainConfig * train)
{
  const auto j = nlohmann::json::parse(ckpt.descriptor);
  if (j.value("kind", "") != "generator") throw std::runtime_error("checkpoint is not a generator model");
  GenConfig cfg;
  cfg.latent_dim = j.at("latent_dim").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.condition_features = j.at("condition_features").get<std::size_t>();
  cfg.control_points = j.at("control_points").get<std::size_t>();
  cfg.grid_size = j.at("grid_size").get<int>();
  cfg.downsample = j.at("downsample").get<int>();
  cfg.horizon_steps = j.at("horizon_steps").get<int>();
  cfg.dt = j.at("dt").get<double>();
  cfg.conditioning = conditioning_from_string(j.at("conditioning").get<std::string>());
  GenTrainState state{OcclusionGenModel(cfg), nn::AdamState(0), j.at("step").get<std::uint64_t>(), {}, {}};
  const std::size_t n = state.model.params().size();
  if (ckpt.params.size() != 3 * n) throw std::runtime_error("generator checkpoint size mismatch");
  const auto b = ckpt.params.begin();
  std::copy(b, b + static_cast<std::ptrdiff_t>(n), state.model.params().begin());
  state.adam = nn::AdamState(n, j.at("learning_rate").get<double>());
  state.adam.step = j.at("adam_step").get<std::uint64_t>();
  std::copy(b + static_cast<std::ptrdiff_t>(n), b + static_cast<std::ptrdiff_t>(2 * n), state.adam.m.begin());
  std::copy(b + static_cast<std::ptrdiff_t>(2 * n), ckpt.params.end(), state.adam.v.begin());
  if (train) {
    train->learning_rate = j.at("learning_rate").get<double>();
    train->epochs = j.at("epochs").get<std::size_t>();
    train->batch_size = j.at("batch_size").get<std::size_t>();
    train->seed = j.at("seed").get<std::uint64_t>();
  }
  return state;
}

}  // namespace bivo::gen
