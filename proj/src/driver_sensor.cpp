#include "bivo/driver_sensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bivo::ds
{

namespace
{

nn::MlpSpec encoder_spec(const DriverSensorConfig & c)
{
  return {{c.history_width(), c.hidden, c.hidden}, {nn::Activation::kRelu, nn::Activation::kRelu}};
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x)
{
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void log_softmax(std::span<const double> logits, std::span<double> out)
{
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (const double l : logits) sum += std::exp(l - m);
  const double lse = m + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

}  // namespace

DriverSensorModel::DriverSensorModel(DriverSensorConfig config) : config_(config)
{
  const std::size_t C = config_.latent_classes;
  const std::size_t H = config_.hidden;
  std::size_t at = 0;
  encoder_ = nn::Mlp(encoder_spec(config_), at);
  at = encoder_.end();
  prior_ = nn::Mlp(nn::make_mlp_spec(H, {}, C), at);
  at = prior_.end();
  posterior_ = nn::Mlp(nn::make_mlp_spec(H + config_.grid_cells(), {H}, C), at);
  at = posterior_.end();
  decoder_ = nn::Mlp(nn::make_mlp_spec(C, {H}, config_.grid_cells()), at);
  params_.assign(decoder_.end(), 0.0);
}

void DriverSensorModel::initialize(std::uint64_t seed)
{
  nn::Rng rng(seed);
  for (const auto * m : {&encoder_, &prior_, &posterior_, &decoder_}) m->initialize(params_, rng);
}

nn::Tensor DriverSensorModel::prior_logits(const nn::Tensor & histories) const
{
  return prior_.forward(params_, encoder_.forward(params_, histories));
}

nn::Tensor DriverSensorModel::decode_probabilities(const nn::Tensor & codes) const
{
  auto logits = decoder_.forward(params_, codes);
  for (auto & v : logits.data) v = sigmoid(v);
  return logits;
}

std::string DriverSensorModel::descriptor() const
{
  nlohmann::json j;
  j["latent_classes"] = config_.latent_classes;
  j["hidden"] = config_.hidden;
  j["history_steps"] = config_.history_steps;
  j["grid_size"] = config_.grid_size;
  j["encoder"] = encoder_.spec().descriptor();
  j["decoder"] = decoder_.spec().descriptor();
  return j.dump();
}

std::optional<std::vector<double>> history_features(const world::Trajectory & traj, int step, int history_steps)
{
  if (!traj.covers(step) || !traj.covers(step - history_steps)) return std::nullopt;
  const auto & now = world::state_at(traj, step);
  const auto frame = world::pose_of(now);
  std::vector<double> f;
  f.reserve(static_cast<std::size_t>(history_steps + 1) * 5);
  for (int k = step - history_steps; k <= step; ++k) {
    const auto local = world::to_frame(world::state_at(traj, k), frame);
    f.push_back(local.x / 10.0);
    f.push_back(local.y / 10.0);
    f.push_back(local.heading);
    f.push_back(local.speed / 10.0);
    f.push_back(local.accel / 4.0);
  }
  return f;
}

DsLossBreakdown ds_loss(
  const DriverSensorModel & model, std::span<const double> params, std::span<const DsExample * const> batch,
  double beta, double temperature, nn::Rng & rng, std::vector<double> * grads)
{
  const auto & cfg = model.config();
  const std::size_t B = batch.size();
  if (B < 2) throw std::invalid_argument("ds_loss needs a batch of at least two examples");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
  const std::size_t C = cfg.latent_classes;
  const std::size_t G = cfg.grid_cells();
  const std::size_t F = cfg.history_width();
  const double inv_b = 1.0 / static_cast<double>(B);

  nn::Tensor hist = nn::Tensor::matrix(B, F);
  nn::Tensor target = nn::Tensor::matrix(B, G);
  for (std::size_t i = 0; i < B; ++i) {
    if (batch[i]->history.size() != F || batch[i]->grid.size() != G) {
      throw std::invalid_argument("driver-sensor example does not match model dimensions");
    }
    std::copy(batch[i]->history.begin(), batch[i]->history.end(), hist.row(i).begin());
    for (std::size_t g = 0; g < G; ++g) target(i, g) = batch[i]->grid[g];
  }

  nn::ForwardCache enc_cache, prior_cache, post_cache, dec_cache;
  const auto features = model.encoder().forward(params, hist, &enc_cache);
  const auto prior_logits = model.prior().forward(params, features, &prior_cache);
  const auto post_in = nn::hconcat(features, target);
  const auto post_logits = model.posterior().forward(params, post_in, &post_cache);

  nn::Tensor log_q = nn::Tensor::matrix(B, C), log_p = nn::Tensor::matrix(B, C);
  nn::Tensor q = nn::Tensor::matrix(B, C), p = nn::Tensor::matrix(B, C), z = nn::Tensor::matrix(B, C);
  for (std::size_t i = 0; i < B; ++i) {
    log_softmax(post_logits.row(i), log_q.row(i));
    log_softmax(prior_logits.row(i), log_p.row(i));
    for (std::size_t c = 0; c < C; ++c) {
      q(i, c) = std::exp(log_q(i, c));
      p(i, c) = std::exp(log_p(i, c));
    }
    const auto g = nn::gumbel_softmax_sample(post_logits.row(i), temperature, rng);
    std::copy(g.sample.begin(), g.sample.end(), z.row(i).begin());
  }
  const auto dec_logits = model.decoder().forward(params, z, &dec_cache);

  DsLossBreakdown out;
  out.beta = beta;
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t g = 0; g < G; ++g) {
      const double l = dec_logits(i, g);
      out.reconstruction_nll += softplus(l) - target(i, g) * l;
    }
  }
  out.reconstruction_nll *= inv_b;

  std::vector<double> kl_i(B, 0.0), h_i(B, 0.0), q_bar(C, 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      kl_i[i] += q(i, c) * (log_q(i, c) - log_p(i, c));
      h_i[i] -= q(i, c) * log_q(i, c);
      q_bar[c] += q(i, c) * inv_b;
    }
    out.kl += kl_i[i] * inv_b;
  }
  const double h_bar = nn::entropy(q_bar);
  double mean_h = 0.0;
  for (const double h : h_i) mean_h += h * inv_b;
  out.mutual_information = h_bar - mean_h;
  out.batch_entropy = -h_bar;
  out.total = out.reconstruction_nll + beta * out.kl - out.mutual_information + (1.0 - beta) * out.batch_entropy;
  for (const double m : q_bar) {
    if (m > 1.0 / (10.0 * static_cast<double>(C))) ++out.active_classes;
  }

  if (!grads) return out;
  grads->assign(params.size(), 0.0);

  // Reconstruction through the decoder and the relaxed sample.
  nn::Tensor d_dec = nn::Tensor::matrix(B, G);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t g = 0; g < G; ++g) d_dec(i, g) = (sigmoid(dec_logits(i, g)) - target(i, g)) * inv_b;
  }
  const auto d_z = model.decoder().backward(params, dec_cache, d_dec, *grads);

  // H(q_bar) enters with weight -(1) from -MI and -(1 - beta) from the entropy term.
  const double w_hbar = -1.0 - (1.0 - beta);
  std::vector<double> g_bar(C);
  for (std::size_t c = 0; c < C; ++c) g_bar[c] = -(std::log(q_bar[c]) + 1.0);

  nn::Tensor d_post = nn::Tensor::matrix(B, C);
  nn::Tensor d_prior = nn::Tensor::matrix(B, C);
  for (std::size_t i = 0; i < B; ++i) {
    double zdot = 0.0;
    for (std::size_t c = 0; c < C; ++c) zdot += d_z(i, c) * z(i, c);
    double gq = 0.0;
    for (std::size_t c = 0; c < C; ++c) gq += g_bar[c] * q(i, c);
    for (std::size_t j = 0; j < C; ++j) {
      const double qj = q(i, j);
      double d = z(i, j) * (d_z(i, j) - zdot) / temperature;
      d += beta * inv_b * qj * (log_q(i, j) - log_p(i, j) - kl_i[i]);
      // +mean_i H(q_i) from -MI.
      d += inv_b * (-qj * (log_q(i, j) + h_i[i]));
      d += w_hbar * inv_b * qj * (g_bar[j] - gq);
      d_post(i, j) = d;
      d_prior(i, j) = beta * inv_b * (p(i, j) - qj);
    }
  }
  const auto d_post_in = model.posterior().backward(params, post_cache, d_post, *grads);
  auto d_features = model.prior().backward(params, prior_cache, d_prior, *grads);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t h = 0; h < d_features.cols(); ++h) d_features(i, h) += d_post_in(i, h);
  }
  model.encoder().backward(params, enc_cache, d_features, *grads);
  return out;
}

DsTrainState make_train_state(const DriverSensorConfig & config, const DsTrainConfig & train)
{
  DsTrainState state{DriverSensorModel(config), nn::AdamState(0, train.learning_rate), 0, {}};
  state.model.initialize(train.seed);
  state.adam = nn::AdamState(state.model.params().size(), train.learning_rate);
  return state;
}

void train_driver_sensor(DsTrainState & state, const std::vector<DsExample> & dataset, const DsTrainConfig & train)
{
  if (dataset.empty()) throw std::invalid_argument("driver-sensor dataset is empty");
  const std::size_t batch_size = std::max<std::size_t>(2, std::min(train.batch_size, std::max<std::size_t>(dataset.size(), 2)));
  std::vector<double> grads;
  std::vector<const DsExample *> batch(batch_size);
  if (state.step == 0) {
    // Decoder output bias starts at the per-cell occupancy rate.
    const std::size_t G = state.model.config().grid_cells();
    std::vector<double> rate(G, 0.0);
    for (const auto & ex : dataset) {
      if (ex.grid.size() != G) throw std::invalid_argument("driver-sensor example does not match model dimensions");
      for (std::size_t g = 0; g < G; ++g) rate[g] += ex.grid[g];
    }
    const auto & dec = state.model.decoder();
    for (std::size_t g = 0; g < G; ++g) {
      const double r = std::clamp(rate[g] / static_cast<double>(dataset.size()), 1e-3, 1.0 - 1e-3);
      state.model.params()[dec.end() - G + g] = std::log(r / (1.0 - r));
    }
  }
  const double total = static_cast<double>(std::max<std::size_t>(train.steps, 1));
  while (state.step < train.steps) {
    // Per-step stream so resumed runs reproduce uninterrupted ones.
    nn::Rng rng(train.seed * 0x9E3779B97F4A7C15ULL + state.step + 1);
    std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
    for (auto & b : batch) b = &dataset[pick(rng)];
    const double progress = static_cast<double>(state.step) / total;
    const double beta = std::clamp(progress / train.beta_anneal_fraction, 0.0, 1.0);
    const double temperature = train.temperature_start + (train.temperature_end - train.temperature_start) * progress;
    auto loss = ds_loss(state.model, state.model.params(), batch, beta, temperature, rng, &grads);
    nn::adam_step(state.adam, state.model.params(), grads);
    state.history.push_back(loss);
    ++state.step;
  }
}

DsTrainState train_driver_sensor(
  const std::vector<DsExample> & dataset, const DriverSensorConfig & config, const DsTrainConfig & train)
{
  auto state = make_train_state(config, train);
  train_driver_sensor(state, dataset, train);
  return state;
}

raster::OccupancyGrid reconstruct_most_likely(
  const DriverSensorModel & model, std::span<const double> history, const world::Pose2 & agent_pose)
{
  const auto & cfg = model.config();
  nn::Tensor h({1, cfg.history_width()}, std::vector<double>(history.begin(), history.end()));
  const auto logits = model.prior_logits(h);
  const auto best = static_cast<std::size_t>(
    std::max_element(logits.data.begin(), logits.data.end()) - logits.data.begin());
  nn::Tensor code = nn::Tensor::matrix(1, cfg.latent_classes);
  code(0, best) = 1.0;
  const auto probs = model.decode_probabilities(code);
  raster::OccupancyGrid grid(agent_pose, cfg.grid_size, cfg.grid_size);
  grid.values() = probs.data;
  return grid;
}

// ---------------------------------------------------------------------------

BeliefCell to_belief(double value, bool observed, double discount)
{
  if (!observed) return {0.0, 0.0, 1.0};
  const double p = std::clamp(value, 0.0, 1.0);
  return {p * (1.0 - discount), (1.0 - p) * (1.0 - discount), discount};
}

Combination dempster_combine(const BeliefCell & a, const BeliefCell & b)
{
  const double conflict = a.occupied * b.free + a.free * b.occupied;
  const double norm = 1.0 - conflict;
  if (norm <= 1e-15) return {{0.0, 0.0, 1.0}, true};
  const double occ = (a.occupied * b.occupied + a.occupied * b.unknown + a.unknown * b.occupied) / norm;
  const double fr = (a.free * b.free + a.free * b.unknown + a.unknown * b.free) / norm;
  const double unk = (a.unknown * b.unknown) / norm;
  return {{occ, fr, unk}, false};
}

raster::OccupancyGrid fuse_to_ego(
  const raster::OccupancyGrid & ego_observed, std::span<const raster::OccupancyGrid> agent_grids, double discount)
{
  struct Frame
  {
    const raster::OccupancyGrid * grid;
    double c, s;
  };
  std::vector<Frame> frames;
  frames.reserve(agent_grids.size());
  for (const auto & g : agent_grids) {
    frames.push_back({&g, std::cos(g.center_pose().heading), std::sin(g.center_pose().heading)});
  }
  raster::OccupancyGrid out(ego_observed.center_pose(), ego_observed.height(), ego_observed.width());
  for (int r = 0; r < out.height(); ++r) {
    for (int c = 0; c < out.width(); ++c) {
      const double v = ego_observed.at(r, c);
      BeliefCell belief = to_belief(v, v != raster::kOccluded, discount);
      const auto [wx, wy] = ego_observed.world_center(r, c);
      for (const auto & f : frames) {
        const auto & pose = f.grid->center_pose();
        const double dx = wx - pose.x;
        const double dy = wy - pose.y;
        const auto cell = f.grid->cell_of_local(f.c * dx + f.s * dy, -f.s * dx + f.c * dy);
        if (!cell) continue;
        belief = dempster_combine(belief, to_belief(f.grid->at(*cell), true, discount)).cell;
      }
      out.at(r, c) = belief.pignistic();
    }
  }
  return out;
}

EgoView observe_and_fuse(
  const world::Scene & scene, int step, const world::AgentState & ego_state, world::AgentId ego_id,
  const DriverSensorModel * model, int height, int width)
{
  EgoView view;
  view.observed = raster::build_observed_ogm(scene, step, ego_state, ego_id, height, width);
  std::vector<raster::OccupancyGrid> sources;
  for (const auto & agent : scene.agents) {
    if (agent.id == ego_id || !agent.trajectory.covers(step)) continue;
    const auto & s = world::state_at(agent.trajectory, step);
    if (raster::agent_hidden(view.observed, agent, step)) continue;
    view.visible_agents.push_back(agent.id);
    if (!model || !view.observed.cell_of_world(s.x, s.y)) continue;
    const auto features = history_features(agent.trajectory, step, model->config().history_steps);
    if (!features) continue;
    sources.push_back(reconstruct_most_likely(*model, *features, world::pose_of(s)));
  }
  view.sources = sources.size();
  view.fused = fuse_to_ego(view.observed, sources);
  return view;
}

std::vector<DsExample> mine_examples(const world::Scene & scene, const DriverSensorConfig & config, int stride)
{
  std::vector<DsExample> out;
  const auto & ego = scene.ego;
  for (int t = ego.trajectory.start_step() + config.history_steps; t < ego.trajectory.end_step();
       t += std::max(1, stride)) {
    std::optional<raster::OccupancyGrid> observed;
    for (const auto & agent : scene.agents) {
      auto features = history_features(agent.trajectory, t, config.history_steps);
      if (!features) continue;
      if (!observed) {
        observed = raster::build_observed_ogm(scene, t, ego, raster::kEgoGridSize, raster::kEgoGridSize);
      }
      const auto & s = world::state_at(agent.trajectory, t);
      if (!observed->cell_of_world(s.x, s.y) || raster::agent_hidden(*observed, agent, t)) continue;
      const auto gt = raster::build_ground_truth_ogm(scene, t, agent, config.grid_size, config.grid_size);
      DsExample ex;
      ex.history = std::move(*features);
      ex.grid.resize(gt.cell_count());
      for (std::size_t i = 0; i < gt.cell_count(); ++i) ex.grid[i] = gt.values()[i] > 0.5 ? 1 : 0;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

nn::Checkpoint to_checkpoint(const DsTrainState & state, const DsTrainConfig & train)
{
  nlohmann::json j = nlohmann::json::parse(state.model.descriptor());
  j["kind"] = "driversensor";
  j["step"] = state.step;
  j["adam_step"] = state.adam.step;
  j["learning_rate"] = train.learning_rate;
  j["steps"] = train.steps;
  j["batch_size"] = train.batch_size;
  j["seed"] = train.seed;
  nn::Checkpoint ckpt{j.dump(), state.model.params()};
  ckpt.params.insert(ckpt.params.end(), state.adam.m.begin(), state.adam.m.end());
  ckpt.params.insert(ckpt.params.end(), state.adam.v.begin(), state.adam.v.end());
  return ckpt;
}

DsTrainState from_checkpoint(const nn::Checkpoint & ckpt, DsTrainConfig * train)
{
  const auto j = nlohmann::json::parse(ckpt.descriptor);
  if (j.value("kind", "") != "driversensor") throw std::runtime_error("checkpoint is not a driver-sensor model");
  DriverSensorConfig cfg;
  cfg.latent_classes = j.at("latent_classes").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.history_steps = j.at("history_steps").get<int>();
  cfg.grid_size = j.at("grid_size").get<int>();
  DsTrainState state{DriverSensorModel(cfg), nn::AdamState(0), j.at("step").get<std::uint64_t>(), {}};
  const std::size_t n = state.model.params().size();
  if (ckpt.params.size() != 3 * n) throw std::runtime_error("driver-sensor checkpoint size mismatch");
  std::copy(ckpt.params.begin(), ckpt.params.begin() + static_cast<std::ptrdiff_t>(n), state.model.params().begin());
  state.adam = nn::AdamState(n, j.at("learning_rate").get<double>());
  state.adam.step = j.at("adam_step").get<std::uint64_t>();
  std::copy(ckpt.params.begin() + static_cast<std::ptrdiff_t>(n), ckpt.params.begin() + static_cast<std::ptrdiff_t>(2 * n), state.adam.m.begin());
  std::copy(ckpt.params.begin() + static_cast<std::ptrdiff_t>(2 * n), ckpt.params.end(), state.adam.v.begin());
  if (train) {
    train->learning_rate = j.at("learning_rate").get<double>();
    train->steps = j.at("steps").get<std::size_t>();
    train->batch_size = j.at("batch_size").get<std::size_t>();
    train->seed = j.at("seed").get<std::uint64_t>();
  }
  return state;
}

}  // namespace bivo::ds
