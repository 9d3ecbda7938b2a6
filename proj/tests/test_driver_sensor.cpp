#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <numeric>

#include "bivo/driver_sensor.hpp"
#include "bivo/pipeline.hpp"

namespace
{

using namespace bivo;
using namespace bivo::ds;

BeliefCell random_cell(nn::Rng & rng)
{
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double a = u(rng), b = u(rng), c = u(rng);
  const double s = a + b + c;
  return {a / s, b / s, c / s};
}

void expect_cell_near(const BeliefCell & a, const BeliefCell & b, double tol)
{
  EXPECT_NEAR(a.occupied, b.occupied, tol);
  EXPECT_NEAR(a.free, b.free, tol);
  EXPECT_NEAR(a.unknown, b.unknown, tol);
}

struct ToyBatch
{
  DriverSensorConfig config;
  std::vector<DsExample> examples;
  std::vector<const DsExample *> batch;
};

ToyBatch toy_batch(std::uint64_t seed)
{
  ToyBatch t;
  t.config.latent_classes = 5;
  t.config.hidden = 8;
  t.config.grid_size = 4;
  t.config.history_steps = 1;
  nn::Rng rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  t.examples.resize(4);
  for (auto & e : t.examples) {
    for (std::size_t i = 0; i < t.config.history_width(); ++i) e.history.push_back(u(rng));
    for (std::size_t i = 0; i < t.config.grid_cells(); ++i) e.grid.push_back(u(rng) > 0.3);
  }
  for (const auto & e : t.examples) t.batch.push_back(&e);
  return t;
}

std::vector<double> perturbed_params(const DriverSensorModel & m, std::uint64_t seed)
{
  auto p = m.params();
  nn::Rng rng(seed);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto & v : p) v += n(rng);
  return p;
}

class TrainedDriverSensor : public ::testing::Test
{
protected:
  static void SetUpTestSuite()
  {
    const auto scenes = pipeline::make_scenes({"ds", 40, 5, false, 1.0});
    dataset_ = new std::vector<DsExample>(pipeline::mine_dataset(scenes, config_));
    train_.steps = 300;
    train_.seed = 3;
    state_ = new DsTrainState(train_driver_sensor(*dataset_, config_, train_));
  }
  static void TearDownTestSuite()
  {
    delete state_;
    delete dataset_;
  }

  static inline DriverSensorConfig config_;
  static inline DsTrainConfig train_;
  static inline std::vector<DsExample> * dataset_ = nullptr;
  static inline DsTrainState * state_ = nullptr;
};

}  // namespace

TEST(Belief, FromProbability)
{
  expect_cell_near(to_belief(0.5, true), {0.4, 0.4, 0.2}, 1e-15);
  expect_cell_near(to_belief(1.0, true), {0.8, 0.0, 0.2}, 1e-15);
  expect_cell_near(to_belief(0.9, false), {0.0, 0.0, 1.0}, 0.0);
}

TEST(Dempster, VacuousIsNeutral)
{
  nn::Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto c = random_cell(rng);
    expect_cell_near(dempster_combine(c, {}).cell, c, 1e-12);
  }
}

TEST(Dempster, HandArithmetic)
{
  const BeliefCell c{0.8, 0.2, 0.0};
  const auto r = dempster_combine(c, c);
  EXPECT_FALSE(r.total_conflict);
  // Conflict 2 * 0.8 * 0.2 = 0.32, occupied 0.64 / 0.68.
  EXPECT_NEAR(r.cell.occupied, 0.64 / 0.68, 1e-12);
  EXPECT_NEAR(r.cell.occupied, 0.9412, 5e-5);
  EXPECT_NEAR(r.cell.free, 0.04 / 0.68, 1e-12);
}

TEST(Dempster, TotalConflictIsVacuous)
{
  const auto r = dempster_combine({1, 0, 0}, {0, 1, 0});
  EXPECT_TRUE(r.total_conflict);
  expect_cell_near(r.cell, {0, 0, 1}, 0.0);
}

TEST(Dempster, CommutativeAssociativeAndNormalised)
{
  nn::Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_cell(rng), b = random_cell(rng), c = random_cell(rng);
    const auto ab = dempster_combine(a, b).cell;
    expect_cell_near(ab, dempster_combine(b, a).cell, 1e-12);
    expect_cell_near(dempster_combine(ab, c).cell, dempster_combine(a, dempster_combine(b, c).cell).cell, 1e-9);
    EXPECT_NEAR(ab.occupied + ab.free + ab.unknown, 1.0, 1e-9);
  }
}

TEST(Fusion, NoSourcesRoundTripsObservation)
{
  raster::OccupancyGrid obs({0, 0, 0}, 30, 30, raster::kOccluded);
  obs.at(3, 4) = raster::kOccupied;
  obs.at(5, 6) = raster::kFree;
  const auto fused = fuse_to_ego(obs, {});
  EXPECT_NEAR(fused.at(3, 4), 0.9, 1e-12);
  EXPECT_NEAR(fused.at(5, 6), 0.1, 1e-12);
  EXPECT_EQ(fused.at(0, 0), 0.5);
}

TEST(Fusion, AgreeingSourcesReinforce)
{
  const raster::OccupancyGrid obs({0, 0, 0}, 30, 30, raster::kOccluded);
  const raster::OccupancyGrid src({0, 0, 0}, 30, 30, 0.8);
  const std::vector<raster::OccupancyGrid> one{src}, two{src, src};
  const auto f1 = fuse_to_ego(obs, one);
  const auto f2 = fuse_to_ego(obs, two);
  EXPECT_NEAR(f1.at(15, 15), 0.5 + 0.8 * 0.3, 1e-12);
  EXPECT_GT(f2.at(15, 15), f1.at(15, 15));
  for (double v : f2.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Fusion, CellsOutsideEverySourceStayHalf)
{
  const raster::OccupancyGrid obs({0, 0, 0}, 120, 120, raster::kOccluded);
  const std::vector<raster::OccupancyGrid> src{raster::OccupancyGrid({30, 30, 0.3}, 30, 30, 0.9)};
  const auto fused = fuse_to_ego(obs, src);
  EXPECT_EQ(fused.at(60, 5), 0.5);
  EXPECT_NE(fused.at(*fused.cell_of_world(30, 30)), 0.5);
}

TEST(DsLoss, BreakdownIdentityAndBetaOne)
{
  auto t = toy_batch(4);
  DriverSensorModel m(t.config);
  m.initialize(3);
  for (double beta : {0.0, 0.3, 1.0}) {
    nn::Rng rng(7);
    const auto l = ds_loss(m, m.params(), t.batch, beta, 0.7, rng);
    EXPECT_DOUBLE_EQ(l.total, l.reconstruction_nll + beta * l.kl - l.mutual_information + (1.0 - beta) * l.batch_entropy);
    if (beta == 1.0) {
      EXPECT_DOUBLE_EQ(l.total, l.reconstruction_nll + l.kl - l.mutual_information);
    }
    EXPECT_GE(l.kl, 0.0);
    EXPECT_LE(l.batch_entropy, 0.0);
  }
}

TEST(DsLoss, KlVanishesWhenPosteriorEqualsPrior)
{
  auto t = toy_batch(5);
  DriverSensorModel m(t.config);
  m.initialize(3);
  auto p = m.params();
  // Zero the last layers of both heads so each outputs identical (zero) logits.
  for (const auto * head : {&m.prior(), &m.posterior()}) {
    const auto & s = head->spec();
    const std::size_t last = s.widths[s.layers() - 1] * s.widths.back() + s.widths.back();
    std::fill(p.begin() + static_cast<long>(head->end() - last), p.begin() + static_cast<long>(head->end()), 0.0);
  }
  nn::Rng rng(1);
  EXPECT_NEAR(ds_loss(m, p, t.batch, 0.5, 1.0, rng).kl, 0.0, 1e-12);
}

TEST(DsLoss, GradientMatchesFiniteDifferences)
{
  auto t = toy_batch(6);
  DriverSensorModel m(t.config);
  m.initialize(3);
  const auto p = perturbed_params(m, 8);
  for (double beta : {0.0, 0.4, 1.0}) {
    std::vector<double> g;
    nn::Rng r1(9);
    ds_loss(m, p, t.batch, beta, 0.7, r1, &g);
    auto loss = [&](std::span<const double> params) {
      nn::Rng r2(9);
      return ds_loss(m, params, t.batch, beta, 0.7, r2).total;
    };
    EXPECT_LT(nn::finite_difference_check(loss, p, g), 1e-4) << "beta " << beta;
  }
}

TEST(DsLoss, RejectsBadArguments)
{
  auto t = toy_batch(7);
  DriverSensorModel m(t.config);
  m.initialize(3);
  nn::Rng rng(1);
  EXPECT_THROW(ds_loss(m, m.params(), std::span(t.batch).first(1), 0.5, 1.0, rng), std::invalid_argument);
  EXPECT_THROW(ds_loss(m, m.params(), t.batch, 1.5, 1.0, rng), std::invalid_argument);
}

TEST(History, FeaturesNeedFullWindow)
{
  std::vector<world::AgentState> s;
  for (int i = 0; i < 6; ++i) s.push_back(world::make_state(i * 2.0, 1.0, 0.0, 4.0));
  const world::Trajectory t(1, 10, 0.5, s);
  EXPECT_FALSE(history_features(t, 13, 4));
  const auto f = history_features(t, 14, 4);
  ASSERT_TRUE(f);
  EXPECT_EQ(f->size(), 25u);
  // Newest state is the agent origin.
  EXPECT_NEAR((*f)[20], 0.0, 1e-12);
  EXPECT_NEAR((*f)[0], -0.8, 1e-12);
  EXPECT_NEAR((*f)[23], 0.4, 1e-12);
}

TEST(Reconstruct, ArgmaxInvariantToPriorShift)
{
  DriverSensorConfig c;
  c.latent_classes = 6;
  c.hidden = 16;
  DriverSensorModel m(c);
  m.initialize(2);
  auto p = m.params();
  nn::Rng rng(3);
  std::vector<double> h(c.history_width());
  std::normal_distribution<double> n;
  for (auto & v : h) v = n(rng);
  const auto base = reconstruct_most_likely(m, h, {0, 0, 0});
  const auto & s = m.prior().spec();
  for (std::size_t k = 0; k < s.widths.back(); ++k) m.params()[m.prior().end() - s.widths.back() + k] += 3.7;
  const auto shifted = reconstruct_most_likely(m, h, {0, 0, 0});
  EXPECT_EQ(base, shifted);
  for (double v : base.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(TrainedDriverSensor, LossDecreases)
{
  const auto & h = state_->history;
  ASSERT_EQ(h.size(), train_.steps);
  auto mean_total = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += h[i].total;
    return s / static_cast<double>(to - from);
  };
  EXPECT_LT(mean_total(h.size() - 30, h.size()), mean_total(0, 30));
}

TEST_F(TrainedDriverSensor, LatentStaysActiveEarly)
{
  const auto at = train_.steps / 10;
  EXPECT_GT(state_->history[at].active_classes, 1u);
}

TEST_F(TrainedDriverSensor, DeterministicAndResumable)
{
  auto short_train = train_;
  short_train.steps = 10;
  const auto a = train_driver_sensor(*dataset_, config_, short_train);
  const auto b = train_driver_sensor(*dataset_, config_, short_train);
  EXPECT_EQ(a.model.params(), b.model.params());

  auto longer = short_train;
  longer.steps = 20;
  auto in_memory = a;
  train_driver_sensor(in_memory, *dataset_, longer);
  auto reloaded = from_checkpoint(to_checkpoint(a, short_train));
  EXPECT_EQ(reloaded.step, 10u);
  train_driver_sensor(reloaded, *dataset_, longer);
  EXPECT_EQ(reloaded.step, 20u);
  EXPECT_EQ(reloaded.model.params(), in_memory.model.params());
}

TEST_F(TrainedDriverSensor, StoppedAgentFollowsDataDirection)
{
  // Ahead/behind occupancy for stationary agents, from the mined ground truth and from the model.
  const int size = config_.grid_size;
  const int mid = size / 2;
  auto ahead_minus_behind = [&](auto && cell) {
    double d = 0;
    for (int r = mid - 2; r < mid + 2; ++r) {
      for (int dc = 3; dc < 12; ++dc) d += cell(r, mid + dc) - cell(r, mid - dc);
    }
    return d;
  };
  double data = 0;
  std::size_t stationary = 0;
  for (const auto & ex : *dataset_) {
    if (std::any_of(ex.history.begin(), ex.history.end(), [](double v) { return v != 0.0; })) continue;
    ++stationary;
    data += ahead_minus_behind([&](int r, int c) { return static_cast<double>(ex.grid[static_cast<std::size_t>(r * size + c)]); });
  }
  ASSERT_GT(stationary, 10u);
  const auto g = reconstruct_most_likely(state_->model, std::vector<double>(config_.history_width(), 0.0), {0, 0, 0});
  const double model = ahead_minus_behind([&](int r, int c) { return g.at(r, c); });
  EXPECT_GT(std::abs(data / static_cast<double>(stationary)), 0.2);
  EXPECT_EQ(model > 0, data > 0);
}
