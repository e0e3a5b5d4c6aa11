#include <algorithm>
#include <cmath>
#include <optional>

#include <gtest/gtest.h>

#include "fedlora/experiment.hpp"

using namespace fedlora;

namespace {

// One-layer, one-head client whose only adapter is (B, A).
ClientState client_with(std::size_t id, const Matrix& b, const Matrix& a, double alpha = 1.0) {
  LoraAdapter ad{{b.rows(), a.cols(), b.cols(), 1, alpha}, {{b, a}}};
  ClientState c;
  c.id = id;
  c.adapters = {ad};
  return c;
}

ClientState random_client(std::size_t id, std::uint64_t seed) {
  return client_with(id, seeded_gaussian(4, 2, 0, 1, derive_seed(seed, {1})),
                     seeded_gaussian(2, 3, 0, 1, derive_seed(seed, {2})));
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.mode = RunMode::All;
  c.seeds = {1};
  c.bench.d_in = 8;
  c.bench.train_per_task = 96;
  c.bench.test_per_task = 32;
  c.hidden = {8};
  c.rank = 2;
  c.pretrain_epochs = 2;
  c.stage1_rounds = 3;
  c.stage1_epochs = 2;
  c.stage2_rounds = 3;
  c.stage2_epochs = 2;
  c.stage3_epochs = 4;
  return c;
}

// Server state after one stage-1 aggregation on the small benchmark.
struct Fixture {
  ExperimentConfig cfg = small_config();
  Environment env = make_environment(cfg, 1);
  std::vector<ClientState> clients = initial_clients(env);
  ServerState server;

  Fixture() {
    std::vector<ClientState> trained;
    for (const auto& c : clients) trained.push_back(local_train_full(c, env.base.net, env.init_adapters, 3, 0.1));
    server = {env.base.net, aggregate_decomposed(trained).components, 0};
  }
};

const ParamGroup kAllGroups[] = {ParamGroup::Base,       ParamGroup::ADirection,  ParamGroup::AMagnitude,
                                 ParamGroup::BDirection, ParamGroup::BMagnitude, ParamGroup::BMagnitudeDelta};

}  // namespace

TEST(Aggregate, SingleClientIsIdentity) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ClientState c = random_client(0, s);
    const Aggregation agg = aggregate_decomposed(std::vector<ClientState>{c});
    const LoraAdapter& raw = std::get<LoraAdapter>(c.adapters[0]);
    const LoraAdapter back = recompose(agg.components[0]);
    EXPECT_LE(relative_frobenius_error(back.heads[0].b, raw.heads[0].b), 1e-10);
    EXPECT_LE(relative_frobenius_error(back.heads[0].a, raw.heads[0].a), 1e-10);
    EXPECT_EQ(agg.zero_direction_columns, 0u);
    EXPECT_EQ(aggregate_raw(std::vector<ClientState>{c})[0], raw);
  }
}

TEST(Aggregate, TwoClientMagnitudeMeanHandExample) {
  const Matrix a{{1, 0}, {0, 1}};
  const std::vector<ClientState> cs{client_with(0, Matrix{{1, 0}, {0, 2}}, a), client_with(1, Matrix{{3, 0}, {0, 4}}, a)};
  const Aggregation agg = aggregate_decomposed(cs);
  EXPECT_EQ(agg.components[0].heads[0].b.magnitude, (Vector{2, 3}));
  EXPECT_EQ(agg.components[0].heads[0].b.direction, (Matrix{{1, 0}, {0, 1}}));
}

TEST(Aggregate, PermutationInvariantBitExact) {
  std::vector<ClientState> cs;
  for (std::size_t i = 0; i < 5; ++i) cs.push_back(random_client(i, 100 + i));
  const Aggregation ref = aggregate_decomposed(cs);
  const auto ref_raw = aggregate_raw(cs);
  std::sort(cs.begin(), cs.end(), [](const auto& x, const auto& y) { return x.id > y.id; });
  std::rotate(cs.begin(), cs.begin() + 2, cs.end());
  EXPECT_EQ(aggregate_decomposed(cs).components, ref.components);
  EXPECT_EQ(aggregate_raw(cs), ref_raw);
}

TEST(Aggregate, DecomposedMeanDiffersFromRawMeanForNonParallelColumns) {
  const Matrix a{{1}};
  const std::vector<ClientState> cs{client_with(0, Matrix{{1}, {0}}, a), client_with(1, Matrix{{0}, {3}}, a)};
  const Matrix decomposed = recompose(aggregate_decomposed(cs).components[0]).heads[0].b;
  const Matrix raw = aggregate_raw(cs)[0].heads[0].b;
  EXPECT_EQ(raw, (Matrix{{0.5}, {1.5}}));
  // mean direction (1/2, 1/2) renormalised, mean magnitude 2
  EXPECT_NEAR(decomposed(0, 0), std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(decomposed(1, 0), std::sqrt(2.0), 1e-15);
  EXPECT_GT(relative_frobenius_error(decomposed, raw), 0.1);
}

TEST(Aggregate, CancellingColumnsTakeZeroConventionAndAreCounted) {
  const Matrix a{{1}, {1}};
  const std::vector<ClientState> cs{client_with(0, Matrix{{1, 1}, {0, 1}}, a),
                                    client_with(1, Matrix{{-1, 1}, {0, 1}}, a)};
  const Aggregation agg = aggregate_decomposed(cs);
  const auto& b = agg.components[0].heads[0].b;
  EXPECT_EQ(agg.zero_direction_columns, 1u);
  EXPECT_EQ(b.magnitude[0], 0.0);
  EXPECT_EQ(b.direction(0, 0), 0.0);
  EXPECT_EQ(b.direction(1, 0), 0.0);
  EXPECT_NEAR(b.magnitude[1], std::sqrt(2.0), 1e-15);
}

TEST(Aggregate, IdenticalClientsRecomposeToTheirAdapter) {
  const ClientState c = random_client(0, 9);
  std::vector<ClientState> cs;
  for (std::size_t i = 0; i < 7; ++i) {
    cs.push_back(c);
    cs.back().id = i;
  }
  const LoraAdapter back = recompose(aggregate_decomposed(cs).components[0]);
  const auto& raw = std::get<LoraAdapter>(c.adapters[0]);
  EXPECT_LE(relative_frobenius_error(back.heads[0].b, raw.heads[0].b), 1e-10);
  EXPECT_LE(relative_frobenius_error(back.heads[0].a, raw.heads[0].a), 1e-10);
}

TEST(Aggregate, WeightedMeanFollowsSampleCounts) {
  const Matrix a{{1}};
  std::vector<ClientState> cs{client_with(0, Matrix{{1}}, a), client_with(1, Matrix{{4}}, a)};
  cs[0].train.x = Matrix(3, 1);
  cs[0].train.y.assign(3, 0);
  cs[1].train.x = Matrix(1, 1);
  cs[1].train.y.assign(1, 0);
  EXPECT_DOUBLE_EQ(aggregate_decomposed(cs, true).components[0].heads[0].b.magnitude[0], 1.75);
  EXPECT_DOUBLE_EQ(aggregate_raw(cs, true)[0].heads[0].b(0, 0), 1.75);
}

TEST(Aggregate, ShapeMismatchAndEmptyInputRejected) {
  std::vector<ClientState> cs{random_client(0, 1),
                              client_with(1, seeded_gaussian(4, 3, 0, 1, 2), seeded_gaussian(3, 3, 0, 1, 3))};
  EXPECT_THROW(aggregate_decomposed(cs), DimensionError);
  EXPECT_THROW(aggregate_raw(cs), DimensionError);
  EXPECT_THROW(aggregate_decomposed(std::vector<ClientState>{}), std::invalid_argument);
}

TEST(Stages, DirectionRoundOnlyMovesDirectionOfA) {
  Fixture f;
  const ToyNet before = global_model(f.server);
  const StageResult res = direction_round(f.server, f.clients, 3, 5.0, {});
  const ToyNet after = global_model(res.server);
  for (ParamGroup g : kAllGroups) {
    if (g == ParamGroup::ADirection) {
      EXPECT_NE(digest(after, g), digest(before, g));
    } else {
      EXPECT_EQ(digest(after, g), digest(before, g)) << static_cast<int>(g);
    }
  }
  for (const auto& c : res.clients) {
    const ToyNet local = local_model(f.env.base.net, c);
    for (ParamGroup g : kAllGroups) {
      if (g != ParamGroup::ADirection) {
        EXPECT_EQ(digest(local, g), digest(before, g));
      }
    }
  }
  EXPECT_EQ(res.server.round, 1u);
}

TEST(Stages, PersonalisationOnlyMovesMagnitudeOfB) {
  Fixture f;
  const ToyNet global = global_model(f.server);
  const ClientState c = local_personalize(f.clients[0], f.server, 0.01, 5, 1.0);
  const ToyNet local = local_model(f.env.base.net, c);
  for (ParamGroup g : kAllGroups) {
    if (g == ParamGroup::BMagnitudeDelta) {
      EXPECT_NE(digest(local, g), digest(global, g));
    } else {
      EXPECT_EQ(digest(local, g), digest(global, g)) << static_cast<int>(g);
    }
  }
  EXPECT_GT(delta_m_norm(c), 0.0);
  EXPECT_EQ(c.history.size(), 5u);
}

TEST(Stages, ZeroRoundsLeaveServerUnchanged) {
  Fixture f;
  const ServerState s = global_direction_stage(f.server, f.clients, 0, 3, 5.0);
  EXPECT_EQ(s.components, f.server.components);
  EXPECT_EQ(s.round, f.server.round);
}

TEST(Stages, DirectionColumnsStayUnitNorm) {
  Fixture f;
  const ServerState s = global_direction_stage(f.server, f.clients, 2, 3, 5.0);
  for (const auto& layer : s.components)
    for (const auto& h : layer.heads) {
      const Vector n = column_norms(h.a.direction);
      for (std::size_t j = 0; j < n.size(); ++j) {
        if (h.a.magnitude[j] > 0) {
          EXPECT_NEAR(n[j], 1.0, 1e-12);
        }
      }
    }
}

TEST(Regulariser, DeltaMShrinksWithLambdaAndVanishesWhenHuge) {
  Fixture f;
  std::optional<double> prev;
  for (double lambda : {0.0, 0.01, 0.1, 1.0, 10.0}) {
    const double norm = delta_m_norm(local_personalize(f.clients[0], f.server, lambda, 40, 1.0));
    if (prev) {
      EXPECT_LE(norm, *prev) << "lambda " << lambda;
    }
    prev = norm;
  }
  EXPECT_LE(delta_m_norm(local_personalize(f.clients[0], f.server, 1e4, 40, 1.0)), 1e-3);
}

TEST(Runs, ReportHasOneBlockPerClientAndTask) {
  const ExperimentConfig cfg = small_config();
  for (Method m : {Method::Pipeline, Method::NonPipeline, Method::Baseline}) {
    const RunReport r = run_method(cfg, m, 1, make_environment(cfg, 1));
    EXPECT_TRUE(r.complete);
    EXPECT_EQ(r.method, to_string(m));
    ASSERT_EQ(r.clients.size(), cfg.bench.num_tasks * cfg.bench.clients_per_task);
    for (std::size_t i = 0; i < r.clients.size(); ++i) EXPECT_EQ(r.clients[i].client_id, i);
    EXPECT_EQ(r.task_local_accuracy.size(), cfg.bench.num_tasks);
    EXPECT_EQ(r.config_digest, config_digest(cfg));
  }
}

TEST(Runs, NonPipelineSharesStageOneAndSkipsStageTwo) {
  const ExperimentConfig cfg = small_config();
  const Environment env = make_environment(cfg, 1);
  const RunReport p = run_method(cfg, Method::Pipeline, 1, env);
  const RunReport n = run_method(cfg, Method::NonPipeline, 1, env);
  EXPECT_EQ(n.stage2_rounds, 0u);
  EXPECT_EQ(p.stage2_rounds, cfg.stage2_rounds);
  ASSERT_EQ(n.rounds.size(), cfg.stage1_rounds);
  ASSERT_EQ(p.rounds.size(), cfg.stage1_rounds + cfg.stage2_rounds);
  for (std::size_t r = 0; r < cfg.stage1_rounds; ++r) EXPECT_EQ(p.rounds[r], n.rounds[r]);
}

TEST(Runs, PipelineWithoutStageTwoEqualsNonPipelineResults) {
  ExperimentConfig cfg = small_config();
  cfg.stage2_rounds = 0;
  const Environment env = make_environment(cfg, 1);
  const RunReport p = run_method(cfg, Method::Pipeline, 1, env);
  const RunReport n = run_method(cfg, Method::NonPipeline, 1, env);
  EXPECT_EQ(p.clients, n.clients);
  EXPECT_EQ(p.global_accuracy, n.global_accuracy);
}

TEST(Runs, BaselineLocalMetricIsGlobalModelOnClientTestSet) {
  const ExperimentConfig cfg = small_config();
  const RunReport r = run_baseline_lora(cfg, 1);
  EXPECT_EQ(r.stage2_rounds, 0u);
  for (const auto& c : r.clients) {
    EXPECT_EQ(c.delta_m_norm, 0.0);
    EXPECT_TRUE(c.personalize_history.empty());
  }
}

TEST(Runs, ThreadCountDoesNotChangeResults) {
  ExperimentConfig serial = small_config();
  ExperimentConfig parallel = serial;
  parallel.threads = 4;
  for (Method m : {Method::Pipeline, Method::Baseline}) {
    MetricsTable a, b;
    a.add_run(run_method(serial, m, 2, make_environment(serial, 2)));
    b.add_run(run_method(parallel, m, 2, make_environment(parallel, 2)));
    EXPECT_EQ(a.str(), b.str());
  }
}

TEST(Runs, PartialParticipationSamplesDeterministically) {
  ExperimentConfig cfg = small_config();
  cfg.participation = 0.5;
  const RunReport a = run_pipeline(cfg, 3);
  const RunReport b = run_pipeline(cfg, 3);
  EXPECT_EQ(a, b);
  for (const auto& r : a.rounds) EXPECT_EQ(r.participants, 3u);
}

TEST(Runs, AdapterDropoutIsDeterministic) {
  ExperimentConfig cfg = small_config();
  cfg.adapter_dropout = 0.2;
  EXPECT_EQ(run_pipeline(cfg, 4), run_pipeline(cfg, 4));
  EXPECT_NE(run_pipeline(cfg, 4).global_accuracy, -1.0);
}

TEST(Runs, ResumeFromEveryCheckpointIsBitIdentical) {
  const ExperimentConfig cfg = small_config();
  const Environment env = make_environment(cfg, 1);
  for (Method m : {Method::Pipeline, Method::NonPipeline, Method::Baseline}) {
    std::vector<std::string> saved;
    RunHooks record;
    record.on_checkpoint = [&](const RunCheckpoint& ck) { saved.push_back(serialize(to_container(ck))); };
    const RunReport full = run_method(cfg, m, 1, env, record);
    ASSERT_GT(saved.size(), 1u);
    for (std::size_t k = 0; k + 1 < saved.size(); ++k) {
      const RunCheckpoint ck = checkpoint_from_container(deserialize(saved[k]));
      RunHooks resume;
      resume.resume = &ck;
      EXPECT_EQ(run_method(cfg, m, 1, env, resume), full) << to_string(m) << " checkpoint " << k;
    }
  }
}

TEST(Runs, StopAfterInterruptsAtRoundBoundary) {
  const ExperimentConfig cfg = small_config();
  const Environment env = make_environment(cfg, 1);
  std::optional<RunCheckpoint> last;
  RunHooks hooks;
  hooks.stop_after = 2;
  hooks.on_checkpoint = [&](const RunCheckpoint& ck) { last = ck; };
  EXPECT_THROW(run_method(cfg, Method::Pipeline, 1, env, hooks), Interrupted);
  ASSERT_TRUE(last);
  EXPECT_EQ(last->phase, Phase::Stage1);
  EXPECT_EQ(last->next_round, 2u);
}

TEST(Runs, ResumeRejectsForeignCheckpoint) {
  ExperimentConfig cfg = small_config();
  const Environment env = make_environment(cfg, 1);
  std::optional<RunCheckpoint> first;
  RunHooks hooks;
  hooks.on_checkpoint = [&](const RunCheckpoint& ck) {
    if (!first) first = ck;
  };
  run_method(cfg, Method::Pipeline, 1, env, hooks);
  RunHooks resume;
  resume.resume = &*first;
  EXPECT_THROW(run_method(cfg, Method::Baseline, 1, env, resume), std::invalid_argument);
  cfg.lambda = 0.5;
  EXPECT_THROW(run_method(cfg, Method::Pipeline, 1, env, resume), std::invalid_argument);
}

TEST(ParallelFor, VisitsEachIndexOnceAndRethrows) {
  std::vector<int> hits(17, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { ++hits[i]; });
  EXPECT_EQ(std::count(hits.begin(), hits.end(), 1), 17);
  EXPECT_THROW(parallel_for(5, 3, [](std::size_t i) {
                 if (i == 3) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}
