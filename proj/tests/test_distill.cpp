#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mlvc/distill.hpp"
#include "mlvc/model.hpp"
#include "mlvc/rng.hpp"
#include "oracles.hpp"

namespace {

std::vector<mlvc::Example> random_examples(std::size_t n, int dim, int labels, std::uint64_t seed) {
  mlvc::Rng rng(mlvc::Seed{seed});
  std::vector<mlvc::Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> f(static_cast<std::size_t>(dim));
    for (auto& v : f) v = rng.normal();
    out.push_back({"v" + std::to_string(i), std::move(f),
                   {static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(labels)))}});
  }
  return out;
}

mlvc::PredictionSet predictions_from(const mlvc::ModelParams& m,
                                     const std::vector<mlvc::Example>& set,
                                     const std::string& name) {
  return mlvc::predict_set(m, set, name);
}

}  // namespace

TEST_CASE("the blended loss has its hand computed value") {
  const auto r = mlvc::distill_loss({0.5}, {0.8}, {1.0}, 0.5);
  REQUIRE(r.value == Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("pure distillation ignores hard targets entirely") {
  const mlvc::ScoreVector p{0.3, 0.6, 0.9};
  const mlvc::ScoreVector teacher{0.2, 0.5, 0.7};
  const auto zeros = mlvc::distill_loss(p, teacher, {0.0, 0.0, 0.0}, 1.0);
  const auto ones = mlvc::distill_loss(p, teacher, {1.0, 1.0, 1.0}, 1.0);
  REQUIRE(zeros.value == ones.value);
  REQUIRE(zeros.grad == ones.grad);
  const auto plain = mlvc::bce_loss(p, std::vector<double>(teacher.begin(), teacher.end()));
  REQUIRE(zeros.value == plain.value);
  REQUIRE(zeros.grad == plain.grad);
}

TEST_CASE("a zero blend is ordinary hard target training") {
  const mlvc::ScoreVector p{0.4, 0.7};
  const std::vector<double> hard{1.0, 0.0};
  const auto r = mlvc::distill_loss(p, {0.9, 0.1}, hard, 0.0);
  const auto plain = mlvc::bce_loss(p, hard);
  REQUIRE(r.value == plain.value);
  REQUIRE(r.grad == plain.grad);
}

TEST_CASE("the blend is an exact convex combination of both losses") {
  mlvc::Rng rng(mlvc::Seed{60});
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t c = 5;
    mlvc::ScoreVector p(c), teacher(c);
    std::vector<double> hard(c);
    for (auto& v : p) v = 0.05 + 0.9 * rng.uniform01();
    for (auto& v : teacher) v = rng.uniform01();
    for (auto& v : hard) v = rng.uniform_below(2) ? 1.0 : 0.0;
    const double lambda = rng.uniform01();

    const auto blended = mlvc::distill_loss(p, teacher, hard, lambda);
    const auto soft = mlvc::bce_loss(p, std::vector<double>(teacher.begin(), teacher.end()));
    const auto hard_part = mlvc::bce_loss(p, hard);
    REQUIRE(blended.value ==
            Catch::Approx(lambda * soft.value + (1.0 - lambda) * hard_part.value).margin(1e-12));
    for (std::size_t i = 0; i < c; ++i)
      REQUIRE(blended.grad[i] ==
              Catch::Approx(lambda * soft.grad[i] + (1.0 - lambda) * hard_part.grad[i])
                  .margin(1e-12));
  }
}

TEST_CASE("the blended loss gradient matches finite differences") {
  mlvc::Rng rng(mlvc::Seed{61});
  const std::size_t c = 4;
  std::vector<double> p(c), teacher_v(c), hard(c);
  for (auto& v : p) v = 0.1 + 0.8 * rng.uniform01();
  for (auto& v : teacher_v) v = rng.uniform01();
  for (auto& v : hard) v = rng.uniform_below(2) ? 1.0 : 0.0;
  const double lambda = 0.35;

  const auto r = mlvc::distill_loss(mlvc::ScoreVector(p.begin(), p.end()),
                                    mlvc::ScoreVector(teacher_v.begin(), teacher_v.end()), hard,
                                    lambda);
  const auto f = [&](const std::vector<double>& v) {
    return mlvc::distill_loss(mlvc::ScoreVector(v.begin(), v.end()),
                              mlvc::ScoreVector(teacher_v.begin(), teacher_v.end()), hard, lambda)
        .value;
  };
  REQUIRE(oracle::max_rel_err(r.grad, oracle::central_diff(f, p)) < 1e-6);
}

TEST_CASE("pure distillation is minimized where the student meets the teacher") {
  const mlvc::ScoreVector teacher{0.2, 0.5, 0.85};
  const auto at_teacher = mlvc::distill_loss(teacher, teacher, {0.0, 0.0, 0.0}, 1.0);
  for (double g : at_teacher.grad) REQUIRE(g == 0.0);
  mlvc::Rng rng(mlvc::Seed{62});
  for (int trial = 0; trial < 20; ++trial) {
    mlvc::ScoreVector p(teacher.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      p[i] = std::clamp(teacher[i] + 0.2 * rng.normal(), 0.01, 0.99);
    const auto perturbed = mlvc::distill_loss(p, teacher, {0.0, 0.0, 0.0}, 1.0);
    REQUIRE(perturbed.value >= at_teacher.value);
  }
}

TEST_CASE("blended loss rejects bad shapes and lambdas") {
  REQUIRE_THROWS(mlvc::distill_loss({0.5, 0.5}, {0.5}, {1.0, 0.0}, 0.5));
  REQUIRE_THROWS_AS(mlvc::distill_loss({0.5}, {0.5}, {1.0}, 1.5), mlvc::ConfigError);
  REQUIRE_THROWS_AS(mlvc::distill_loss({0.5}, {0.5}, {1.0}, -0.1), mlvc::ConfigError);
}

TEST_CASE("distill configs reject bad values and unknown keys") {
  mlvc::DistillConfig cfg;
  cfg.lambda = 1.5;
  REQUIRE_THROWS_AS(cfg.validate(), mlvc::ConfigError);
  cfg = {};
  cfg.budget_bytes = 0;
  REQUIRE_THROWS_AS(cfg.validate(), mlvc::ConfigError);
  cfg = {};
  cfg.bytes_per_param = 3;
  REQUIRE_THROWS_AS(cfg.validate(), mlvc::ConfigError);
  REQUIRE_THROWS_AS(mlvc::DistillConfig::from_json({{"lamda", 0.5}}), mlvc::ConfigError);

  mlvc::DistillConfig full;
  full.lambda = 0.25;
  full.hidden = 12;
  full.budget_bytes = 4096;
  const auto round = mlvc::DistillConfig::from_json(full.to_json());
  REQUIRE(round.lambda == 0.25);
  REQUIRE(round.hidden == 12);
  REQUIRE(round.budget_bytes == 4096);
}

TEST_CASE("an over budget student is refused before any training") {
  const auto train_set = random_examples(50, 4, 3, 70);
  mlvc::PredictionSet teacher;
  teacher.model_name = "teacher";
  for (const auto& e : train_set) {
    teacher.ids.push_back(e.id);
    teacher.scores.push_back(mlvc::ScoreVector(3, 0.5));
  }

  mlvc::DistillConfig cfg;
  cfg.student_type = mlvc::ModelType::gated_mlp;
  cfg.hidden = 64;
  cfg.budget_bytes = 100;  // far below any real size
  cfg.train.max_steps = 1'000'000;  // would hang if training started
  try {
    mlvc::distill(teacher, train_set, train_set, cfg);
    FAIL("expected a budget error");
  } catch (const mlvc::BudgetError& err) {
    const std::string msg = err.what();
    REQUIRE(msg.find("drop at least") != std::string::npos);
    REQUIRE(msg.find("100") != std::string::npos);
  }
}

TEST_CASE("a missing teacher row is reported by example id") {
  const auto train_set = random_examples(10, 3, 2, 71);
  mlvc::PredictionSet teacher;
  teacher.model_name = "teacher";
  for (std::size_t i = 0; i + 1 < train_set.size(); ++i) {  // drop the last row
    teacher.ids.push_back(train_set[i].id);
    teacher.scores.push_back(mlvc::ScoreVector(2, 0.5));
  }
  mlvc::DistillConfig cfg;
  cfg.student_type = mlvc::ModelType::logistic;
  cfg.train.max_steps = 5;
  REQUIRE_THROWS_WITH(mlvc::distill(teacher, train_set, train_set, cfg),
                      Catch::Matchers::ContainsSubstring("v9"));
}

TEST_CASE("teacher rows align by id regardless of their order") {
  const auto train_set = random_examples(80, 3, 2, 72);

  // teacher scores are a fixed function of the example index
  auto scored = [](std::size_t i) {
    return mlvc::ScoreVector{0.1 + 0.008 * static_cast<double>(i),
                             0.9 - 0.008 * static_cast<double>(i)};
  };
  mlvc::PredictionSet forward, reversed;
  forward.model_name = reversed.model_name = "teacher";
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    forward.ids.push_back(train_set[i].id);
    forward.scores.push_back(scored(i));
  }
  for (std::size_t i = train_set.size(); i-- > 0;) {
    reversed.ids.push_back(train_set[i].id);
    reversed.scores.push_back(scored(i));
  }

  mlvc::DistillConfig cfg;
  cfg.student_type = mlvc::ModelType::logistic;
  cfg.lambda = 1.0;
  cfg.train.base_lr = 0.05;
  cfg.train.max_steps = 40;
  cfg.train.eval_every_steps = 20;
  cfg.train.seed = mlvc::Seed{73};
  const auto a = mlvc::distill(forward, train_set, train_set, cfg);
  const auto b = mlvc::distill(reversed, train_set, train_set, cfg);
  REQUIRE(mlvc::flatten_params(a.student) == mlvc::flatten_params(b.student));
}

TEST_CASE("pure distillation trains identically under scrambled hard labels") {
  auto train_set = random_examples(100, 4, 3, 74);
  const auto val_set = random_examples(40, 4, 3, 75);

  auto teacher_model = mlvc::make_model(mlvc::ModelType::logistic, 4, 3);
  mlvc::Rng trng(mlvc::Seed{76});
  mlvc::init_params(teacher_model, trng);
  const auto teacher = predictions_from(teacher_model, train_set, "teacher");

  mlvc::DistillConfig cfg;
  cfg.student_type = mlvc::ModelType::logistic;
  cfg.lambda = 1.0;
  cfg.train.base_lr = 0.02;
  cfg.train.max_steps = 60;
  cfg.train.eval_every_steps = 30;
  cfg.train.seed = mlvc::Seed{77};

  const auto honest = mlvc::distill(teacher, train_set, val_set, cfg);
  for (auto& e : train_set) e.labels = {static_cast<int>(e.id.size()) % 3};  // nonsense labels
  const auto scrambled = mlvc::distill(teacher, train_set, val_set, cfg);
  REQUIRE(mlvc::flatten_params(honest.student) == mlvc::flatten_params(scrambled.student));
  REQUIRE(honest.report.final_val_gap == scrambled.report.final_val_gap);
}

TEST_CASE("an expressive student reaches the teacher's entropy floor") {
  const auto train_set = random_examples(200, 3, 2, 78);

  auto teacher_model = mlvc::make_model(mlvc::ModelType::logistic, 3, 2);
  mlvc::Rng trng(mlvc::Seed{79});
  mlvc::init_params(teacher_model, trng);
  const auto teacher = predictions_from(teacher_model, train_set, "teacher");

  mlvc::DistillConfig cfg;
  cfg.student_type = mlvc::ModelType::gated_mlp;
  cfg.hidden = 16;
  cfg.lambda = 1.0;
  cfg.train.base_lr = 0.01;
  cfg.train.lr_decay_every_examples = 1'000'000;
  cfg.train.max_steps = 1200;
  cfg.train.eval_every_steps = 400;
  cfg.train.patience = 10;
  cfg.train.seed = mlvc::Seed{80};
  const auto result = mlvc::distill(teacher, train_set, train_set, cfg);

  double ce = 0.0, entropy = 0.0;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const auto p = mlvc::forward(result.student, train_set[i].features);
    const auto soft = std::vector<double>(teacher.scores[i].begin(), teacher.scores[i].end());
    ce += mlvc::bce_loss(p, soft).value;
    entropy += mlvc::bce_loss(teacher.scores[i], soft).value;  // CE(q, q) = H(q)
  }
  const double per_label = (ce - entropy) / (static_cast<double>(train_set.size()) * 2.0);
  REQUIRE(per_label >= -1e-9);  // entropy is the floor
  REQUIRE(per_label < 0.05);
}

TEST_CASE("distillation reports budget arithmetic and teacher context") {
  const auto train_set = random_examples(60, 3, 2, 81);
  auto teacher_model = mlvc::make_model(mlvc::ModelType::logistic, 3, 2);
  mlvc::Rng trng(mlvc::Seed{82});
  mlvc::init_params(teacher_model, trng);
  const auto teacher = predictions_from(teacher_model, train_set, "teacher");

  mlvc::DistillConfig cfg;
  cfg.student_type = mlvc::ModelType::logistic;
  cfg.lambda = 0.5;
  cfg.budget_bytes = 4096;
  cfg.train.max_steps = 30;
  cfg.train.eval_every_steps = 15;
  cfg.train.seed = mlvc::Seed{83};
  const auto result = mlvc::distill(teacher, train_set, train_set, cfg, 0.91);

  const auto size = mlvc::param_size_bytes(result.student, cfg.bytes_per_param);
  REQUIRE(result.report.student_size_bytes == size);
  REQUIRE(result.report.budget_bytes == 4096);
  REQUIRE(result.report.budget_margin_bytes == 4096 - size);
  REQUIRE(result.report.lambda == 0.5);
  REQUIRE(result.report.teacher_val_gap.has_value());
  REQUIRE(*result.report.teacher_val_gap == 0.91);
  REQUIRE_FALSE(result.log.evals.empty());
  REQUIRE(result.report.final_val_gap == result.log.best_val_gap);
  REQUIRE(result.student.provenance.find("lambda") != std::string::npos);

  const auto j = result.report.to_json();
  REQUIRE(j.at("teacher_val_gap").get<double>() == 0.91);
}
