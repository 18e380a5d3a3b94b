// Acceptance gate. Each test covers one numbered criterion and prints exactly
// one "[criterion N] PASS|FAIL — ..." line; the suite as a whole doubles as
// the release checklist. Criteria 5 and 9 drive the installed CLI binary
// (path supplied as argv[1]); everything else runs in-process.

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mklab/analysis.hpp"
#include "mklab/attention.hpp"
#include "mklab/dataset.hpp"
#include "mklab/train.hpp"
#include "mklab/vit.hpp"

namespace {

namespace fs = std::filesystem;
using mklab::KeyKind;
using mklab::KeyVariantSpec;
using mklab::ModelConfig;
using Td = mklab::Tensor<double>;

std::string g_cli;       // mklab binary under test
fs::path g_tmp;          // scratch directory, removed at exit

void report(int n, const std::string& what) {
  std::cout << "[criterion " << n << "] " << (::testing::Test::HasFailure() ? "FAIL" : "PASS") << " — " << what
            << std::endl;
}

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  CliResult r;
  const std::string cmd = g_cli + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  ASSERT_TRUE(out.good()) << p;
  out << text;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXPECT_TRUE(in.good()) << "missing file " << p;
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Variant rows in published-table order; H is the chart count used there.
struct TableVariant {
  const char* label;
  KeyVariantSpec spec;
};
std::vector<TableVariant> table_variants(std::size_t h) {
  return {{"baseline", {KeyKind::Baseline, 1, false}},
          {"spatialk", {KeyKind::SpatialK, h, false}},
          {"kua", {KeyKind::KUA, h, true}},
          {"simplek", {KeyKind::SimpleK, h, false}},
          {"vanillak", {KeyKind::VanillaK, h, true}}};
}

ModelConfig with_variant(ModelConfig base, KeyVariantSpec v) {
  base.variant = v;
  return base;
}

mklab::TrainConfig smoke_train_config() {
  mklab::TrainConfig t;
  t.total_epochs = 63;
  t.batch_size = 32;
  t.lr_max = 3e-3;
  t.lr_min = 1e-5;
  t.warmup_steps = 20;
  t.seed = 7;
  t.max_steps = 500;
  t.target_top1 = 0.95;
  return t;
}

const char* kMicroGradcheckConfig = R"({
  "model": {
    "image_size": 8, "patch_size": 4, "channels": 1,
    "dim": 16, "depth": 1, "heads": 2, "mlp_dim": 32, "num_classes": 4,
    "variant": { "kind": "vanillak", "charts": 2, "cb": true }
  },
  "train": { "seed": 3 },
  "dataset": { "source": "synthetic", "samples_per_class": 2, "seed": 5 },
  "output_dir": "out/gradcheck"
}
)";

// ---------------------------------------------------------------------------

TEST(Criterion01, ParamTableMainRows) {
  const long long want_s[5] = {22, 52, 52, 38, 38};
  const long long want_b[5] = {87, 197, 197, 140, 140};
  const auto variants = table_variants(8);
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto s = mklab::count_params(with_variant(ModelConfig::vit_s16(), variants[i].spec));
    const auto b = mklab::count_params(with_variant(ModelConfig::vit_b16(), variants[i].spec));
    EXPECT_EQ(mklab::round_params_M(s.total_params()), want_s[i]) << "vit-s16 " << variants[i].label;
    EXPECT_EQ(mklab::round_params_M(b.total_params()), want_b[i]) << "vit-b16 " << variants[i].label;
  }
  report(1, "parameter totals round to 22/52/52/38/38 M (vit-s16) and 87/197/197/140/140 M (vit-b16) at H=8");
}

TEST(Criterion02, ParamChartSweepRows) {
  const auto h4 = mklab::count_params(with_variant(ModelConfig::vit_b16(), {KeyKind::VanillaK, 4, false}));
  const auto h8 = mklab::count_params(with_variant(ModelConfig::vit_b16(), {KeyKind::VanillaK, 8, false}));
  EXPECT_EQ(mklab::round_params_M(h4.total_params()), 110);
  EXPECT_EQ(mklab::round_params_M(h8.total_params()), 140);
  report(2, "vit-b16 vanillak without broadcasting rounds to 110 M at H=4 and 140 M at H=8");
}

TEST(Criterion03, FlopTableWithinThreePercent) {
  const double want_s[5] = {4.7, 11.3, 11.3, 8.6, 8.6};
  const double want_b[5] = {17.7, 41.5, 41.5, 30.4, 30.4};
  const auto variants = table_variants(8);
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const double got_s =
        mklab::count_flops(with_variant(ModelConfig::vit_s16(), variants[i].spec), {1, 3, 224, 224}).flops_G();
    const double got_b =
        mklab::count_flops(with_variant(ModelConfig::vit_b16(), variants[i].spec), {1, 3, 224, 224}).flops_G();
    EXPECT_NEAR(got_s, want_s[i], 0.03 * want_s[i]) << "vit-s16 " << variants[i].label;
    EXPECT_NEAR(got_b, want_b[i], 0.03 * want_b[i]) << "vit-b16 " << variants[i].label;
  }
  report(3, "multiply-accumulate counts at 224x224 fall within 3% of 4.7/11.3/11.3/8.6/8.6 G and 17.7/41.5/41.5/30.4/30.4 G");
}

TEST(Criterion04, CounterMatchesConstructedModels) {
  std::size_t models = 0;
  for (const auto& preset : {ModelConfig::vit_s16(), ModelConfig::vit_b16(), ModelConfig::tiny()}) {
    for (const KeyKind kind :
         {KeyKind::Baseline, KeyKind::SpatialK, KeyKind::KUA, KeyKind::SimpleK, KeyKind::VanillaK}) {
      for (const std::size_t h : {1u, 2u, 4u, 8u}) {
        const auto cfg = with_variant(preset, {kind, h, kind == KeyKind::KUA || kind == KeyKind::VanillaK});
        mklab::VitModel<float> model(cfg, 0, /*zero_init=*/true);
        EXPECT_EQ(mklab::count_params(cfg).total_params(), model.param_count())
            << mklab::kind_name(kind) << " H=" << h << " dim=" << cfg.dim;
        ++models;
      }
    }
  }
  EXPECT_EQ(models, 60u);
  report(4, "closed-form parameter counts equal constructed-model element counts for 3 presets x 5 variants x H in {1,2,4,8}");
}

TEST(Criterion05, GradientSuiteViaCli) {
  const fs::path cfg = g_tmp / "gradcheck_micro.json";
  write_file(cfg, kMicroGradcheckConfig);
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run_cli("gradcheck --config " + cfg.string());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(res.exit_code, 0) << res.output;
  for (const char* kind : {"baseline", "spatialk", "kua", "simplek", "vanillak"}) {
    EXPECT_NE(res.output.find(std::string("variant ") + kind + ": PASS"), std::string::npos) << kind;
  }
  // Every dedicated key-path tensor must appear among the checked parameters.
  for (const char* tensor : {"attn.W_expand", "attn.gamma", "attn.mix", "attn.to_out", "attn.gamma_prime"}) {
    EXPECT_NE(res.output.find(tensor), std::string::npos) << tensor;
  }
  EXPECT_LT(secs, 120.0);
  std::ostringstream what;
  what << "finite-difference gradients pass at rel err <= 1e-4 for every parameter of all five variants in "
       << std::fixed << std::setprecision(1) << secs << " s";
  report(5, what.str());
}

TEST(Criterion06, DegenerateEquivalences) {
  const std::size_t D = 4, N = 3;
  auto eye = [](std::size_t n) {
    auto t = Td::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
  };
  auto grouped_identity = [](std::size_t charts, std::size_t n) {
    auto t = Td::zeros({charts * n, n});
    for (std::size_t i = 0; i < charts * n; ++i) t.data()[i * n + i % n] = 1.0;
    return t;
  };
  for (int seed = 0; seed < 10; ++seed) {
    mklab::Rng rng(1000 + seed);
    mklab::AttentionParams<double> base({KeyKind::Baseline, 1, false}, D, N, rng);
    auto x = Td::randn({N, D}, rng);
    const auto want = mklab::key_forward(x, base);

    mklab::AttentionParams<double> sp({KeyKind::SpatialK, 1, false}, D, N, rng);
    sp.W_expand = Td::from(base.W_k.shape(), base.W_k.data());
    sp.gamma = Td::ones({D});
    sp.mix = grouped_identity(1, N);
    sp.to_out = eye(D);
    const auto got_sp = mklab::key_forward(x, sp);

    mklab::AttentionParams<double> van({KeyKind::VanillaK, 2, false}, D, N, rng);
    van.W_expand = mklab::concat(base.W_k, base.W_k, 0);
    van.gamma = Td::ones({2 * D});
    van.mix = grouped_identity(2, N);
    const auto got_van = mklab::key_forward(x, van);

    mklab::AttentionParams<double> sim({KeyKind::SimpleK, 1, false}, D, N, rng);
    sim.W_expand = Td::from(base.W_k.shape(), base.W_k.data());
    sim.gamma = Td::ones({D});
    sim.mix = eye(N);
    const auto got_sim = mklab::key_forward(x, sim);

    for (std::size_t i = 0; i < want.numel(); ++i) {
      EXPECT_NEAR(got_sp.data()[i], want.data()[i], 1e-6) << "spatialk seed " << seed;
      EXPECT_NEAR(got_van.data()[i], want.data()[i], 1e-6) << "vanillak seed " << seed;
      EXPECT_NEAR(got_sim.data()[i], want.data()[i], 1e-6) << "simplek seed " << seed;
    }
  }
  report(6, "spatialk/vanillak/simplek identity configurations reproduce the baseline key within 1e-6 over 10 seeds");
}

TEST(Criterion07, InvariantSuite) {
  // (a) attention rows and rollout matrices are row-stochastic (64-bit model).
  for (const auto& tv : table_variants(2)) {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.variant = tv.spec;
    mklab::VitModel<double> model(cfg, 17);
    auto data = mklab::synth_dataset<double>(cfg.num_classes, 2, cfg.image_size, 23, cfg.channels);
    const auto images = mklab::gather_images(data, {0});
    std::vector<Td> records;
    {
      mklab::NoGradGuard ng;
      model.forward(images, &records);
    }
    ASSERT_EQ(records.size(), cfg.depth);
    std::vector<Td> sample;
    for (const auto& r : records) {
      EXPECT_LE(mklab::max_row_sum_deviation(r), 1e-6) << tv.label;
      const auto s = r.shape();
      sample.push_back(r.reshape({s[1], s[2], s[3]}));
    }
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto joint = mklab::attention_rollout(sample, h, cfg.depth);
      EXPECT_LE(mklab::max_row_sum_deviation(joint), 1e-6) << tv.label << " head " << h;
    }
  }

  // (b) baseline attention is permutation-equivariant.
  {
    mklab::Rng rng(0);
    const std::size_t D = 4, N = 4;
    mklab::AttentionParams<double> p({KeyKind::Baseline, 1, false}, D, N, rng);
    auto x = Td::randn({N, D}, rng);
    std::vector<double> rev(N * D);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) rev[n * D + d] = x.data()[(N - 1 - n) * D + d];
    const auto y = mklab::mhsa_forward(x, p, 2);
    const auto yr = mklab::mhsa_forward(Td::from({N, D}, rev), p, 2);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < D; ++d) EXPECT_NEAR(yr.data()[n * D + d], y.data()[(N - 1 - n) * D + d], 1e-9);
  }

  // (c) context broadcasting with gamma' = 0 halves the key exactly.
  {
    mklab::Rng rng(5);
    auto k = Td::randn({6, 3}, rng);
    const auto y = mklab::context_broadcast(k, Td::zeros({3}));
    for (std::size_t i = 0; i < k.numel(); ++i) EXPECT_EQ(y.data()[i], 0.5 * k.data()[i]);
  }

  // (d) softmax is invariant to a constant shift of its inputs.
  {
    mklab::Rng rng(9);
    auto x = Td::randn({5, 7}, rng);
    const auto a = mklab::softmax(x, 1);
    const auto b = mklab::softmax(mklab::add_scalar(x, 17.25), 1);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-9);
  }

  report(7, "attention and rollout rows stochastic within 1e-6; baseline permutation-equivariant within 1e-9; "
            "gamma'=0 broadcasting halves K exactly; softmax shift-invariant within 1e-9");
}

TEST(Criterion08, SmokeTrainingAllVariants) {
  std::size_t worst_steps = 0;
  double worst_wall = 0.0;
  for (const auto& tv : table_variants(2)) {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.variant = tv.spec;
    const auto train_cfg = smoke_train_config();
    auto data = mklab::synth_dataset<float>(cfg.num_classes, 64, cfg.image_size, 1, cfg.channels);

    const auto t0 = std::chrono::steady_clock::now();
    mklab::VitModel<float> model(cfg, train_cfg.seed);
    const auto res = mklab::train(model, data, train_cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    EXPECT_TRUE(res.reached_target) << tv.label;
    EXPECT_GE(res.best_top1, 0.95) << tv.label;
    EXPECT_LE(res.steps, 500u) << tv.label;
    EXPECT_LT(wall, 300.0) << tv.label;
    worst_steps = std::max(worst_steps, res.steps);
    worst_wall = std::max(worst_wall, wall);

    // Bit-identical rerun: same seed, fresh model and data.
    mklab::VitModel<float> model2(cfg, train_cfg.seed);
    auto data2 = mklab::synth_dataset<float>(cfg.num_classes, 64, cfg.image_size, 1, cfg.channels);
    const auto res2 = mklab::train(model2, data2, train_cfg);
    ASSERT_EQ(res2.history.size(), res.history.size()) << tv.label;
    for (std::size_t e = 0; e < res.history.size(); ++e) {
      EXPECT_EQ(std::memcmp(&res.history[e], &res2.history[e], sizeof(res.history[e])), 0)
          << tv.label << " epoch " << e;
    }
    auto p1 = model.named_params();
    auto p2 = model2.named_params();
    ASSERT_EQ(p1.size(), p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
      const auto& a = p1[i].second->data();
      const auto& b = p2[i].second->data();
      ASSERT_EQ(a.size(), b.size());
      EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0) << tv.label << " " << p1[i].first;
    }
  }
  std::ostringstream what;
  what << "all five variants reach >=95% train top-1 on the synthetic 4-class set (worst: " << worst_steps
       << " of 500 steps, " << std::fixed << std::setprecision(1) << worst_wall
       << " s) and reruns are bit-identical";
  report(8, what.str());
}

TEST(Criterion09, CliTrainDeterminism) {
  const std::string cfg_text = R"({
  "model": { "preset": "tiny", "variant": { "kind": "kua", "charts": 2, "cb": true } },
  "train": { "total_epochs": 5, "batch_size": 32, "lr_max": 0.003, "lr_min": 1e-05,
             "warmup_steps": 4, "seed": 13, "max_steps": 10 },
  "dataset": { "source": "synthetic", "samples_per_class": 16, "seed": 2 },
  "output_dir": "out/determinism"
}
)";
  const fs::path cfg = g_tmp / "determinism.json";
  write_file(cfg, cfg_text);
  // Identical config means identical output_dir too (checkpoints embed their
  // config), so run twice into the same directory and snapshot in between.
  const fs::path out = g_tmp / "det_run", snap = g_tmp / "det_first";
  const char* names[] = {"best.ckpt", "last.ckpt", "metrics.csv"};
  const auto a = run_cli("train --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(a.exit_code, 0) << a.output;
  fs::create_directories(snap);
  for (const char* name : names) fs::copy_file(out / name, snap / name, fs::copy_options::overwrite_existing);
  const auto b = run_cli("train --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(b.exit_code, 0) << b.output;
  for (const char* name : names) {
    const auto first = read_bytes(snap / name);
    const auto second = read_bytes(out / name);
    EXPECT_FALSE(first.empty()) << name;
    EXPECT_EQ(first, second) << name;
  }
  report(9, "two cli train runs with identical config and seed produce byte-identical checkpoints and metrics CSV");
}

TEST(Criterion10, ScopeExclusions) {
  report(10,
         "stated exclusions: large-scale ImageNet-1K accuracy results (e.g. 80.31% top-1 for the largest vanillak "
         "model), qualitative attention-map comparisons on ImageNet-trained weights, and COCO detection/segmentation "
         "transfer results are not reproducible at desk scale and are replaced by criteria 1-9");
}

}  // namespace

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc < 2) {
    std::cerr << "usage: acceptance_test <path-to-mklab-cli>\n";
    return 2;
  }
  g_cli = argv[1];
  g_tmp = fs::temp_directory_path() / ("mklab_accept_" + std::to_string(::getpid()));
  fs::create_directories(g_tmp);
  const int rc = RUN_ALL_TESTS();
  std::error_code ec;
  fs::remove_all(g_tmp, ec);
  return rc;
}
