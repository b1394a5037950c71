#include "fgn/cli.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "fgn/attacks.hpp"
#include "fgn/eval.hpp"
#include "fgn/model_io.hpp"
#include "fgn/train.hpp"

namespace fgn {
namespace {

namespace fs = std::filesystem;

const std::set<std::string> kKeys{"a", "b", "list", "flag"};

TEST(Config, ParsesCommentsAndWhitespace) {
  std::istringstream in("# header\n\n a = 1.5 # trailing\nlist=1, 2,3\nflag = yes\nb =\n");
  const Config c = Config::parse(in, kKeys);
  EXPECT_EQ(c.real("a", 0), 1.5);
  EXPECT_EQ(c.line("a"), 3u);
  EXPECT_EQ(c.counts("list", {}), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_TRUE(c.flag("flag", false));
  EXPECT_TRUE(c.counts("b", {7}).empty());
  EXPECT_EQ(c.real("missing", 2.5), 2.5);
}

std::size_t error_line(const std::string& text) {
  std::istringstream in(text);
  try {
    Config::parse(in, kKeys);
  } catch (const ConfigError& e) {
    return e.line();
  }
  return 0;
}

TEST(Config, ErrorsNameTheLine) {
  EXPECT_EQ(error_line("a=1\n\ntypo=2\n"), 3u);
  EXPECT_EQ(error_line("a=1\nno equals sign\n"), 2u);
  EXPECT_EQ(error_line("a=1\n# c\na=2\n"), 3u);
  EXPECT_EQ(error_line("=3\n"), 1u);
}

TEST(Config, BadValuesNameTheLine) {
  std::istringstream in("a=abc\nb=-3\nlist=1,x\nflag=maybe\n");
  const Config c = Config::parse(in, kKeys);
  auto line_of = [](auto&& fn) -> std::size_t {
    try {
      fn();
    } catch (const ConfigError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of([&] { c.real("a", 0); }), 1u);
  EXPECT_EQ(line_of([&] { c.count("b", 0); }), 2u);
  EXPECT_EQ(line_of([&] { c.reals("list", {}); }), 3u);
  EXPECT_EQ(line_of([&] { c.flag("flag", false); }), 4u);
  EXPECT_THROW(c.text("missing"), ConfigError);
}

TEST(Config, InfAndNanRejected) {
  std::istringstream in("a=inf\nb=nan\n");
  const Config c = Config::parse(in, kKeys);
  EXPECT_THROW(c.real("a", 0), ConfigError);
  EXPECT_THROW(c.real("b", 0), ConfigError);
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("fgn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_config(const std::string& name, const std::string& text) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "fgn");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return run_cli(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  // Small classical rings classifier trained through the CLI.
  fs::path train_rings(const std::string& sub, const std::string& extra = "") {
    const auto cfg = write_config(sub + ".cfg",
                                  "data = toy-rings\ncount = 300\nhidden = 16\nactivation = tanh\n"
                                  "optimizer = adam\nlr = 0.02\nepochs = 40\nbatch_size = 32\n" +
                                      extra);
    EXPECT_EQ(run({"--config", cfg.string(), "--seed", "3", "--out", (dir_ / sub).string(), "train"}), kExitOk)
        << err_.str();
    return dir_ / sub / "model.fgnn";
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

TEST_F(CliTest, UnknownKeyIsConfigErrorWithLine) {
  const auto cfg = write_config("bad.cfg", "data = toy-rings\n\nepochz = 3\n");
  EXPECT_EQ(run({"--config", cfg.string(), "train"}), kExitConfigError);
  EXPECT_NE(err_.str().find("line 3"), std::string::npos) << err_.str();
  EXPECT_NE(err_.str().find("epochz"), std::string::npos);
}

TEST_F(CliTest, KeysAreScopedToTheCommand) {
  const auto cfg = write_config("c.cfg", "model = m.fgnn\nepsilons = 0.1\n");
  EXPECT_EQ(run({"--config", cfg.string(), "convert"}), kExitConfigError);
  EXPECT_NE(err_.str().find("line 2"), std::string::npos);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run({"train"}), kExitConfigError);
  EXPECT_EQ(run({"--config", "x.cfg"}), kExitConfigError);
  EXPECT_EQ(run({"--config", (dir_ / "missing.cfg").string(), "train"}), kExitConfigError);
  const auto cfg = write_config("m.cfg", "data = toy-rings\n");
  EXPECT_EQ(run({"--config", cfg.string(), "--seed", "abc", "train"}), kExitConfigError);
  EXPECT_EQ(run({"--help"}), kExitOk);
  EXPECT_NE(out_.str().find("--config"), std::string::npos);
}

TEST_F(CliTest, ZeroEpochsWritesInitializationSnapshot) {
  const auto cfg = write_config("z.cfg", "data = toy-rings\ncount = 50\nhidden = 4\nepochs = 0\n");
  ASSERT_EQ(run({"--config", cfg.string(), "--seed", "5", "--out", (dir_ / "z").string(), "train"}), kExitOk);
  const Network saved = load_model(dir_ / "z" / "model.fgnn");
  const Network fresh = make_mlp(2, {4}, 2, Activation::Tanh, false, 6);
  EXPECT_EQ(serialize_model(saved), serialize_model(fresh));
  EXPECT_EQ(slurp(dir_ / "z" / "history.csv"), "epoch,loss,accuracy,sigma_min,sigma_med,sigma_max\n");
}

TEST_F(CliTest, SeedMakesRunsIdentical) {
  const auto a = train_rings("a");
  const auto b = train_rings("b");
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(slurp(dir_ / "a" / "history.csv"), slurp(dir_ / "b" / "history.csv"));
  const auto cfg = write_config("s.cfg", slurp(dir_ / "a.cfg"));
  ASSERT_EQ(run({"--config", cfg.string(), "--seed", "4", "--out", (dir_ / "c").string(), "train"}), kExitOk);
  EXPECT_NE(slurp(a), slurp(dir_ / "c" / "model.fgnn"));
}

TEST_F(CliTest, NanLossIsNumericFailure) {
  const auto cfg = write_config("nan.cfg",
                                "data = toy-rings\ncount = 64\nhidden = 4\nactivation = relu\nloss = mse\n"
                                "optimizer = sgd\nlr = 1e300\nepochs = 5\n");
  EXPECT_EQ(run({"--config", cfg.string(), "--out", (dir_ / "n").string(), "train"}), kExitNumericFailure);
  EXPECT_NE(err_.str().find("numeric failure"), std::string::npos) << err_.str();
}

TEST_F(CliTest, ConvertKeepsPredictionsAndRejectsFgnInput) {
  const auto model = train_rings("cls");
  const auto cfg = write_config("conv.cfg", "model = " + model.string() + "\ndata = toy-rings\ncount = 200\n");
  ASSERT_EQ(run({"--config", cfg.string(), "--out", (dir_ / "conv").string(), "convert"}), kExitOk) << err_.str();
  EXPECT_NE(out_.str().find("argmax agreement: 1"), std::string::npos) << out_.str();
  const Network a = load_model(model), b = load_model(dir_ / "conv" / "model.fgnn");
  EXPECT_TRUE(b.has_fgn());
  const Dataset probe = gen_toy_rings(100, 77);
  const auto pa = predict(a, probe.inputs), pb = predict(b, probe.inputs);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].class_index, pb[i].class_index);
  EXPECT_EQ(slurp(dir_ / "conv" / "conversion.csv").rfind("layer,probe,sigma,deviation\n", 0), 0u);

  const auto again =
      write_config("again.cfg", "model = " + (dir_ / "conv" / "model.fgnn").string() + "\ndata = toy-rings\n");
  EXPECT_EQ(run({"--config", again.string(), "--out", (dir_ / "again").string(), "convert"}), kExitConfigError);
}

TEST_F(CliTest, AttackSweepDumpsAndDirectionRoundTrip) {
  const auto model = train_rings("cls");
  const auto cfg = write_config("atk.cfg", "model = " + model.string() +
                                               "\ndata = toy-rings\ncount = 100\nattack = fgsm\n"
                                               "epsilons = 0, 0.3, 0.6\nkeep = 16\n");
  ASSERT_EQ(run({"--config", cfg.string(), "--out", (dir_ / "atk").string(), "attack"}), kExitOk) << err_.str();
  std::istringstream sweep(slurp(dir_ / "atk" / "sweep.csv"));
  std::string line;
  std::getline(sweep, line);
  EXPECT_EQ(line, "epsilon,attempted,succeeded,mean_l2,mean_linf");
  std::getline(sweep, line);
  EXPECT_EQ(line.substr(0, 2), "0,");
  EXPECT_NE(line.find(",0,0,0"), std::string::npos) << line;

  for (int e = 0; e < 3; ++e) {
    const std::string dump = slurp(dir_ / "atk" / "adversarial" / ("eps_" + std::to_string(e) + ".csv"));
    EXPECT_EQ(std::count(dump.begin(), dump.end(), '\n'), 2 + 16);
  }

  // The direction row for eps=0.6 is x_adv - x of the first attacked input;
  // a half-width of 0.6 puts the row end on the dumped adversarial input.
  const auto ev = write_config("ev.cfg", "model = " + model.string() + "\ndata = toy-rings\ncount = 100\n" +
                                             "mode = cross-section\nsection = direction\ndirection_file = " +
                                             (dir_ / "atk" / "direction.csv").string() +
                                             "\nhalf_width = 0.6\nresolution = 5\n");
  ASSERT_EQ(run({"--config", ev.string(), "--out", (dir_ / "ev").string(), "eval"}), kExitOk) << err_.str();
  EXPECT_NE(out_.str().find("cells: 25"), std::string::npos);

  std::istringstream adv(slurp(dir_ / "atk" / "adversarial" / "eps_2.csv"));
  std::getline(adv, line);
  std::getline(adv, line);
  std::getline(adv, line);
  std::vector<double> fields;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, ',');) fields.push_back(std::stod(f));
  ASSERT_EQ(fields.size(), 4u);
  const std::vector<double> x_adv{fields[2], fields[3]};
  const auto want = confidence(network_forward(load_model(model), x_adv).logits);

  std::istringstream grid(slurp(dir_ / "ev" / "cross_section.csv"));
  bool found = false;
  while (std::getline(grid, line)) {
    if (line.rfind("2,4,", 0) != 0) continue;
    std::vector<std::string> cols;
    std::stringstream cs(line);
    for (std::string f; std::getline(cs, f, ',');) cols.push_back(f);
    EXPECT_EQ(std::stoul(cols[4]), want.class_index);
    EXPECT_NEAR(std::stod(cols[5]), want.confidence, 1e-9);
    found = true;
  }
  EXPECT_TRUE(found);
}

TEST_F(CliTest, EvalModes) {
  const auto model = train_rings("cls");
  const std::string base = "model = " + model.string() + "\n";
  const auto hist = write_config("h.cfg", base + "data = toy-rings\ncount = 200\nmode = histogram\n");
  ASSERT_EQ(run({"--config", hist.string(), "--out", (dir_ / "h").string(), "eval"}), kExitOk) << err_.str();
  EXPECT_NE(out_.str().find("fractionAbove(0.5): "), std::string::npos);
  EXPECT_NE(out_.str().find("accuracy: "), std::string::npos);
  const std::string csv = slurp(dir_ / "h" / "histogram.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 11);

  const auto rej = write_config("r.cfg", base + "data = random\ndim = 2\ncount = 50\nmode = rejection\n");
  ASSERT_EQ(run({"--config", rej.string(), "--out", (dir_ / "r").string(), "eval"}), kExitOk) << err_.str();
  EXPECT_NE(out_.str().find("rejection rate"), std::string::npos);

  const auto heat = write_config("hm.cfg", base + "mode = heatmap\nresolution = 7\n");
  ASSERT_EQ(run({"--config", heat.string(), "--out", (dir_ / "hm").string(), "eval"}), kExitOk) << err_.str();
  EXPECT_NE(out_.str().find("cells: 49"), std::string::npos);
  const std::string ppm = slurp(dir_ / "hm" / "heatmap.ppm");
  EXPECT_EQ(ppm.size(), std::string("P6\n7 7\n255\n").size() + 3 * 49);

  const auto bad = write_config("b.cfg", base + "mode = spectrum\n");
  EXPECT_EQ(run({"--config", bad.string(), "--out", (dir_ / "b").string(), "eval"}), kExitConfigError);
  EXPECT_NE(err_.str().find("line 2"), std::string::npos);
}

TEST_F(CliTest, RandomCrossSectionFollowsSeed) {
  const auto model = train_rings("cls");
  const auto cfg = write_config("x.cfg", "model = " + model.string() +
                                             "\ndata = toy-rings\ncount = 10\nmode = cross-section\n"
                                             "section = random\nhalf_width = 2\nresolution = 9\n");
  auto render = [&](const std::string& seed, const std::string& sub) {
    EXPECT_EQ(run({"--config", cfg.string(), "--seed", seed, "--out", (dir_ / sub).string(), "eval"}), kExitOk);
    return slurp(dir_ / sub / "cross_section.csv");
  };
  EXPECT_EQ(render("1", "p"), render("1", "q"));
  EXPECT_NE(render("1", "p"), render("2", "q"));
}

}  // namespace
}  // namespace fgn
