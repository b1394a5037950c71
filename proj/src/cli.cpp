#include "fgn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>

#include "fgn/attacks.hpp"
#include "fgn/convert.hpp"
#include "fgn/eval.hpp"
#include "fgn/model_io.hpp"
#include "fgn/parallel.hpp"
#include "fgn/rng.hpp"
#include "fgn/train.hpp"

namespace fgn {

ConfigError::ConfigError(const std::string& what, std::size_t line)
    : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  if (trim(s).empty()) return parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(trim(item));
  return parts;
}

bool parse_real(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(v);
}

bool parse_u64(const std::string& s, std::uint64_t& v) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  return !s.empty() && r.ec == std::errc() && r.ptr == s.data() + s.size();
}

}  // namespace

Config Config::parse(std::istream& in, const std::set<std::string>& allowed) {
  Config cfg;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string text = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + text + "'", line);
    const std::string key = trim(text.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key", line);
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "'", line);
    if (cfg.entries_.count(key))
      throw ConfigError("duplicate key '" + key + "' (first on line " + std::to_string(cfg.entries_[key].line) + ")",
                        line);
    cfg.entries_[key] = {trim(text.substr(eq + 1)), line};
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path, const std::set<std::string>& allowed) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string(), 0);
  return parse(in, allowed);
}

void Config::set(const std::string& key, const std::string& value) { entries_[key] = {value, 0}; }

std::size_t Config::line(const std::string& key) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? 0 : it->second.line;
}

void Config::bad_value(const std::string& key, const std::string& expected) const {
  throw ConfigError("key '" + key + "': expected " + expected + ", got '" + entries_.at(key).value + "'", line(key));
}

std::string Config::text(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("missing required key '" + key + "'", 0);
  return it->second.value;
}

std::string Config::text(const std::string& key, const std::string& fallback) const {
  return has(key) ? text(key) : fallback;
}

double Config::real(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  double v = 0;
  if (!parse_real(text(key), v)) bad_value(key, "a finite number");
  return v;
}

std::uint64_t Config::u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) return fallback;
  std::uint64_t v = 0;
  if (!parse_u64(text(key), v)) bad_value(key, "a non-negative integer");
  return v;
}

std::size_t Config::count(const std::string& key, std::size_t fallback) const {
  return static_cast<std::size_t>(u64(key, fallback));
}

bool Config::flag(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = text(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, "true or false");
}

std::vector<double> Config::reals(const std::string& key, const std::vector<double>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<double> out;
  for (const auto& part : split_list(text(key))) {
    double v = 0;
    if (!parse_real(part, v)) bad_value(key, "a comma-separated list of numbers");
    out.push_back(v);
  }
  return out;
}

std::vector<std::size_t> Config::counts(const std::string& key, const std::vector<std::size_t>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<std::size_t> out;
  for (const auto& part : split_list(text(key))) {
    std::uint64_t v = 0;
    if (!parse_u64(part, v)) bad_value(key, "a comma-separated list of non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<std::string> Config::texts(const std::string& key) const {
  return has(key) ? split_list(text(key)) : std::vector<std::string>{};
}

const std::set<std::string>& dataset_keys() {
  static const std::set<std::string> keys{"data", "data_dir", "count", "offset", "dim", "classes", "lo",
                                          "hi", "scale", "normalize", "augment", "data_seed"};
  return keys;
}

namespace {

std::filesystem::path mnist_dir(const Config& cfg) {
  if (cfg.has("data_dir")) return cfg.text("data_dir");
  if (const char* env = std::getenv("FGN_DATA_DIR")) return std::filesystem::path(env) / "mnist";
  return "data/mnist";
}

// Generator seeds are offset from the run seed so that two datasets in one
// run never share a stream.
std::uint64_t data_seed(const Config& cfg, std::uint64_t seed) { return cfg.u64("data_seed", seed + 1000); }

}  // namespace

Dataset load_dataset(const Config& cfg, std::uint64_t seed) {
  const std::string kind = cfg.text("data");
  const std::uint64_t dseed = data_seed(cfg, seed);
  const std::size_t count = cfg.count("count", 0);
  const std::size_t gen_count = count ? count : 1000;
  Dataset ds;
  if (kind == "mnist-train" || kind == "mnist-test" || kind == "shuffled") {
    const bool normalize_it = cfg.flag("normalize", true);
    ds = load_mnist_split(mnist_dir(cfg), kind == "mnist-train", normalize_it);
    const std::size_t offset = cfg.count("offset", 0);
    if (offset >= ds.size()) throw ConfigError("offset beyond dataset size", cfg.line("offset"));
    ds = take(ds, offset, std::min(count ? count : ds.size(), ds.size() - offset));
    if (kind == "shuffled") ds = shuffle_pixels(ds, dseed);
  } else if (kind == "random") {
    const std::size_t dim = cfg.count("dim", 784);
    ds = gen_full_random(gen_count, dim, cfg.real("lo", 0.0), cfg.real("hi", 1.0), dseed);
    if (cfg.flag("normalize", true)) normalize(ds, kMnistMean, kMnistStd);
  } else if (kind == "toy-linear") {
    ds = gen_toy_linear(gen_count, dseed);
  } else if (kind == "toy-rings") {
    ds = gen_toy_rings(gen_count, dseed);
  } else if (kind == "white-noise") {
    ds = gen_white_noise_signal(gen_count, cfg.count("dim", 256), cfg.real("lo", -1.0), cfg.real("hi", 1.0), dseed,
                                cfg.real("scale", 1.0));
  } else if (kind == "tones") {
    ds = gen_tone_signals(gen_count, cfg.count("dim", 256), cfg.count("classes", 4), dseed);
  } else {
    throw ConfigError("key 'data': unknown dataset '" + kind + "'", cfg.line("data"));
  }
  const std::string augment = cfg.text("augment", "none");
  if (augment == "shifts") {
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(ds.dim()))));
    if (side * side != ds.dim()) throw ConfigError("augment=shifts needs square images", cfg.line("augment"));
    ds = augment_shifts(ds, side, side);
  } else if (augment != "none") {
    throw ConfigError("key 'augment': expected none or shifts", cfg.line("augment"));
  }
  return ds;
}

std::set<std::string> command_keys(const std::string& command) {
  std::set<std::string> keys = dataset_keys();
  keys.insert("seed");
  if (command == "train") {
    for (const char* k : {"model", "arch", "hidden", "activation", "fgn", "init", "init_sigma", "outputs", "channels",
                          "kernel", "stride", "dilation", "conv_activation", "loss", "lambda", "l2_weight",
                          "optimizer", "lr", "beta1", "beta2", "adam_epsilon", "epochs", "batch_size", "frozen",
                          "decouple", "gate"})
      keys.insert(k);
  } else if (command == "convert") {
    for (const char* k : {"model", "tol", "decouple"}) keys.insert(k);
  } else if (command == "attack") {
    for (const char* k : {"model", "attack", "epsilons", "pgd_alpha_ratio", "pgd_steps", "cw_c_low", "cw_c_high",
                          "cw_binary_steps", "cw_inner_iters", "cw_inner_lr", "cw_box_lo", "cw_box_hi", "cw_target",
                          "keep"})
      keys.insert(k);
  } else if (command == "eval") {
    for (const char* k : {"model", "mode", "bins", "threshold", "x_min", "x_max", "y_min", "y_max", "resolution",
                          "layer", "unit", "section", "index", "other_index", "direction_file", "direction_row",
                          "half_width", "gate"})
      keys.insert(k);
  } else {
    throw std::invalid_argument("unknown command " + command);
  }
  return keys;
}

namespace {

struct Context {
  Config cfg;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::ostream& out;
};

void init_uniform(Tensor& t, double bound, Rng& rng) {
  for (double& v : t.data) v = rng.uniform(-bound, bound);
}

Network build_model(const Config& cfg, const Dataset& data, std::uint64_t seed) {
  const std::string arch = cfg.text("arch", "mlp");
  const auto hidden = cfg.counts("hidden", {64, 64});
  const Activation act = parse_activation(cfg.text("activation", "tanh"));
  const bool fgn = cfg.flag("fgn", false);
  const double init_sigma = cfg.real("init_sigma", 1.0);
  const std::size_t outputs = cfg.count("outputs", data.num_classes);
  if (outputs == 0) throw ConfigError("key 'outputs' must be positive", cfg.line("outputs"));
  Network net;
  std::size_t width = data.dim();
  if (arch == "conv") {
    const std::size_t channels = cfg.count("channels", 8), kernel = cfg.count("kernel", 9);
    const std::size_t stride = cfg.count("stride", 1), dilation = cfg.count("dilation", 1);
    if (!channels || !kernel || !stride || !dilation)
      throw ConfigError("conv channels, kernel, stride and dilation must be positive", 0);
    const std::size_t length = conv_output_length(width, kernel, stride, dilation);
    if (length == 0) throw ConfigError("conv kernel does not fit the input length", cfg.line("kernel"));
    Rng rng(seed);
    Tensor w({channels, kernel}), b({channels});
    const double bound = 1.0 / std::sqrt(static_cast<double>(kernel));
    init_uniform(w, bound, rng);
    init_uniform(b, bound, rng);
    const Activation conv_act = parse_activation(cfg.text("conv_activation", "relu"));
    if (fgn) {
      FgnConv1dLayer l;
      l.weights = w;
      l.bias = b;
      l.centers = Tensor({channels, kernel});
      l.sigma = Tensor({channels});
      l.sigma.data.assign(channels, init_sigma);
      l.stride = stride;
      l.dilation = dilation;
      l.activation = conv_act;
      net.layers.emplace_back(std::move(l));
    } else {
      Conv1dLayer l;
      l.weights = w;
      l.bias = b;
      l.stride = stride;
      l.dilation = dilation;
      l.activation = conv_act;
      net.layers.emplace_back(std::move(l));
    }
    width = channels * length;
  } else if (arch != "mlp") {
    throw ConfigError("key 'arch': expected mlp or conv", cfg.line("arch"));
  }
  Network head = make_mlp(width, hidden, outputs, act, fgn, seed + 1, init_sigma);
  if (fgn && arch == "mlp") {
    const std::string init = cfg.text("init", "data");
    auto& first = std::get<FgnDenseLayer>(head.layers.front());
    const Dataset pts = sample(data, 1000, seed + 2);
    if (init == "data") {
      init_fgn_layer(first, {InitScheme::Kind::FromData, init_sigma}, pts.inputs, seed + 3);
    } else if (init == "large") {
      init_fgn_layer(first, {InitScheme::Kind::LargeSigma, init_sigma}, pts.inputs, seed + 3);
    } else if (init != "none") {
      throw ConfigError("key 'init': expected data, large or none", cfg.line("init"));
    }
  }
  for (auto& l : head.layers) net.layers.push_back(std::move(l));
  return net;
}

TrainConfig train_config(const Config& cfg, std::uint64_t seed) {
  TrainConfig tc;
  tc.loss = parse_loss(cfg.text("loss", "cross-entropy"));
  tc.lambda = cfg.real("lambda", 0.0);
  tc.l2_weight = cfg.real("l2_weight", 0.0);
  tc.optimizer = parse_optimizer(cfg.text("optimizer", "adam"));
  tc.lr = cfg.real("lr", 1e-3);
  tc.beta1 = cfg.real("beta1", 0.9);
  tc.beta2 = cfg.real("beta2", 0.999);
  tc.epsilon = cfg.real("adam_epsilon", 1e-8);
  tc.epochs = cfg.count("epochs", 1);
  tc.batch_size = cfg.count("batch_size", 64);
  tc.seed = seed;
  for (const auto& role : cfg.texts("frozen")) tc.frozen.insert(role);
  tc.validate();
  return tc;
}

void print_history_tail(std::ostream& out, const TrainHistory& h) {
  if (h.empty()) {
    out << "epochs: 0 (initialization snapshot)\n";
    return;
  }
  const auto& last = h.back();
  out << "epochs: " << h.size() << "\nfinal loss: " << last.loss << "\nfinal accuracy: " << last.accuracy << "\n";
}

int cmd_train(Context& ctx) {
  const Config& cfg = ctx.cfg;
  const Dataset data = load_dataset(cfg, ctx.seed);
  Network net = cfg.has("model") ? load_model(cfg.text("model")) : build_model(cfg, data, ctx.seed);
  if (cfg.flag("decouple", false)) decouple(net);
  net.use_gate = cfg.flag("gate", true);
  const TrainConfig tc = train_config(cfg, ctx.seed);
  const TrainHistory history = train(net, data, tc);
  save_model(net, ctx.out_dir / "model.fgnn");
  write_history_csv(history, ctx.out_dir / "history.csv");
  print_history_tail(ctx.out, history);
  ctx.out << "model: " << (ctx.out_dir / "model.fgnn").string() << "\n";
  return kExitOk;
}

int cmd_convert(Context& ctx) {
  const Config& cfg = ctx.cfg;
  const Network net = load_model(cfg.text("model"));
  if (net.has_fgn()) throw std::invalid_argument("convert: model already contains FGN layers");
  const Dataset ref = load_dataset(cfg, ctx.seed);
  const double tol = cfg.real("tol", 1e-4);
  ConversionResult result = convert_network(net, ref.inputs, tol);
  if (cfg.flag("decouple", false)) decouple(result.network);
  const auto& r = result.report;
  {
    std::ofstream csv(ctx.out_dir / "conversion.csv");
    if (!csv) throw std::runtime_error("cannot write conversion.csv");
    csv << std::setprecision(17) << "layer,probe,sigma,deviation\n";
    for (std::size_t l = 0; l < r.probes.size(); ++l)
      for (std::size_t p = 0; p < r.probes[l].size(); ++p)
        csv << l << ',' << p << ',' << r.probes[l][p].sigma << ',' << r.probes[l][p].deviation << '\n';
  }
  save_model(result.network, ctx.out_dir / "model.fgnn");
  ctx.out << "sigma:";
  for (double s : r.layer_sigma) ctx.out << ' ' << s;
  ctx.out << "\nmax deviation: " << r.max_deviation << "\nargmax agreement: " << r.argmax_agreement
          << "\nsearch iterations: " << r.search_iterations << "\nmodel: " << (ctx.out_dir / "model.fgnn").string()
          << "\n";
  if (!(r.max_deviation <= tol) || r.argmax_agreement < 1.0) return kExitToleranceFailure;
  return kExitOk;
}

void write_vector_row(std::ostream& out, std::span<const double> v) {
  for (double x : v) out << ',' << x;
  out << '\n';
}

int cmd_attack(Context& ctx) {
  const Config& cfg = ctx.cfg;
  const Network net = load_model(cfg.text("model"));
  const Dataset data = load_dataset(cfg, ctx.seed);
  AttackConfig ac;
  ac.kind = parse_attack(cfg.text("attack", "fgsm"));
  ac.pgd_alpha_ratio = cfg.real("pgd_alpha_ratio", ac.pgd_alpha_ratio);
  ac.pgd_steps = cfg.count("pgd_steps", ac.pgd_steps);
  ac.cw.c_low = cfg.real("cw_c_low", ac.cw.c_low);
  ac.cw.c_high = cfg.real("cw_c_high", ac.cw.c_high);
  ac.cw.binary_steps = cfg.count("cw_binary_steps", ac.cw.binary_steps);
  ac.cw.inner_iters = cfg.count("cw_inner_iters", ac.cw.inner_iters);
  ac.cw.inner_lr = cfg.real("cw_inner_lr", ac.cw.inner_lr);
  ac.cw.box_lo = cfg.real("cw_box_lo", ac.cw.box_lo);
  ac.cw.box_hi = cfg.real("cw_box_hi", ac.cw.box_hi);
  if (cfg.has("cw_target")) ac.cw.target = cfg.count("cw_target", 0);
  ac.validate();
  const auto epsilons = cfg.reals("epsilons", {0.0, 0.05, 0.1, 0.2, 0.4, 0.8});
  const std::size_t keep = cfg.count("keep", 16);
  const SweepResult sweep = attack_sweep(net, data, ac, epsilons, keep);
  write_sweep_csv(sweep.rows, ctx.out_dir / "sweep.csv");

  // Attempted inputs are the correctly classified ones, in dataset order.
  std::vector<std::size_t> attempted;
  const auto preds = predict(net, data.inputs);
  for (std::size_t i = 0; i < data.size(); ++i)
    if (preds[i].class_index == data.labels[i]) attempted.push_back(i);

  const auto adv_dir = ctx.out_dir / "adversarial";
  std::filesystem::create_directories(adv_dir);
  std::ofstream dir_csv(ctx.out_dir / "direction.csv");
  if (!dir_csv) throw std::runtime_error("cannot write direction.csv");
  dir_csv << std::setprecision(17) << "epsilon,index,label,delta...\n";
  for (std::size_t e = 0; e < epsilons.size(); ++e) {
    std::ofstream dump(adv_dir / ("eps_" + std::to_string(e) + ".csv"));
    if (!dump) throw std::runtime_error("cannot write adversarial dump");
    dump << std::setprecision(17) << "# epsilon=" << epsilons[e] << "\nindex,label,inputs...\n";
    const auto& samples = sweep.samples[e];
    for (std::size_t s = 0; s < samples.size(); ++s) {
      dump << attempted[s] << ',' << data.labels[attempted[s]];
      write_vector_row(dump, samples[s]);
    }
    if (!samples.empty() && epsilons[e] > 0) {
      const auto x = data.row(attempted[0]);
      std::vector<double> delta(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) delta[i] = samples[0][i] - x[i];
      dir_csv << epsilons[e] << ',' << attempted[0] << ',' << data.labels[attempted[0]];
      write_vector_row(dir_csv, delta);
    }
  }
  ctx.out << "epsilon attempted succeeded\n";
  for (const auto& row : sweep.rows)
    ctx.out << row.epsilon << ' ' << row.attempted << ' ' << row.succeeded << '\n';
  return kExitOk;
}

struct DirectionRow {
  double epsilon = 0;
  std::size_t index = 0;
  std::vector<double> delta;
};

std::vector<DirectionRow> read_directions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<DirectionRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto parts = split_list(line);
    DirectionRow r;
    std::uint64_t index = 0;
    if (parts.size() < 4 || !parse_real(parts[0], r.epsilon) || !parse_u64(parts[1], index))
      throw std::runtime_error("malformed direction file " + path.string());
    r.index = static_cast<std::size_t>(index);
    for (std::size_t i = 3; i < parts.size(); ++i) {
      double v = 0;
      if (!parse_real(parts[i], v)) throw std::runtime_error("malformed direction file " + path.string());
      r.delta.push_back(v);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::runtime_error("direction file has no rows: " + path.string());
  return rows;
}

void write_grid(Context& ctx, const GridRender& g, const std::string& stem) {
  write_grid_csv(g, ctx.out_dir / (stem + ".csv"));
  write_grid_ppm(g, ctx.out_dir / (stem + ".ppm"));
  ctx.out << "cells: " << g.cells.size() << "\ngrid: " << (ctx.out_dir / (stem + ".csv")).string() << "\n";
}

int cmd_eval(Context& ctx) {
  const Config& cfg = ctx.cfg;
  Network net = load_model(cfg.text("model"));
  net.use_gate = cfg.flag("gate", true);
  const std::string mode = cfg.text("mode");
  if (mode == "histogram") {
    const Dataset data = load_dataset(cfg, ctx.seed);
    const auto h = histogram_confidences(net, data, cfg.count("bins", 10));
    std::ofstream csv(ctx.out_dir / "histogram.csv");
    if (!csv) throw std::runtime_error("cannot write histogram.csv");
    csv << std::setprecision(17) << "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < h.counts.size(); ++b)
      csv << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.counts[b] << '\n';
    ctx.out << "samples: " << h.total() << "\nfractionAbove(0.5): " << h.fraction_above(0.5) << "\n";
    if (data.num_classes > 1) ctx.out << "accuracy: " << accuracy(net, data) << "\n";
    return kExitOk;
  }
  if (mode == "rejection") {
    const Dataset data = load_dataset(cfg, ctx.seed);
    const double theta = cfg.real("threshold", 0.5);
    ctx.out << "rejection rate (confidence < " << theta << "): " << rejection_rate(net, data, theta) << "\n";
    return kExitOk;
  }
  const std::size_t res = cfg.count("resolution", 101);
  if (mode == "heatmap") {
    const std::array<double, 2> xr{cfg.real("x_min", -3), cfg.real("x_max", 3)};
    const std::array<double, 2> yr{cfg.real("y_min", -3), cfg.real("y_max", 3)};
    if (cfg.has("layer")) {
      const std::size_t layer = cfg.count("layer", 0);
      if (layer >= net.layers.size()) throw ConfigError("key 'layer' out of range", cfg.line("layer"));
      write_grid(ctx, neuron_heatmap(net.layers[layer], cfg.count("unit", 0), xr, yr, res), "heatmap");
    } else {
      write_grid(ctx, activity_heatmap(net, xr, yr, res), "heatmap");
    }
    return kExitOk;
  }
  if (mode == "cross-section") {
    const Dataset data = load_dataset(cfg, ctx.seed);
    const std::string section = cfg.text("section", "fgsm");
    const double hw = cfg.real("half_width", 0.06);
    std::size_t index = cfg.count("index", 0);
    GridRender g;
    if (section == "direction") {
      const auto rows = read_directions(cfg.text("direction_file"));
      const auto& r = rows.at(std::min(cfg.count("direction_row", rows.size() - 1), rows.size() - 1));
      if (!cfg.has("index")) index = r.index;
      if (index >= data.size()) throw ConfigError("direction index beyond dataset", cfg.line("index"));
      if (r.delta.size() != data.dim()) throw std::invalid_argument("direction width does not match dataset");
      // half_width is in units of the perturbation's l-inf size, so
      // half_width = epsilon puts the row end on the stored adversarial input.
      double linf = 0, l2 = 0;
      for (double v : r.delta) {
        linf = std::max(linf, std::abs(v));
        l2 += v * v;
      }
      if (!(linf > 0)) throw std::invalid_argument("direction file row is zero");
      const auto other = random_orthogonal(r.delta, ctx.seed);
      g = cross_section(net, data.row(index), r.delta, other, hw * std::sqrt(l2) / linf, res);
    } else {
      if (index >= data.size()) throw ConfigError("key 'index' beyond dataset", cfg.line("index"));
      if (section == "fgsm") {
        g = fgsm_cross_section(net, data.row(index), data.labels[index], hw, res, ctx.seed);
      } else if (section == "image") {
        const std::size_t other = cfg.count("other_index", index + 1);
        if (other >= data.size()) throw ConfigError("key 'other_index' beyond dataset", cfg.line("other_index"));
        g = image_cross_section(net, data.row(index), data.row(other), res, ctx.seed);
      } else if (section == "random") {
        Rng rng(ctx.seed);
        std::vector<double> d1(data.dim());
        for (double& v : d1) v = rng.normal();
        const auto d2 = random_orthogonal(d1, ctx.seed + 1);
        g = cross_section(net, data.row(index), d1, d2, hw, res);
      } else {
        throw ConfigError("key 'section': expected fgsm, image, random or direction", cfg.line("section"));
      }
    }
    write_grid(ctx, g, "cross_section");
    return kExitOk;
  }
  throw ConfigError("key 'mode': expected histogram, rejection, heatmap or cross-section", cfg.line("mode"));
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Finite Gaussian neuron networks: train, convert, attack, evaluate"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  app.add_option("--config", config_path, "key=value config file")->required();
  app.add_option("--seed", seed, "seed for every random choice (overrides the config's seed)");
  app.add_option("--out", out_dir, "output directory");
  const std::pair<const char*, const char*> commands[] = {
      {"train", "train a classical or FGN network"},
      {"convert", "convert a classical network to FGN form"},
      {"attack", "run an FGSM, PGD or CW sweep against a model"},
      {"eval", "confidence histograms, rejection rates, heatmaps, cross-sections"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "fgn: " << e.what() << "\n";
    return kExitConfigError;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    worker_count();  // validates FGN_THREADS
    Context ctx{Config::load(config_path, command_keys(command)), 0, out_dir, out};
    ctx.seed = seed ? *seed : ctx.cfg.u64("seed", 0);
    std::filesystem::create_directories(ctx.out_dir);
    if (command == "train") return cmd_train(ctx);
    if (command == "convert") return cmd_convert(ctx);
    if (command == "attack") return cmd_attack(ctx);
    return cmd_eval(ctx);
  } catch (const ConfigError& e) {
    err << "fgn " << command << ": config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const TrainingError& e) {
    err << "fgn " << command << ": numeric failure: " << e.what() << "\n";
    return kExitNumericFailure;
  } catch (const ConversionError& e) {
    err << "fgn " << command << ": tolerance failure: " << e.what() << "\n";
    return kExitToleranceFailure;
  } catch (const std::invalid_argument& e) {
    err << "fgn " << command << ": invalid setting: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    err << "fgn " << command << ": " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace fgn
