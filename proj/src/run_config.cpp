#include "evircod/run_config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "evircod/errors.hpp"

namespace evircod {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0') throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

long long to_integer(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return i;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Access>
Key int_key(std::string name, Access a) {
  return {name,
          [a, name](RunConfig& c, const std::string& v) { a(c) = static_cast<std::remove_reference_t<decltype(a(c))>>(to_integer(name, v)); },
          [a](const RunConfig& c) { return std::to_string(a(const_cast<RunConfig&>(c))); }};
}

template <class Access>
Key double_key(std::string name, Access a) {
  return {name, [a, name](RunConfig& c, const std::string& v) { a(c) = to_double(name, v); },
          [a](const RunConfig& c) { return fmt_double(a(const_cast<RunConfig&>(c))); }};
}

template <class Access>
Key bool_key(std::string name, Access a) {
  return {name, [a, name](RunConfig& c, const std::string& v) { a(c) = to_bool(name, v); },
          [a](const RunConfig& c) { return std::string(a(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Access>
Key string_key(std::string name, Access a) {
  return {name, [a](RunConfig& c, const std::string& v) { a(c) = v; },
          [a](const RunConfig& c) { return a(const_cast<RunConfig&>(c)); }};
}

template <std::size_t N, class Access>
Key array_key(std::string name, Access a, bool integer) {
  return {name,
          [a, name, integer](RunConfig& c, const std::string& v) {
            auto items = split_list(v);
            if (items.size() != N) throw ConfigError(name + ": expected " + std::to_string(N) + " comma-separated values");
            auto& arr = a(c);
            for (std::size_t i = 0; i < N; ++i) {
              using T = std::remove_reference_t<decltype(arr[0])>;
              arr[i] = integer ? static_cast<T>(to_integer(name, items[i])) : static_cast<T>(to_double(name, items[i]));
            }
          },
          [a, integer](const RunConfig& c) {
            const auto& arr = a(const_cast<RunConfig&>(c));
            std::string out;
            for (std::size_t i = 0; i < N; ++i) {
              if (i) out += ", ";
              out += integer ? std::to_string(static_cast<long long>(arr[i])) : fmt_double(static_cast<double>(arr[i]));
            }
            return out;
          }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back(int_key("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    k.push_back(string_key("out_dir", [](RunConfig& c) -> std::string& { return c.out_dir; }));

    k.push_back(int_key("model.image_size", [](RunConfig& c) -> int& { return c.model.image_size; }));
    k.push_back(array_key<4>("model.channels", [](RunConfig& c) -> std::array<int, 4>& { return c.model.channels; }, true));
    k.push_back(int_key("model.ref_channels", [](RunConfig& c) -> int& { return c.model.ref_channels; }));
    k.push_back(int_key("model.model_channels", [](RunConfig& c) -> int& { return c.model.model_channels; }));
    k.push_back(int_key("model.grid", [](RunConfig& c) -> int& { return c.model.grid; }));
    k.push_back(int_key("model.patch", [](RunConfig& c) -> int& { return c.model.patch; }));
    k.push_back(int_key("model.embed_dim", [](RunConfig& c) -> int& { return c.model.embed_dim; }));
    k.push_back(int_key("model.heads", [](RunConfig& c) -> int& { return c.model.heads; }));
    k.push_back(int_key("model.ffn_hidden", [](RunConfig& c) -> int& { return c.model.ffn_hidden; }));
    k.push_back(double_key("model.gamma", [](RunConfig& c) -> double& { return c.model.gamma; }));
    k.push_back(double_key("model.tau_min", [](RunConfig& c) -> double& { return c.model.tau_min; }));
    k.push_back({"model.deformable_mode",
                 [](RunConfig& c, const std::string& v) { c.model.deformable_mode = parse_deformable_mode(v); },
                 [](const RunConfig& c) { return to_string(c.model.deformable_mode); }});
    k.push_back(bool_key("model.semantic_mask", [](RunConfig& c) -> bool& { return c.model.semantic_mask; }));
    k.push_back(int_key("model.evidence_hidden", [](RunConfig& c) -> int& { return c.model.evidence_hidden; }));
    k.push_back(int_key("model.uncertainty_hidden", [](RunConfig& c) -> int& { return c.model.uncertainty_hidden; }));
    k.push_back(double_key("model.lambda_vacuity", [](RunConfig& c) -> double& { return c.model.lambda_vacuity; }));
    k.push_back(double_key("model.lambda_variance", [](RunConfig& c) -> double& { return c.model.lambda_variance; }));
    k.push_back({"model.gate", [](RunConfig& c, const std::string& v) { c.model.gate = parse_gate_activation(v); },
                 [](const RunConfig& c) { return to_string(c.model.gate); }});
    k.push_back(int_key("model.barm_hidden", [](RunConfig& c) -> int& { return c.model.barm_hidden; }));
    k.push_back(bool_key("model.enable_rgde", [](RunConfig& c) -> bool& { return c.model.enable_rgde; }));
    k.push_back(bool_key("model.enable_uaed", [](RunConfig& c) -> bool& { return c.model.enable_uaed; }));
    k.push_back(bool_key("model.enable_ega", [](RunConfig& c) -> bool& { return c.model.enable_ega; }));
    k.push_back(bool_key("model.enable_barm", [](RunConfig& c) -> bool& { return c.model.enable_barm; }));

    k.push_back(array_key<2>("loss.omega", [](RunConfig& c) -> std::array<double, 2>& { return c.loss.omega; }, false));
    k.push_back(array_key<2>("loss.eta", [](RunConfig& c) -> std::array<double, 2>& { return c.loss.eta; }, false));
    k.push_back(double_key("loss.kappa", [](RunConfig& c) -> double& { return c.loss.kappa; }));
    k.push_back(double_key("loss.lambda_focal", [](RunConfig& c) -> double& { return c.loss.lambda_focal; }));
    k.push_back(double_key("loss.gamma_focal", [](RunConfig& c) -> double& { return c.loss.gamma_focal; }));
    k.push_back(double_key("loss.beta_bnd", [](RunConfig& c) -> double& { return c.loss.beta_bnd; }));
    k.push_back(double_key("loss.mu", [](RunConfig& c) -> double& { return c.loss.mu; }));
    k.push_back(int_key("loss.pool_k", [](RunConfig& c) -> int& { return c.loss.pool_k; }));
    k.push_back({"loss.evidence_term",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "evidential") c.loss.evidence_term = losses::EvidenceTerm::evidential;
                   else if (v == "bce") c.loss.evidence_term = losses::EvidenceTerm::bce;
                   else throw ConfigError("loss.evidence_term: expected evidential or bce, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.loss.evidence_term == losses::EvidenceTerm::bce ? "bce" : "evidential");
                 }});

    k.push_back(double_key("optim.base_lr", [](RunConfig& c) -> double& { return c.optim.base_lr; }));
    k.push_back(double_key("optim.backbone_lr_scale", [](RunConfig& c) -> double& { return c.optim.backbone_lr_scale; }));
    k.push_back(double_key("optim.lr_floor", [](RunConfig& c) -> double& { return c.optim.lr_floor; }));
    k.push_back(int_key("optim.epochs", [](RunConfig& c) -> int& { return c.optim.epochs; }));
    k.push_back(int_key("optim.batch", [](RunConfig& c) -> int& { return c.optim.batch; }));
    k.push_back(int_key("optim.checkpoint_every", [](RunConfig& c) -> int& { return c.optim.checkpoint_every; }));
    k.push_back(int_key("optim.max_steps", [](RunConfig& c) -> int& { return c.optim.max_steps; }));

    k.push_back({"data.source",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "synthetic") c.data.source = DataSource::synthetic;
                   else if (v == "folder") c.data.source = DataSource::folder;
                   else throw ConfigError("data.source: expected synthetic or folder, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.data.source == DataSource::folder ? "folder" : "synthetic");
                 }});
    k.push_back(string_key("data.train_path", [](RunConfig& c) -> std::string& { return c.data.train_path; }));
    k.push_back(string_key("data.eval_path", [](RunConfig& c) -> std::string& { return c.data.eval_path; }));
    k.push_back(int_key("data.max_references", [](RunConfig& c) -> int& { return c.data.max_references; }));
    k.push_back(int_key("data.count", [](RunConfig& c) -> int& { return c.data.synth.count; }));
    k.push_back(int_key("data.categories", [](RunConfig& c) -> int& { return c.data.synth.categories; }));
    k.push_back(int_key("data.min_objects", [](RunConfig& c) -> int& { return c.data.synth.min_objects; }));
    k.push_back(int_key("data.max_objects", [](RunConfig& c) -> int& { return c.data.synth.max_objects; }));
    k.push_back(int_key("data.distractors", [](RunConfig& c) -> int& { return c.data.synth.distractors; }));
    k.push_back(bool_key("data.paired", [](RunConfig& c) -> bool& { return c.data.synth.paired; }));
    k.push_back(int_key("data.references", [](RunConfig& c) -> int& { return c.data.synth.references; }));
    k.push_back(double_key("data.similarity", [](RunConfig& c) -> double& { return c.data.synth.similarity; }));
    k.push_back(double_key("data.min_radius", [](RunConfig& c) -> double& { return c.data.synth.min_radius; }));
    k.push_back(double_key("data.max_radius", [](RunConfig& c) -> double& { return c.data.synth.max_radius; }));
    k.push_back(double_key("data.label_noise", [](RunConfig& c) -> double& { return c.data.synth.label_noise; }));
    k.push_back(int_key("data.eval_count", [](RunConfig& c) -> int& { return c.data.eval_count; }));
    k.push_back(double_key("data.eval_label_noise", [](RunConfig& c) -> double& { return c.data.eval_label_noise; }));
    k.push_back(int_key("data.eval_seed_offset", [](RunConfig& c) -> std::uint64_t& { return c.data.eval_seed_offset; }));

    k.push_back(string_key("layout.query_dir", [](RunConfig& c) -> std::string& { return c.data.layout.query_dir; }));
    k.push_back(string_key("layout.reference_dir", [](RunConfig& c) -> std::string& { return c.data.layout.reference_dir; }));
    k.push_back(string_key("layout.images_dir", [](RunConfig& c) -> std::string& { return c.data.layout.images_dir; }));
    k.push_back(string_key("layout.masks_dir", [](RunConfig& c) -> std::string& { return c.data.layout.masks_dir; }));
    k.push_back(int_key("layout.max_references", [](RunConfig& c) -> int& { return c.data.layout.max_references; }));
    return k;
  }();
  return table;
}

const Key& find_key(const std::string& name) {
  for (const auto& k : keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

/// (qualified key, value, line) in file order; `profile` is returned separately.
std::vector<std::pair<std::string, std::string>> parse_lines(const std::string& text, std::string& profile) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line, section;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(number) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string qualified = section.empty() ? key : section + "." + key;
    if (qualified == "profile") {
      profile = value;
      continue;
    }
    out.emplace_back(qualified, value);
  }
  return out;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (!(optim.base_lr > 0.0)) throw ConfigError("optim.base_lr must be positive");
  if (optim.backbone_lr_scale < 0.0 || optim.lr_floor < 0.0) throw ConfigError("optim learning-rate scale and floor must be non-negative");
  if (optim.epochs < 1) throw ConfigError("optim.epochs must be at least 1");
  if (optim.batch < 1) throw ConfigError("optim.batch must be at least 1");
  if (optim.checkpoint_every < 0 || optim.max_steps < 0) throw ConfigError("optim.checkpoint_every and optim.max_steps must be non-negative");
  if (data.source == DataSource::synthetic) {
    data::SynthConfig s = data.synth;
    s.image_size = model.image_size;
    s.validate();
  } else if (data.train_path.empty()) {
    throw ConfigError("data.train_path is required for the folder source");
  }
  if (data.eval_count < 0) throw ConfigError("data.eval_count must be non-negative");
}

RunConfig profile_config(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "toy") {
    c.model.image_size = 64;
    c.model.channels = {16, 32, 48, 64};
    c.model.ref_channels = 32;
    c.model.model_channels = 32;
    c.model.grid = 16;
    c.model.patch = 2;
    c.model.embed_dim = 32;
    c.model.heads = 4;
    c.model.ffn_hidden = 64;
    c.optim.base_lr = 4e-3;
    c.optim.epochs = 100;  // 20 samples, batch 4 -> 500 steps
    c.optim.batch = 4;
    c.data.synth.count = 20;
    c.out_dir = "runs/toy";
    return c;
  }
  if (name == "paper") {
    c.model.image_size = 352;
    c.model.channels = {64, 128, 320, 512};
    c.model.ref_channels = 64;
    c.model.model_channels = 64;
    c.model.grid = 88;
    c.model.patch = 4;
    c.model.embed_dim = 1024;
    c.model.heads = 8;
    c.model.ffn_hidden = 2048;
    c.model.evidence_hidden = 64;
    c.model.uncertainty_hidden = 64;
    c.model.barm_hidden = 32;
    c.optim.base_lr = 1e-4;
    c.optim.epochs = 150;
    c.optim.batch = 16;
    c.optim.checkpoint_every = 10;
    c.data.synth.min_radius = 30;
    c.data.synth.max_radius = 60;
    c.out_dir = "runs/paper";
    return c;
  }
  throw ConfigError("unknown profile '" + name + "' (expected toy or paper)");
}

std::vector<std::string> profile_names() { return {"toy", "paper"}; }

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides) {
  std::string profile = "toy";
  auto lines = parse_lines(text, profile);
  std::vector<std::pair<std::string, std::string>> extra;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = trim(o.substr(0, eq)), value = trim(o.substr(eq + 1));
    if (key == "profile") profile = value;
    else extra.emplace_back(key, value);
  }
  RunConfig c = profile_config(profile);
  for (const auto& [k, v] : lines) find_key(k).set(c, v);
  for (const auto& [k, v] : extra) find_key(k).set(c, v);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), overrides);
}

std::string canonical_text(const RunConfig& c) {
  std::string out = "profile = " + c.profile + "\n";
  std::string section;
  for (const auto& k : keys()) {
    const auto dot = k.name.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.name.substr(0, dot);
    const std::string key = dot == std::string::npos ? k.name : k.name.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += key + " = " + k.get(c) + "\n";
  }
  return out;
}

std::string model_text(const RunConfig& c) {
  std::string out;
  for (const auto& k : keys())
    if (k.name.rfind("model.", 0) == 0) out += k.name + " = " + k.get(c) + "\n";
  return out;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fingerprint(const RunConfig& c) { return fnv1a(model_text(c)); }

void apply_ablation(RunConfig& c, const std::string& module) {
  if (module == "rgde") c.model.enable_rgde = false;
  else if (module == "uaed") c.model.enable_uaed = false;
  else if (module == "ega") c.model.enable_ega = false;
  else if (module == "barm") c.model.enable_barm = false;
  else if (module == "deformable") c.model.gamma = 0.0;
  else if (module == "additive") c.model.deformable_mode = DeformableMode::additive;
  else if (module == "all") {
    c.model.enable_rgde = c.model.enable_uaed = c.model.enable_ega = c.model.enable_barm = false;
  } else {
    throw ConfigError("unknown ablation '" + module + "'");
  }
}

std::vector<std::string> ablation_names() { return {"rgde", "uaed", "ega", "barm", "deformable", "additive", "all"}; }

std::string resolve_out_dir(const RunConfig& c) {
  const char* env = std::getenv("EVIRCOD_OUT_DIR");
  return env && *env ? std::string(env) : c.out_dir;
}

}  // namespace evircod
