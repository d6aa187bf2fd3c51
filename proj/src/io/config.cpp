#include "pda/io/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "pda/errors.hpp"

namespace pda::io {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ParameterError("bad number for " + key + ": '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ParameterError("bad non-negative integer for " + key + ": '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ParameterError("bad boolean for " + key + ": '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto real = [&](const char* k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { c.train.*member = to_double(key, v); };
    };
    auto count = [&](const char* k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) {
        c.train.*member = static_cast<std::size_t>(to_uint(key, v));
      };
    };
    auto enc_count = [&](const char* k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) {
        c.encoder.*member = static_cast<std::size_t>(to_uint(key, v));
      };
    };
    real("tau", &train::TrainConfig::tau);
    real("gamma", &train::TrainConfig::gamma);
    real("beta_source", &train::TrainConfig::beta_source);
    real("beta_target", &train::TrainConfig::beta_target);
    real("temperature", &train::TrainConfig::temperature);
    real("lr0", &train::TrainConfig::lr0);
    real("ensemble_weight", &train::TrainConfig::ensemble_weight);
    count("epochs", &train::TrainConfig::epochs);
    count("batch_size", &train::TrainConfig::batch_size);
    count("shots", &train::TrainConfig::shots);
    count("context_length", &train::TrainConfig::context_length);
    count("warmup_epochs", &train::TrainConfig::warmup_epochs);
    count("bank_refresh_epochs", &train::TrainConfig::bank_refresh_epochs);
    t["seed"] = [](RunConfig& c, const std::string& key, const std::string& v) { c.train.seed = to_uint(key, v); };
    t["losses"] = [](RunConfig& c, const std::string&, const std::string& v) { c.train.losses = parse_losses(v); };
    enc_count("d_model", &enc::EncoderConfig::d_model);
    enc_count("n_layers", &enc::EncoderConfig::n_layers);
    enc_count("n_heads", &enc::EncoderConfig::n_heads);
    enc_count("d_proj", &enc::EncoderConfig::d_proj);
    enc_count("n_patches", &enc::EncoderConfig::n_patches);
    enc_count("coupled_layers", &enc::EncoderConfig::coupled_layers);
    enc_count("vocab_size", &enc::EncoderConfig::vocab_size);
    enc_count("mlp_width", &enc::EncoderConfig::mlp_width);
    t["encoder_seed"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      c.encoder.seed = to_uint(key, v);
    };
    t["identity_value_path"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      c.encoder.identity_value_path = to_bool(key, v);
    };
    return t;
  }();
  return table;
}

constexpr std::pair<const char*, unsigned> kLossNames[] = {
    {"lx", train::kSupervised},
    {"lu", train::kPseudo},
    {"lxa", train::kAlignSupervised},
    {"lua", train::kAlignPseudo},
};

}  // namespace

void RunConfig::finalize() {
  encoder.temperature = train.temperature;
  encoder.context_length = train.context_length;
  train.validate();
  encoder.validate();
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  auto it = setters().find(key);
  if (it == setters().end()) throw ParameterError("unknown configuration key '" + key + "'");
  it->second(config, key, value);
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream is(text);
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParameterError(origin + ":" + std::to_string(n) + ": expected 'key = value', got '" + line + "'");
    }
    try {
      apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ParameterError& e) {
      throw ParameterError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParameterError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(config, ss.str(), path.string());
}

std::string describe(const RunConfig& config) {
  return train::describe(config.train) + train::describe(config.encoder);
}

unsigned parse_losses(const std::string& text) {
  const std::string t = trim(text);
  if (t == "all") return train::kAllLosses;
  if (!t.empty() && std::isdigit(static_cast<unsigned char>(t[0]))) {
    const auto v = to_uint("losses", t);
    if (v == 0 || v > train::kAllLosses) throw ParameterError("loss flags must lie in 1..15");
    return static_cast<unsigned>(v);
  }
  unsigned out = 0;
  std::stringstream ss(t);
  for (std::string name; std::getline(ss, name, ',');) {
    name = trim(name);
    bool found = false;
    for (auto [n, flag] : kLossNames) {
      if (name == n) {
        out |= flag;
        found = true;
      }
    }
    if (!found) throw ParameterError("unknown loss term '" + name + "' (use lx, lu, lxa, lua or all)");
  }
  if (out == 0) throw ParameterError("at least one loss term is required");
  return out;
}

std::string format_losses(unsigned losses) {
  std::string out;
  for (auto [n, flag] : kLossNames) {
    if (losses & flag) out += (out.empty() ? "" : ",") + std::string(n);
  }
  return out;
}

}  // namespace pda::io
