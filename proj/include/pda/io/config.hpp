#pragma once

#include <filesystem>
#include <string>

#include "pda/encoder/encoder.hpp"
#include "pda/training/training.hpp"

namespace pda::io {

struct RunConfig {
  enc::EncoderConfig encoder;
  train::TrainConfig train;

  // Copies the shared fields (temperature, context length) into the
  // encoder configuration and validates both.
  void finalize();
};

// Sets one key; unknown keys and malformed values are usage errors.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);

// "key = value" lines, '#' starts a comment. Later lines win.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "config");
void apply_config_file(RunConfig& config, const std::filesystem::path& path);

// Every key with its resolved value, re-readable by apply_config_text.
std::string describe(const RunConfig& config);

// Loss flag list such as "lx,lxa" or "all".
unsigned parse_losses(const std::string& text);
std::string format_losses(unsigned losses);

}  // namespace pda::io
