#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "pda/errors.hpp"
#include "pda/io/config.hpp"
#include "pda/io/files.hpp"

using namespace pda;
using io::DType;
using io::Section;
using num::Tensor;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pda_io_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("embedding round trip is bit-exact for both dtypes") {
  TempDir dir;
  std::mt19937_64 rng(1);
  Tensor m = Tensor::gaussian(7, 3, 1.0, rng);
  io::write_embeddings(dir / "a.pdae", m);
  auto back = io::read_embeddings(dir / "a.pdae");
  CHECK(num::bit_identical(back.matrix, m));
  CHECK_FALSE(back.labels);

  Tensor f(7, 3);
  for (std::size_t i = 0; i < m.size(); ++i) f.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  std::vector<std::uint32_t> labels{0, 1, 2, 0, 1, 2, 0};
  io::write_embeddings(dir / "b.pdae", f, &labels, DType::f32);
  auto fb = io::read_embeddings(dir / "b.pdae");
  CHECK(num::bit_identical(fb.matrix, f));
  CHECK(*fb.labels == labels);
  CHECK(fs::file_size(dir / "b.pdae") == 2 * io::kHeaderBytes + 21 * 4 + 7 * 4);
}

TEST_CASE("hand-assembled f32 fixture reads 1.0") {
  const unsigned char bytes[] = {'P', 'D', 'A', 'E', 1, 0, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0,
                                 1, 0, 0, 0, 0, 0, 0, 0, 1, 0x00, 0x00, 0x80, 0x3F};
  auto records = io::decode(std::string_view(reinterpret_cast<const char*>(bytes), sizeof bytes));
  REQUIRE(records.size() == 1);
  CHECK(records[0].section == Section::embeddings);
  CHECK(records[0].dtype == DType::f32);
  CHECK(records[0].values.item() == 1.0);
  // and the writer produces exactly these bytes
  CHECK(io::encode(std::vector{io::Record::matrix(Section::embeddings, Tensor::scalar(1.0), DType::f32)}) ==
        std::string(reinterpret_cast<const char*>(bytes), sizeof bytes));
}

TEST_CASE("truncated files are rejected with the offset") {
  TempDir dir;
  Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  io::write_embeddings(dir / "a.pdae", m);
  const std::string full = slurp(dir / "a.pdae");
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, io::kHeaderBytes, full.size() - 1}) {
    spit(dir / "t.pdae", full.substr(0, cut));
    try {
      io::read_embeddings(dir / "t.pdae");
      FAIL("truncated file accepted");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
}

TEST_CASE("every single-byte header corruption is rejected") {
  TempDir dir;
  Tensor m = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  std::vector<std::uint32_t> labels{1, 0};
  io::write_embeddings(dir / "a.pdae", m, &labels);
  const std::string good = slurp(dir / "a.pdae");
  const std::size_t label_header = io::kHeaderBytes + 6 * 8;
  for (std::size_t base : {std::size_t{0}, label_header}) {
    for (std::size_t i = 0; i < io::kHeaderBytes; ++i) {
      for (unsigned mask = 1; mask < 256; ++mask) {
        std::string bad = good;
        bad[base + i] = static_cast<char>(static_cast<unsigned char>(bad[base + i]) ^ mask);
        spit(dir / "bad.pdae", bad);
        bool rejected = false;
        try {
          io::read_embeddings(dir / "bad.pdae");
        } catch (const Error&) {
          rejected = true;
        }
        if (!rejected) FAIL_CHECK("byte " << base + i << " xor " << mask << " accepted");
      }
    }
  }
}

TEST_CASE("writer refuses non-finite values") {
  Tensor m = Tensor::from_rows({{1.0, NAN}});
  CHECK_THROWS_AS(io::encode(std::vector{io::Record::matrix(Section::embeddings, m)}), NumericalError);
}

TEST_CASE("evaluation labels are invisible to the training reader") {
  TempDir dir;
  Tensor m = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
  std::vector<std::uint32_t> truth{2, 0, 1};
  io::write_embeddings(dir / "t.pdae", m, nullptr, DType::f64, &truth);
  auto set = io::read_embeddings(dir / "t.pdae");
  CHECK_FALSE(set.labels);
  CHECK(io::read_eval_labels(dir / "t.pdae") == truth);
  auto records = io::read_file(dir / "t.pdae", [](Section s) { return s != Section::eval_labels; });
  REQUIRE(records.size() == 2);
  CHECK(records[1].skipped);
  CHECK(records[1].ids.empty());
}

TEST_CASE("manifest and dataset loading") {
  TempDir dir;
  std::vector<Tensor> src{Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::from_rows({{5, 6}, {7, 8}})};
  std::vector<Tensor> tgt{Tensor::from_rows({{0, 2}, {3, 1}})};
  std::vector<std::uint32_t> ys{0, 1}, yt{1};
  io::write_embeddings(dir / "source.pdae", io::flatten_samples(src), &ys);
  io::write_embeddings(dir / "target.pdae", io::flatten_samples(tgt), nullptr, DType::f64, &yt);
  io::DatasetManifest m;
  m.class_names = {"cat", "dog"};
  m.n_patches = 2;
  m.source = dir / "source.pdae";
  m.target = dir / "target.pdae";
  io::write_manifest(dir / "data.manifest", m);
  auto loaded = io::load_dataset(dir / "data.manifest");
  CHECK(loaded.manifest.class_names == m.class_names);
  CHECK(loaded.data.classes == 2);
  REQUIRE(loaded.data.source.size() == 2);
  CHECK(num::bit_identical(loaded.data.source[1], src[1]));
  CHECK(loaded.data.source_labels == ys);
  CHECK(num::bit_identical(loaded.data.target[0], tgt[0]));

  SUBCASE("labeled target is refused") {
    io::write_embeddings(dir / "target.pdae", io::flatten_samples(tgt), &yt);
    CHECK_THROWS_AS(io::load_dataset(dir / "data.manifest"), DataError);
  }
  SUBCASE("label outside the class list") {
    std::vector<std::uint32_t> bad{0, 2};
    io::write_embeddings(dir / "source.pdae", io::flatten_samples(src), &bad);
    CHECK_THROWS_AS(io::load_dataset(dir / "data.manifest"), DataError);
  }
  SUBCASE("missing file") {
    fs::remove(dir / "source.pdae");
    CHECK_THROWS_AS(io::load_dataset(dir / "data.manifest"), DataError);
  }
}

TEST_CASE("bank, weights and checkpoint round trips") {
  TempDir dir;
  enc::EncoderConfig ec;
  ec.d_model = 8;
  ec.n_layers = 2;
  ec.n_heads = 2;
  ec.d_proj = 4;
  ec.n_patches = 3;
  ec.coupled_layers = 1;
  ec.vocab_size = 3;
  ec.mlp_width = 16;

  align::FeatureBank bank;
  bank.centroids = Tensor::from_rows({{1, 0}, {0, 1}});
  bank.domain = align::Domain::target;
  bank.shots = 2;
  bank.support = {{{3, 1}, {0.9, 0.8}, false}, {{}, {}, true}};
  io::write_bank(dir / "bank.pdae", bank);
  auto b = io::read_bank(dir / "bank.pdae");
  CHECK(num::bit_identical(b.centroids, bank.centroids));
  CHECK(b.domain == align::Domain::target);
  CHECK(b.support[0].sample_ids == bank.support[0].sample_ids);
  CHECK(b.support[0].confidences == bank.support[0].confidences);
  CHECK(b.support[1].fallback);

  auto w = enc::FrozenWeights::random(ec);
  io::write_frozen_weights(dir / "w.pdae", w);
  auto w2 = io::read_frozen_weights(dir / "w.pdae", ec);
  auto ta = w.tensors();
  auto tb = w2.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(num::bit_identical(*ta[i], *tb[i]));
  auto other = ec;
  other.d_model = 16;
  other.n_heads = 4;
  CHECK_THROWS_AS(io::read_frozen_weights(dir / "w.pdae", other), DataError);

  train::TrainConfig tc;
  tc.seed = 0xDEADBEEFCAFEull;
  train::CheckpointState ck;
  ck.state = train::ModelState::initial(ec, tc);
  ck.banks.source = bank;
  ck.banks.target = bank;
  ck.banks.target_fallback = {1};
  ck.global_step = (1ull << 40) + 3;
  ck.next_epoch = 4;
  ck.seed = tc.seed;
  ck.config_hash = train::config_hash(ec, tc);
  io::write_checkpoint(dir / "ck.pdae", ck);
  auto back = io::read_checkpoint(dir / "ck.pdae");
  CHECK(back.global_step == ck.global_step);
  CHECK(back.seed == ck.seed);
  CHECK(back.config_hash == ck.config_hash);
  CHECK(back.banks.target_fallback == ck.banks.target_fallback);
  auto sa = ck.state.tensors();
  auto sb = back.state.tensors();
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) CHECK(num::bit_identical(*sa[i], *sb[i]));
  io::write_checkpoint(dir / "ck2.pdae", back);
  CHECK(slurp(dir / "ck.pdae") == slurp(dir / "ck2.pdae"));
  CHECK_THROWS_AS(io::read_checkpoint(dir / "bank.pdae"), DataError);
}

TEST_CASE("config text, overrides and echo") {
  io::RunConfig c;
  io::apply_config_text(c, "# comment\ntau = 0.6\n gamma=2 # inline\nlosses = lx,lxa\nd_model = 16\n");
  CHECK(c.train.tau == 0.6);
  CHECK(c.train.gamma == 2.0);
  CHECK(c.train.losses == (train::kSupervised | train::kAlignSupervised));
  CHECK(c.encoder.d_model == 16);
  io::apply_setting(c, "tau", "0.9");
  CHECK(c.train.tau == 0.9);
  CHECK_THROWS_AS(io::apply_setting(c, "nope", "1"), ParameterError);
  CHECK_THROWS_AS(io::apply_setting(c, "epochs", "-1"), ParameterError);
  CHECK_THROWS_AS(io::apply_setting(c, "tau", "0.5x"), ParameterError);
  CHECK_THROWS_AS(io::apply_config_text(c, "tau 0.5"), ParameterError);

  c.train.temperature = 0.05;
  c.train.context_length = 3;
  c.finalize();
  CHECK(c.encoder.temperature == 0.05);
  CHECK(c.encoder.context_length == 3);

  io::RunConfig d;
  io::apply_config_text(d, io::describe(c));
  d.finalize();
  CHECK(io::describe(d) == io::describe(c));
  CHECK(train::config_hash(d.encoder, d.train) == train::config_hash(c.encoder, c.train));

  CHECK(io::parse_losses("all") == train::kAllLosses);
  CHECK(io::parse_losses("15") == train::kAllLosses);
  CHECK(io::format_losses(5) == "lx,lxa");
  CHECK_THROWS_AS(io::parse_losses("lz"), ParameterError);
}
