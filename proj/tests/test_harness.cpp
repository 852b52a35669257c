// Experiment harness tests: config parsing, CSV emission, checkpoint I/O,
// and row-level contracts of the run-* / ablate drivers.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "snlp/checkpoint.hpp"
#include "snlp/experiment.hpp"
#include "snlp/model.hpp"
#include "snlp/prng.hpp"
#include "snlp/solver.hpp"
#include "snlp/tokens.hpp"
#include "snlp/version.hpp"

using json = nlohmann::json;
using namespace snlp;

namespace {

std::filesystem::path scratch_dir() {
  static std::filesystem::path dir = [] {
    std::filesystem::path d = std::filesystem::current_path() / "harness_scratch";
    std::filesystem::create_directories(d);
    return d;
  }();
  return dir;
}

std::string scratch_file(const std::string& name) {
  std::filesystem::path p = scratch_dir() / name;
  std::filesystem::remove(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Minimal valid experiment description; tests mutate copies of this.
json base_config() {
  return json{
      {"model",
       {{"n_layers", 4},
        {"d_model", 16},
        {"n_heads", 2},
        {"d_ff", 16},
        {"vocab_size", 24},
        {"max_seq_len", 48},
        {"variant", "standard"},
        {"seed", 11},
        {"branch_gain", 0.3}}},
      {"snlp", {{"plan", "4xF1"}, {"iterations", 4}, {"surrogate", "idn"}, {"init", "h0"}}},
      {"eval",
       {{"seq_len", 8}, {"n_eval_tokens", 24}, {"data_seed", 5}, {"source", "markov"}}},
  };
}

ExperimentConfig parse(const json& j) { return ExperimentConfig::from_json_text(j.dump()); }

ModelWeights weights_for(const ExperimentConfig& cfg) {
  Prng prng(cfg.model_seed);
  return init_model(cfg.model, prng, cfg.branch_gain);
}

const std::string& cell(const MetricsRow& row, const std::string& key) {
  auto it = row.values.find(key);
  REQUIRE(it != row.values.end());
  return it->second;
}

bool has_cell(const MetricsRow& row, const std::string& key) {
  return row.values.find(key) != row.values.end();
}

const MetricsRow& row_named(const std::vector<MetricsRow>& rows, const std::string& case_name) {
  for (const auto& r : rows) {
    auto it = r.values.find("case");
    if (it != r.values.end() && it->second == case_name) return r;
  }
  FAIL("no row with case name ", case_name);
  return rows.front();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("csv column order is locked") {
  const std::vector<std::string> expected = {
      "command",      "mode",
      "case",         "config_hash",
      "version",      "status",
      "variant",      "n_layers",
      "d_model",      "plan",
      "prefix_len",   "iterations",
      "surrogate",    "init",
      "elk_lambda",   "source",
      "seq_len",      "n_eval_tokens",
      "seq_ppl",      "snlp_ppl",
      "delta_ppl",    "top1_match",
      "logit_cosine", "ar_match",
      "residual_init", "residual_final",
      "speedup_charged", "speedup_uncharged",
      "speedup_formula", "block_forwards",
      "probe_forwards", "diverged_iteration",
      "block_size",   "alpha",
      "alpha_round_mean", "tokens_per_round",
      "tokens_per_round_formula", "rounds",
      "fallback_rounds", "ideal_speedup",
      "lossless",     "window",
      "jd_match",     "jd_accept_per_iter",
      "jd_iters",     "jd_forward_passes",
      "sigma_max",    "frob_norm",
      "amplification", "eps_abs",
      "eps_cum",      "delta_g",
  };
  const auto& cols = csv_columns();
  REQUIRE(cols.size() == 52);
  CHECK(cols == expected);
}

TEST_CASE("format_double renders non-finite values and trims with %.9g") {
  CHECK(format_double(std::numeric_limits<double>::quiet_NaN()) == "nan");
  CHECK(format_double(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(format_double(-std::numeric_limits<double>::infinity()) == "-inf");
  CHECK(format_double(1.0) == "1");
  CHECK(format_double(0.25) == "0.25");
  CHECK(format_double(-3.5) == "-3.5");
  CHECK(format_double(3.141592653589793) == "3.14159265");
  CHECK(format_double(1234567890123.0) == "1.23456789e+12");
}

TEST_CASE("MetricsRow setters format values consistently") {
  MetricsRow row;
  row.set("command", std::string("run-ppl"));
  row.set("seq_ppl", 2.5);
  row.set("delta_ppl", std::numeric_limits<double>::quiet_NaN());
  row.set_int("rounds", -5);
  row.set_bool("lossless", true);
  row.set_bool("status", false);
  CHECK(row.values.at("command") == "run-ppl");
  CHECK(row.values.at("seq_ppl") == "2.5");
  CHECK(row.values.at("delta_ppl") == "nan");
  CHECK(row.values.at("rounds") == "-5");
  CHECK(row.values.at("lossless") == "true");
  CHECK(row.values.at("status") == "false");
}

TEST_CASE("append_rows writes one header, appends rows, and rejects separators") {
  const std::string path = scratch_file("append.csv");
  MetricsRow a;
  a.set("command", std::string("run-ppl"));
  a.set("case", std::string("eval"));
  a.set("not_a_column", std::string("ignored"));
  append_rows(path, {a});

  std::string text = slurp(path);
  std::vector<std::string> lines;
  {
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) lines.push_back(line);
  }
  REQUIRE(lines.size() == 2);
  // Header line is the locked column order, comma-joined.
  const auto header_cells = split_csv_line(lines[0]);
  CHECK(header_cells == csv_columns());
  const auto data_cells = split_csv_line(lines[1]);
  REQUIRE(data_cells.size() == csv_columns().size());
  CHECK(data_cells[0] == "run-ppl");
  CHECK(data_cells[2] == "eval");
  CHECK(data_cells[1].empty());  // unset column renders as empty cell
  // Values set under names outside the schema never appear.
  CHECK(text.find("ignored") == std::string::npos);

  // Appending to a non-empty file must not duplicate the header.
  MetricsRow b;
  b.set("command", std::string("run-jd"));
  append_rows(path, {b});
  text = slurp(path);
  std::size_t header_count = 0;
  std::istringstream ss(text);
  std::string line;
  std::size_t line_count = 0;
  while (std::getline(ss, line)) {
    ++line_count;
    if (line.rfind("command,", 0) == 0) ++header_count;
  }
  CHECK(line_count == 3);
  CHECK(header_count == 1);

  // An empty (zero-byte) file also gets the header.
  const std::string path2 = scratch_file("append_empty.csv");
  spit(path2, "");
  append_rows(path2, {b});
  const std::string text2 = slurp(path2);
  CHECK(text2.rfind("command,", 0) == 0);

  // Separator characters inside a value are a hard error.
  MetricsRow bad_comma;
  bad_comma.set("command", std::string("a,b"));
  CHECK_THROWS_AS(append_rows(path, {bad_comma}), std::logic_error);
  MetricsRow bad_newline;
  bad_newline.set("command", std::string("a\nb"));
  CHECK_THROWS_AS(append_rows(path, {bad_newline}), std::logic_error);
}

TEST_CASE("config parsing fills defaults and records a stable hash") {
  const json j = base_config();
  const ExperimentConfig cfg = parse(j);
  CHECK(cfg.model.n_layers == 4);
  CHECK(cfg.model.d_model == 16);
  CHECK(cfg.model.vocab_size == 24);
  CHECK(cfg.model.variant == Variant::Standard);
  CHECK(cfg.model_seed == 11);
  CHECK(cfg.branch_gain == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(cfg.snlp.plan.n_chunks == 4);
  CHECK(cfg.snlp.plan.fuse == 1);
  CHECK(cfg.snlp.iterations == 4);
  CHECK(cfg.snlp.surrogate == Surrogate::Idn);
  CHECK(cfg.snlp.init == SuffixInit::H0);
  CHECK(cfg.snlp.prefix_len == -1);  // stays symbolic; rows print the resolved value
  CHECK(cfg.snlp.elk_lambda == 0.0f);
  CHECK(cfg.eval.seq_len == 8);
  CHECK(cfg.eval.n_eval_tokens == 24);
  CHECK(cfg.eval.data_seed == 5);
  CHECK(cfg.eval.source == "markov");
  // Untouched sections keep their documented defaults.
  CHECK(cfg.ssd.block_size == 4);
  CHECK(cfg.ssd.max_tokens == 16);
  CHECK(cfg.ssd.n_prompts == 4);
  CHECK(cfg.ssd.prefill == 8);
  CHECK(cfg.jd.window == 5);
  CHECK(cfg.jd.max_tokens == 16);
  CHECK(cfg.jd.n_prompts == 4);
  CHECK(cfg.jd.prefill == 8);
  CHECK(cfg.ablation.ordering_mode.empty());
  CHECK(cfg.ablation.early_exit);
  CHECK(cfg.ablation.propagation);
  CHECK(cfg.ablation.n_shuffles == 3);

  REQUIRE(cfg.config_hash.size() == 16);
  for (char c : cfg.config_hash) CHECK(std::isxdigit(static_cast<unsigned char>(c)));
  // Hash depends only on the raw text.
  CHECK(ExperimentConfig::from_json_text(j.dump()).config_hash == cfg.config_hash);
  json j2 = j;
  j2["snlp"]["iterations"] = 5;
  CHECK(ExperimentConfig::from_json_text(j2.dump()).config_hash != cfg.config_hash);
  // Even whitespace-only changes alter the hash: it fingerprints bytes.
  CHECK(ExperimentConfig::from_json_text(j.dump(2)).config_hash != cfg.config_hash);
}

TEST_CASE("config parsing rejects malformed input with precise messages") {
  CHECK_THROWS_AS(ExperimentConfig::from_json_text("{"), std::runtime_error);
  CHECK_THROWS_AS(ExperimentConfig::from_json_text("[]"), std::runtime_error);

  auto expect_throws = [](json j) {
    CHECK_THROWS_AS(ExperimentConfig::from_json_text(j.dump()), std::exception);
  };

  {
    json j = base_config();
    j["modelz"] = json::object();
    expect_throws(j);
  }
  {
    json j = base_config();
    j["model"]["dropout"] = 0.1;
    CHECK_THROWS_WITH_AS(parse(j), "config: unknown key \"dropout\" in section model",
                         std::runtime_error);
  }
  {
    json j = base_config();
    j["snlp"]["damping"] = 1;
    expect_throws(j);
  }
  {
    json j = base_config();
    j["eval"]["batch"] = 1;
    expect_throws(j);
  }
  {
    json j = base_config();
    j["model"].erase("seed");
    CHECK_THROWS_WITH_AS(parse(j), "config: missing key \"seed\" in section model",
                         std::runtime_error);
  }
  for (const char* key : {"plan", "iterations", "surrogate", "init"}) {
    json j = base_config();
    j["snlp"].erase(key);
    expect_throws(j);
  }
  for (const char* key : {"seq_len", "n_eval_tokens", "data_seed", "source"}) {
    json j = base_config();
    j["eval"].erase(key);
    expect_throws(j);
  }
  {
    json j = base_config();
    j.erase("eval");
    expect_throws(j);
  }

  // Enumerations and the plan grammar.
  {
    json j = base_config();
    j["model"]["variant"] = "std";
    expect_throws(j);
  }
  {
    json j = base_config();
    j["snlp"]["surrogate"] = "dense";
    expect_throws(j);
  }
  {
    json j = base_config();
    j["snlp"]["init"] = "H0";
    expect_throws(j);
  }
  {
    json j = base_config();
    j["eval"]["source"] = "book";
    expect_throws(j);
  }
  {
    json j = base_config();
    j["snlp"]["plan"] = "4x1";
    expect_throws(j);
  }

  // probe / preheat subsections are all-or-nothing.
  {
    json j = base_config();
    j["snlp"]["probe"] = {{"fd_epsilon", 1e-3}, {"seed", 1}};  // n_probes missing
    expect_throws(j);
  }
  {
    json j = base_config();
    j["snlp"]["preheat"] = {{"rank", 2}, {"seed", 1}};  // tokens missing
    expect_throws(j);
  }

  // Range checks applied after parsing.
  {
    json j = base_config();
    j["eval"]["seq_len"] = 1;
    expect_throws(j);
  }
  {
    json j = base_config();
    j["eval"]["seq_len"] = 64;  // > max_seq_len 48
    expect_throws(j);
  }
  {
    json j = base_config();
    j["eval"]["n_eval_tokens"] = 4;  // < seq_len
    expect_throws(j);
  }
  {
    json j = base_config();
    j["ssd"] = {{"block_size", 0}};
    expect_throws(j);
  }
  {
    json j = base_config();
    j["jd"] = {{"window", 0}};
    expect_throws(j);
  }
  {
    json j = base_config();
    j["ablation"] = {{"ordering_seed", 1}, {"ordering_mode", "sideways"}};
    expect_throws(j);
  }
  {
    json j = base_config();
    j["ablation"] = {{"ordering_seed", 1}, {"n_shuffles", -1}};
    expect_throws(j);
  }
  {
    json j = base_config();
    j["ablation"] = {{"n_shuffles", 2}};  // ordering_seed required
    expect_throws(j);
  }

  // Cross-field validation runs against the model.
  {
    json j = base_config();
    j["snlp"]["surrogate"] = "hcn";  // needs the multi-stream variant
    expect_throws(j);
  }
  {
    json j = base_config();
    j["snlp"]["plan"] = "5xF1";  // deeper than the model
    expect_throws(j);
  }

  CHECK_THROWS_AS(ExperimentConfig::load((scratch_dir() / "missing.json").string()),
                  std::runtime_error);
  // load() reads the same grammar from disk.
  const std::string cfg_path = scratch_file("cfg.json");
  spit(cfg_path, base_config().dump());
  const ExperimentConfig from_disk = ExperimentConfig::load(cfg_path);
  CHECK(from_disk.config_hash == parse(base_config()).config_hash);
}

TEST_CASE("eval_sequences chunks the seeded stream") {
  ExperimentConfig cfg = parse(base_config());
  REQUIRE(cfg.eval.source == "markov");
  const auto seqs = eval_sequences(cfg);
  REQUIRE(seqs.size() == 3);
  const std::vector<int> stream = markov_token_stream(
      cfg.eval.n_eval_tokens, cfg.model.vocab_size, cfg.eval.data_seed);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(seqs[i].size() == 8);
    for (int t = 0; t < 8; ++t) CHECK(seqs[i][t] == stream[i * 8 + t]);
  }
  // A partial trailing chunk is dropped.
  json j = base_config();
  j["eval"]["n_eval_tokens"] = 27;
  CHECK(eval_sequences(parse(j)).size() == 3);
  // Uniform and markov sources disagree, so the switch is live.
  json ju = base_config();
  ju["eval"]["source"] = "uniform";
  CHECK(eval_sequences(parse(ju)).front() != seqs.front());
}

TEST_CASE("checkpoint round-trips bitwise and rejects corruption") {
  for (const char* variant : {"standard", "hc"}) {
    json j = base_config();
    j["model"]["variant"] = variant;
    if (std::string(variant) == "hc") {
      j["model"]["hc_streams"] = 2;
      j["snlp"]["surrogate"] = "hcn";
    }
    const ExperimentConfig cfg = parse(j);
    const ModelWeights w = weights_for(cfg);

    const std::string path = scratch_file(std::string("ckpt_") + variant + ".bin");
    save_checkpoint(w, path);
    const ModelWeights r = load_checkpoint(path);

    CHECK(model_config_to_json(r.config) == model_config_to_json(w.config));
    CHECK(r.token_embedding.data == w.token_embedding.data);
    CHECK(r.lm_head.data == w.lm_head.data);
    CHECK(r.final_norm_gain == w.final_norm_gain);
    REQUIRE(r.layers.size() == w.layers.size());
    CHECK(r.layers[0].wq.data == w.layers[0].wq.data);
    CHECK(r.layers[0].w_down.data == w.layers[0].w_down.data);
    if (std::string(variant) == "hc") {
      CHECK(r.layers[0].h_res_attn.data == w.layers[0].h_res_attn.data);
      CHECK(r.layers[0].h_post_mlp.data == w.layers[0].h_post_mlp.data);
    }

    // Saving the identical weights reproduces the file byte for byte.
    const std::string path_b = scratch_file(std::string("ckpt_b_") + variant + ".bin");
    save_checkpoint(w, path_b);
    CHECK(file_content_hash(path) == file_content_hash(path_b));
    CHECK(slurp(path) == slurp(path_b));
  }

  // Corruption cases use the standard-variant file.
  const ExperimentConfig cfg = parse(base_config());
  const ModelWeights w = weights_for(cfg);
  const std::string path = scratch_file("ckpt_corrupt.bin");
  save_checkpoint(w, path);
  const std::string good = slurp(path);
  REQUIRE(good.size() > 64);

  {
    std::string bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(path),
                         doctest::Contains("bad magic at byte offset 0"), std::runtime_error);
  }
  {
    spit(path, good.substr(0, 3));  // shorter than the magic
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"),
                         std::runtime_error);
  }
  {
    spit(path, good.substr(0, 9));  // inside the length field
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated length field"),
                         std::runtime_error);
  }
  {
    spit(path, good.substr(0, 20));  // inside the config JSON
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated config JSON"),
                         std::runtime_error);
  }
  {
    spit(path, good.substr(0, good.size() - 7));  // mid-float in the last array
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated while reading"),
                         std::runtime_error);
  }
  {
    spit(path, good + "abc");
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("3 trailing bytes"),
                         std::runtime_error);
  }
  // Arbitrary truncation points always fail cleanly, never crash.
  for (std::size_t cut : {std::size_t(6), std::size_t(14), std::size_t(40), good.size() - 1}) {
    spit(path, good.substr(0, cut));
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }

  CHECK_THROWS_AS(model_config_from_json("{\"bogus\":1}"), std::invalid_argument);
  CHECK_THROWS_AS(model_config_from_json("not json"), std::invalid_argument);
  // Canonical serialization is a fixed point of parse + print.
  const std::string canon = model_config_to_json(w.config);
  CHECK(model_config_to_json(model_config_from_json(canon)) == canon);
}

TEST_CASE("require_model_match compares config against checkpoint weights") {
  const ExperimentConfig cfg = parse(base_config());
  const ModelWeights w = weights_for(cfg);
  CHECK_NOTHROW(require_model_match(cfg, w));
  json j = base_config();
  j["model"]["vocab_size"] = 32;
  CHECK_THROWS_AS(require_model_match(parse(j), w), std::runtime_error);
}

TEST_CASE("run_ppl emits one complete row; exact solves zero the deltas") {
  const ExperimentConfig cfg = parse(base_config());
  const ModelWeights w = weights_for(cfg);
  const auto rows = run_ppl(cfg, w);
  REQUIRE(rows.size() == 1);
  const MetricsRow& r = rows[0];

  CHECK(cell(r, "command") == "run-ppl");
  CHECK(cell(r, "mode") == "ppl");
  CHECK(cell(r, "case") == "eval");
  CHECK(cell(r, "status") == "ok");
  CHECK(cell(r, "config_hash") == cfg.config_hash);
  CHECK(cell(r, "version") == kArtifactVersion);
  CHECK(cell(r, "variant") == "standard");
  CHECK(cell(r, "n_layers") == "4");
  CHECK(cell(r, "d_model") == "16");
  CHECK(cell(r, "plan") == "4xF1");
  CHECK(cell(r, "prefix_len") == "0");
  CHECK(cell(r, "iterations") == "4");
  CHECK(cell(r, "surrogate") == "idn");
  CHECK(cell(r, "init") == "h0");
  CHECK(cell(r, "elk_lambda") == "0");
  CHECK(cell(r, "source") == "markov");
  CHECK(cell(r, "seq_len") == "8");
  CHECK(cell(r, "n_eval_tokens") == "24");

  // K = N with the identity surrogate reproduces the sequential pass bitwise,
  // so both perplexities print identically and the comparisons are perfect.
  CHECK(cell(r, "seq_ppl") == cell(r, "snlp_ppl"));
  CHECK(cell(r, "delta_ppl") == "0");
  CHECK(cell(r, "top1_match") == "1");
  CHECK(cell(r, "logit_cosine") == "1");
  CHECK(cell(r, "ar_match") == "1");
  CHECK(cell(r, "residual_final") == "0");
  CHECK(cell(r, "speedup_charged") == "1");
  CHECK(cell(r, "speedup_uncharged") == "1");
  CHECK(cell(r, "speedup_formula") == "4/(0+4*1+0)=1");
  // 3 sequences x (0 prefix blocks + (K+1) sweeps x 4 active units).
  CHECK(cell(r, "block_forwards") == "60");
  CHECK(cell(r, "probe_forwards") == "0");
  CHECK(!has_cell(r, "diverged_iteration"));
  CHECK(!has_cell(r, "alpha"));
  CHECK(!has_cell(r, "window"));

  // Byte-reproducibility: a second run appends an identical file body.
  const std::string pa = scratch_file("ppl_a.csv");
  const std::string pb = scratch_file("ppl_b.csv");
  append_rows(pa, rows);
  append_rows(pb, run_ppl(cfg, w));
  CHECK(slurp(pa) == slurp(pb));
}

TEST_CASE("run_ppl at K=0 matches the early-exit ablation at the anchor depth") {
  json j = base_config();
  j["snlp"]["iterations"] = 0;
  const ExperimentConfig cfg = parse(j);
  const ModelWeights w = weights_for(cfg);
  const auto rows = run_ppl(cfg, w);
  REQUIRE(rows.size() == 1);
  CHECK(cell(rows[0], "iterations") == "0");
  // Zero sweeps from a zero-depth prefix: the critical path is empty.
  CHECK(cell(rows[0], "speedup_formula") == "4/(0+0*1+0)=inf");

  json ja = base_config();
  ja["ablation"] = {{"ordering_seed", 1}};
  const ExperimentConfig cfg_a = parse(ja);
  const auto exit_rows = run_ablate(cfg_a, w, "early-exit");
  REQUIRE(exit_rows.size() == 5);  // S = 0..4
  // K=0 from anchor h_0 reads out the S=0 truncated state exactly.
  CHECK(cell(rows[0], "snlp_ppl") == cell(row_named(exit_rows, "S=0"), "snlp_ppl"));
  // Full-depth early exit is the sequential model.
  const MetricsRow& full = row_named(exit_rows, "S=4");
  CHECK(cell(full, "delta_ppl") == "0");
  CHECK(cell(full, "top1_match") == "1");
  CHECK(cell(full, "logit_cosine") == "1");
  for (int s = 0; s <= 4; ++s) {
    const MetricsRow& r = row_named(exit_rows, "S=" + std::to_string(s));
    CHECK(cell(r, "mode") == "early-exit");
    CHECK(cell(r, "prefix_len") == std::to_string(s));
  }
  // Shallower exits really are lossy on this stream.
  CHECK(cell(row_named(exit_rows, "S=0"), "delta_ppl") != "0");
}

TEST_CASE("run_ppl reports divergence without throwing") {
  const ExperimentConfig cfg = parse(base_config());
  ModelWeights w = weights_for(cfg);
  w.layers[2].wq.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const auto rows = run_ppl(cfg, w);
  REQUIRE(rows.size() == 1);
  CHECK(cell(rows[0], "status") == "diverged");
  CHECK(cell(rows[0], "diverged_iteration") == "0");
  CHECK(cell(rows[0], "snlp_ppl") == "nan");
}

TEST_CASE("ordering ablation emits three rows per ordering entry") {
  json j = base_config();
  j["ablation"] = {{"ordering_seed", 77}, {"n_shuffles", 2}};
  const ExperimentConfig cfg = parse(j);
  const ModelWeights w = weights_for(cfg);
  const auto rows = run_ablate(cfg, w, "ordering");
  REQUIRE(rows.size() == 12);  // (forward + reversed + 2 shuffles) x 3

  for (const char* entry : {"forward", "reversed", "shuffle-0", "shuffle-1"}) {
    for (const char* kind : {"seqperm", "snlp-K1", "snlp-K4"}) {
      const MetricsRow& r = row_named(rows, std::string(entry) + "/" + kind);
      CHECK(cell(r, "mode") == "ordering");
    }
  }
  // Forward order is the natural composition: the permuted sequential pass
  // matches the baseline, and K=N under that order is exact.
  CHECK(cell(row_named(rows, "forward/seqperm"), "delta_ppl") == "0");
  CHECK(cell(row_named(rows, "forward/seqperm"), "top1_match") == "1");
  CHECK(cell(row_named(rows, "forward/snlp-K4"), "delta_ppl") == "0");
  // Reversed composition genuinely changes the function at this gain.
  CHECK(cell(row_named(rows, "reversed/seqperm"), "delta_ppl") != "0");
  // seqperm rows carry only the comparison columns.
  CHECK(!has_cell(row_named(rows, "forward/seqperm"), "residual_final"));
  CHECK(has_cell(row_named(rows, "forward/snlp-K1"), "residual_final"));

  // Deterministic: the shuffle schedule comes from ordering_seed alone.
  const auto rows2 = run_ablate(cfg, w, "ordering");
  REQUIRE(rows2.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows2[i].values == rows[i].values);

  // Mode filter narrows to one entry's rows.
  json jr = j;
  jr["ablation"]["ordering_mode"] = "reversed";
  const auto only_rev = run_ablate(parse(jr), w, "ordering");
  REQUIRE(only_rev.size() == 3);
  for (const auto& r : only_rev) CHECK(cell(r, "case").rfind("reversed/", 0) == 0);

  // An empty suffix leaves nothing to permute.
  json j0 = j;
  j0["snlp"]["plan"] = "0xF1";
  CHECK_THROWS_AS(run_ablate(parse(j0), w, "ordering"), std::exception);
}

TEST_CASE("propagation ablation sweeps masks, sweeps, and surrogates") {
  json j = base_config();
  j["ablation"] = {{"ordering_seed", 1}};
  const ExperimentConfig cfg = parse(j);
  const ModelWeights w = weights_for(cfg);
  const auto rows = run_ablate(cfg, w, "propagation");
  // m in 1..4, k in 1..4, surrogates {idn, none}.
  REQUIRE(rows.size() == 32);
  CHECK(cell(row_named(rows, "last-2/K3/idn"), "mode") == "propagation");
  CHECK(cell(row_named(rows, "last-2/K3/idn"), "surrogate") == "idn");
  CHECK(cell(row_named(rows, "last-1/K1/none"), "surrogate") == "none");

  // Without corrections, units below the sweep horizon cannot influence the
  // top unit: masks keeping at least K suffix units active agree exactly.
  CHECK(cell(row_named(rows, "last-3/K2/none"), "snlp_ppl") ==
        cell(row_named(rows, "last-4/K2/none"), "snlp_ppl"));
  CHECK(cell(row_named(rows, "last-1/K1/none"), "snlp_ppl") ==
        cell(row_named(rows, "last-4/K1/none"), "snlp_ppl"));
  // Identity corrections leak information across the mask boundary.
  CHECK(cell(row_named(rows, "last-2/K1/idn"), "snlp_ppl") !=
        cell(row_named(rows, "last-4/K1/idn"), "snlp_ppl"));

  // A config already on the baseline surrogate runs it once, not twice.
  json jn = j;
  jn["snlp"]["surrogate"] = "none";
  CHECK(run_ablate(parse(jn), w, "propagation").size() == 16);

  // Explicitly disabled modes refuse to run.
  json jd_ = j;
  jd_["ablation"]["propagation"] = false;
  CHECK_THROWS_WITH_AS(run_ablate(parse(jd_), w, "propagation"),
                       "config: ablation.propagation is disabled", std::runtime_error);
  json je = j;
  je["ablation"]["early_exit"] = false;
  CHECK_THROWS_WITH_AS(run_ablate(parse(je), w, "early-exit"),
                       "config: ablation.early_exit is disabled", std::runtime_error);
  CHECK_THROWS_AS(run_ablate(cfg, w, "no-such-mode"), std::runtime_error);
}

TEST_CASE("substitution and jacobian ablations emit per-layer rows") {
  json j = base_config();
  j["ablation"] = {{"ordering_seed", 1}};
  j["snlp"]["probe"] = {{"fd_epsilon", 1e-3}, {"n_probes", 4}, {"seed", 31}};
  const ExperimentConfig cfg = parse(j);
  const ModelWeights w = weights_for(cfg);

  const auto sub = run_ablate(cfg, w, "substitution");
  REQUIRE(sub.size() == 4);  // layers S+1..L with S=0
  for (int l = 1; l <= 4; ++l) {
    const MetricsRow& r = row_named(sub, "layer-" + std::to_string(l));
    CHECK(cell(r, "mode") == "substitution");
    CHECK(has_cell(r, "eps_abs"));
    CHECK(has_cell(r, "eps_cum"));
    CHECK(has_cell(r, "delta_g"));
  }
  // At the anchor depth the first substituted input is the true input, so the
  // first layer's error is exactly zero.
  CHECK(cell(row_named(sub, "layer-1"), "eps_abs") == "0");
  CHECK(cell(row_named(sub, "layer-2"), "eps_abs") != "0");

  const auto jac = run_ablate(cfg, w, "jacobian");
  REQUIRE(jac.size() == 4);
  for (int l = 1; l <= 4; ++l) {
    const MetricsRow& r = row_named(jac, "layer-" + std::to_string(l));
    CHECK(cell(r, "mode") == "jacobian");
    const double sigma = std::stod(cell(r, "sigma_max"));
    const double frob = std::stod(cell(r, "frob_norm"));
    const double amp = std::stod(cell(r, "amplification"));
    CHECK(sigma > 0.0);
    CHECK(frob >= sigma * 0.5);
    CHECK(amp > 0.0);
  }
  // Deterministic for a fixed probe seed.
  const auto jac2 = run_ablate(cfg, w, "jacobian");
  REQUIRE(jac2.size() == jac.size());
  for (std::size_t i = 0; i < jac.size(); ++i) CHECK(jac2[i].values == jac[i].values);
}

TEST_CASE("run_ssd emits per-prompt rows plus a pooled row and stays lossless") {
  json j = base_config();
  j["ssd"] = {{"block_size", 3}, {"max_tokens", 6}, {"n_prompts", 2}, {"prefill", 4}};
  j["snlp"]["iterations"] = 1;
  const ExperimentConfig cfg = parse(j);
  const ModelWeights w = weights_for(cfg);
  const auto rows = run_ssd(cfg, w);
  REQUIRE(rows.size() == 3);

  long long rounds_sum = 0;
  for (const char* name : {"prompt-0", "prompt-1"}) {
    const MetricsRow& r = row_named(rows, name);
    CHECK(cell(r, "command") == "run-ssd");
    CHECK(cell(r, "mode") == "ssd");
    CHECK(cell(r, "block_size") == "3");
    CHECK(cell(r, "lossless") == "true");
    CHECK(has_cell(r, "alpha"));
    CHECK(has_cell(r, "ideal_speedup"));
    CHECK(has_cell(r, "tokens_per_round_formula"));
    rounds_sum += std::stoll(cell(r, "rounds"));
  }
  const MetricsRow& pooled = row_named(rows, "pooled");
  CHECK(cell(pooled, "lossless") == "true");
  CHECK(std::stoll(cell(pooled, "rounds")) == rounds_sum);
  CHECK(cell(pooled, "fallback_rounds") == "0");
  // Drafter critical path: empty prefix plus one sweep of one-layer units.
  CHECK(cell(pooled, "speedup_charged") == "4");
  CHECK(cell(pooled, "speedup_formula") == "4/(0+1*1+0)=4");

  // The prompt budget must fit the context window up front.
  json jb = j;
  jb["ssd"]["prefill"] = 40;  // 40 + 6 + 3 > 48
  CHECK_THROWS_AS(run_ssd(parse(jb), w), std::exception);
}

TEST_CASE("run_jd emits per-prompt rows plus a pooled row and matches greedy") {
  json j = base_config();
  j["jd"] = {{"window", 3}, {"max_tokens", 6}, {"n_prompts", 2}, {"prefill", 4}};
  const ExperimentConfig cfg = parse(j);
  const ModelWeights w = weights_for(cfg);
  const auto rows = run_jd(cfg, w);
  REQUIRE(rows.size() == 3);

  long long forwards_sum = 0;
  for (const char* name : {"prompt-0", "prompt-1"}) {
    const MetricsRow& r = row_named(rows, name);
    CHECK(cell(r, "command") == "run-jd");
    CHECK(cell(r, "mode") == "jd");
    CHECK(cell(r, "window") == "3");
    CHECK(cell(r, "jd_match") == "1");
    CHECK(std::stod(cell(r, "jd_accept_per_iter")) >= 1.0);
    CHECK(std::stod(cell(r, "jd_iters")) >= 1.0);
    forwards_sum += std::stoll(cell(r, "jd_forward_passes"));
  }
  const MetricsRow& pooled = row_named(rows, "pooled");
  CHECK(cell(pooled, "jd_match") == "1");
  CHECK(std::stoll(cell(pooled, "jd_forward_passes")) == forwards_sum);
  // Pooled acceptance is total tokens over total forwards.
  const double accept = std::stod(cell(pooled, "jd_accept_per_iter"));
  CHECK(accept == doctest::Approx(12.0 / double(forwards_sum)).epsilon(1e-9));

  json jb = j;
  jb["jd"]["prefill"] = 46;  // 46 + 6 > 48
  CHECK_THROWS_AS(run_jd(parse(jb), w), std::exception);
}

TEST_CASE("run_ppl accepts the calibrated low-rank init end to end") {
  json j = base_config();
  j["snlp"]["init"] = "preheat";
  j["snlp"]["preheat"] = {{"rank", 2}, {"tokens", 24}, {"seed", 9}};
  const ExperimentConfig cfg = parse(j);
  const ModelWeights w = weights_for(cfg);
  const auto rows = run_ppl(cfg, w);
  REQUIRE(rows.size() == 1);
  CHECK(cell(rows[0], "init") == "preheat");
  CHECK(cell(rows[0], "status") == "ok");
  // K = N stays exact no matter where the iteration starts.
  CHECK(cell(rows[0], "delta_ppl") == "0");
}
