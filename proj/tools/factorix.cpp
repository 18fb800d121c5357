#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "factorix/checkpoint.hpp"
#include "factorix/diagnostics.hpp"
#include "factorix/error.hpp"
#include "factorix/evalharness.hpp"
#include "factorix/experiment.hpp"
#include "factorix/probcore.hpp"
#include "factorix/stats.hpp"
#include "factorix/svg_plot.hpp"
#include "factorix/tokenize.hpp"

namespace fs = std::filesystem;
using namespace factorix;

namespace {

constexpr std::uint64_t kAppendixSeed = 3;

// Thrown by commands that completed but must report failure through the exit code.
struct ExitCode {
  int code;
};

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write " + path.string());
  return out;
}

// --- config / tokenizer / pack / train ------------------------------------------------------

void cmd_print_defaults() { std::cout << experiment::ExperimentConfig::defaults().render(); }

struct TokenizerArgs {
  std::vector<fs::path> corpus;
  int vocab_size = 512;
  fs::path out = "tokenizer.txt";
};

void cmd_tokenizer_train(const TokenizerArgs& a) {
  const std::string text = tokenize::read_corpus(a.corpus);
  require(!text.empty(), "corpus is empty");
  const auto tok = tokenize::Tokenizer::train(text, a.vocab_size);
  tok.save(a.out);
  std::cout << "tokenizer " << a.out.string() << " vocab " << tok.vocab_size() << " hash " << tok.hash() << "\n";
}

struct PackArgs {
  fs::path tokenizer;
  std::vector<fs::path> corpus;
  int window = 64;
  double validation_fraction = 0.1;
  std::uint64_t split_seed = 1;
  fs::path out = "data";
};

void cmd_pack(const PackArgs& a) {
  const auto tok = tokenize::Tokenizer::load(a.tokenizer);
  const auto ids = tok.encode(tokenize::read_corpus(a.corpus));
  auto packed = tokenize::pack_corpus(ids, static_cast<std::uint32_t>(a.window),
                                      static_cast<std::uint32_t>(tok.vocab_size()), tok.hash());
  for (const auto& w : packed.warnings) std::cerr << "warning: " << w << "\n";
  auto [train, val] = tokenize::split_dataset(packed.dataset, a.validation_fraction, a.split_seed);
  fs::create_directories(a.out);
  tokenize::save_dataset(train, a.out / "train.pkds");
  tokenize::save_dataset(val, a.out / "validation.pkds");
  std::cout << "train " << train.size() << " rows, validation " << val.size() << " rows, discarded "
            << packed.discarded_tokens << " tokens\n";
}

struct TrainArgs {
  fs::path config;
  std::vector<std::string> orderings;
  std::vector<std::uint64_t> seeds;
  bool force = false;
  bool quiet = false;
};

void cmd_train(const TrainArgs& a) {
  const auto cfg = experiment::ExperimentConfig::load(a.config);
  cfg.validate(true);
  const auto orderings = a.orderings.empty() ? cfg.orderings : a.orderings;
  const auto seeds = a.seeds.empty() ? cfg.seeds : a.seeds;
  for (const auto& o : orderings) ordering::parse_ordering(o, cfg.data.window - 1);
  for (const auto& o : orderings) {
    for (const auto seed : seeds) {
      experiment::ProgressFn progress;
      if (!a.quiet) {
        progress = [&](int step, int total, double nll) {
          if (step % 50 == 0 || step + 1 == total)
            std::cerr << o << " seed " << seed << ": step " << step + 1 << "/" << total << " nll " << nll << "\n";
        };
      }
      const auto run = experiment::run_training(cfg, o, seed, a.force, progress);
      std::cout << run.dir.string() << (run.reused ? " (reused)" : "") << " checkpoint "
                << run.manifest.at("checkpoint_hash").get<std::string>() << "\n";
    }
  }
}

// --- eval ppl --------------------------------------------------------------------------------

struct EvalArgs {
  fs::path run;
  std::string split = "validation";
  std::string ordering;
  fs::path out;
};

void cmd_eval_ppl(const EvalArgs& a) {
  const auto run = experiment::load_run(a.run);
  const auto data = experiment::load_run_dataset(run, tokenize::parse_split(a.split));
  const auto perm = a.ordering.empty() ? run.ordering : ordering::parse_ordering(a.ordering, run.ordering.size());
  const auto records = eval::eval_dataset_ppl(run.checkpoint, data, perm);
  const fs::path out = a.out.empty() ? a.run / ("ppl-" + a.split + ".csv") : a.out;
  eval::write_ppl_csv(records, out);
  double total = 0;
  for (const auto& r : records) total += r.mean_nll;
  std::cout << out.string() << ": " << records.size() << " sequences, mean ppl "
            << std::exp(total / static_cast<double>(records.size())) << "\n";
}

// --- diag ------------------------------------------------------------------------------------

struct DiagArgs {
  std::vector<std::string> inputs;
  std::string metric;
  fs::path out = "diag";
  int sequences = 64;
  bool init = false;
  bool no_timestamp = false;
};

void require_compatible(const std::vector<experiment::LoadedRun>& runs, bool same_shape) {
  for (std::size_t i = 1; i < runs.size(); ++i) {
    const auto& a = runs[0];
    const auto& b = runs[i];
    require(a.checkpoint.config.window == b.checkpoint.config.window,
            "incompatible runs: " + a.label + " and " + b.label + " use different windows");
    require(a.manifest.at("tokenizer_hash") == b.manifest.at("tokenizer_hash") &&
                a.manifest.at("validation_dataset_hash") == b.manifest.at("validation_dataset_hash"),
            "incompatible runs: " + a.label + " and " + b.label + " differ in tokenizer or dataset provenance");
    if (same_shape) {
      auto shape = a.checkpoint.config;
      shape.seed = b.checkpoint.config.seed;
      require(shape == b.checkpoint.config,
              "incompatible runs: " + a.label + " and " + b.label + " are not the same model size");
    }
  }
}

std::vector<model::AttentionRecord> attention_of(const experiment::LoadedRun& run, int sequences) {
  const auto data = experiment::load_run_dataset(run);
  std::vector<model::AttentionRecord> out;
  for (const auto& t : experiment::trace_rows(run.checkpoint, data, run.ordering, sequences))
    out.push_back(model::attention_record(t));
  return out;
}

void diag_entropy(const std::vector<experiment::LoadedRun>& runs, const DiagArgs& a) {
  plot::LinePlot plot{"Normalized attention entropy", "context size", "normalized entropy", {}, 0.0, 1.0};
  auto csv = open_out(a.out / "entropy.csv");
  csv << "run,layer,context_size,h_norm\n";
  csv << std::setprecision(17);
  auto summary = open_out(a.out / "entropy_summary.csv");
  summary << "run,layer,mean_h_norm_context_ge_8\n" << std::setprecision(17);
  for (const auto& run : runs) {
    const auto profile = diagnostics::attention_entropy(attention_of(run, a.sequences));
    for (std::size_t l = 0; l < profile.layers.size(); ++l) {
      plot::Series s{run.label + " L" + std::to_string(profile.layers[l]), {}, {}};
      for (int i = 1; i <= profile.length; ++i) {
        const double v = profile.values[l][static_cast<std::size_t>(i - 1)];
        csv << run.label << ',' << profile.layers[l] << ',' << i << ',' << v << '\n';
        s.x.push_back(i);
        s.y.push_back(v);
      }
      summary << run.label << ',' << profile.layers[l] << ','
              << diagnostics::mean_entropy(profile, static_cast<int>(l), 8) << '\n';
      plot.series.push_back(std::move(s));
    }
  }
  plot::write_svg(plot, a.out / "entropy.svg", !a.no_timestamp);
}

void diag_rank(const std::vector<experiment::LoadedRun>& runs, const DiagArgs& a) {
  plot::LinePlot plot{"Normalized attention rank by distance", "query-key distance", "normalized rank", {}, 0.0, 1.0};
  auto csv = open_out(a.out / "rank.csv");
  csv << "run,layer,distance,r_norm\n" << std::setprecision(17);
  for (const auto& run : runs) {
    const auto profile = diagnostics::attention_rank_bias(attention_of(run, a.sequences));
    for (std::size_t l = 0; l < profile.layers.size(); ++l) {
      plot::Series s{run.label + " L" + std::to_string(profile.layers[l]), {}, {}};
      for (std::size_t d = 0; d < profile.values[l].size(); ++d) {
        csv << run.label << ',' << profile.layers[l] << ',' << d << ',' << profile.values[l][d] << '\n';
        s.x.push_back(static_cast<double>(d));
        s.y.push_back(profile.values[l][d]);
      }
      plot.series.push_back(std::move(s));
    }
  }
  plot::write_svg(plot, a.out / "rank.svg", !a.no_timestamp);
}

void diag_rsa(const std::vector<experiment::LoadedRun>& runs, const DiagArgs& a) {
  require(!runs.empty(), "rsa needs at least one run");
  require_compatible(runs, true);
  std::vector<std::vector<model::HiddenRecord>> hidden;
  for (const auto& run : runs) {
    const auto data = experiment::load_run_dataset(run);
    std::vector<model::HiddenRecord> recs;
    for (const auto& t : experiment::trace_rows(run.checkpoint, data, run.ordering, a.sequences))
      recs.push_back(model::hidden_record(t));
    hidden.push_back(std::move(recs));
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (runs.size() == 1) pairs.emplace_back(0, 0);
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (std::size_t j = i + 1; j < runs.size(); ++j) pairs.emplace_back(i, j);

  std::vector<diagnostics::RsaRow> rows;
  plot::LinePlot plot{"Representational similarity by layer", "layer", "RSA (Spearman rho)", {}, -1.0, 1.0};
  for (const auto& [i, j] : pairs) {
    const std::string name = runs[i].label + "~" + runs[j].label;
    const std::size_t n = std::min(hidden[i].size(), hidden[j].size());
    std::vector<double> mean;
    for (std::size_t s = 0; s < n; ++s) {
      const auto rho = diagnostics::rsa_by_layer(hidden[i][s], runs[i].ordering, hidden[j][s], runs[j].ordering);
      if (mean.empty()) mean.assign(rho.size(), 0.0);
      for (std::size_t l = 0; l < rho.size(); ++l) mean[l] += rho[l] / static_cast<double>(n);
    }
    plot::Series series{name, {}, {}};
    for (std::size_t l = 0; l < mean.size(); ++l) {
      rows.push_back({static_cast<int>(l), name, mean[l]});
      series.x.push_back(static_cast<double>(l));
      series.y.push_back(mean[l]);
    }
    plot.series.push_back(std::move(series));
  }
  fs::create_directories(a.out);
  diagnostics::write_rsa_csv(rows, a.out / "rsa.csv");
  plot::write_svg(plot, a.out / "rsa.svg", !a.no_timestamp);
}

// Stats inputs are run directories (evaluated here) or ppl CSVs from `eval ppl`.
void diag_stats(const std::vector<std::string>& inputs, const DiagArgs& a) {
  require(inputs.size() >= 2, "stats needs at least two runs or ppl CSVs");
  std::vector<std::string> names;
  std::vector<std::vector<eval::PerplexityRecord>> records;
  std::vector<experiment::LoadedRun> runs;
  for (const auto& in : inputs) {
    if (fs::is_regular_file(in)) {
      names.push_back(fs::path(in).stem().string());
      records.push_back(eval::read_ppl_csv(in));
    } else {
      runs.push_back(experiment::load_run(in, a.init));
      const auto& run = runs.back();
      const auto data = experiment::load_run_dataset(run);
      names.push_back(run.label);
      records.push_back(eval::eval_dataset_ppl(run.checkpoint, data, run.ordering));
      eval::write_ppl_csv(records.back(), a.out / ("ppl-" + run.label + ".csv"));
    }
  }
  require_compatible(runs, false);
  std::vector<diagnostics::StatsRow> rows;
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (std::size_t j = i + 1; j < records.size(); ++j) {
      require(records[i].size() == records[j].size(),
              "incompatible runs: " + names[i] + " and " + names[j] + " cover different sequence counts");
      std::vector<double> x, y;
      for (std::size_t k = 0; k < records[i].size(); ++k) {
        require(records[i][k].id == records[j][k].id,
                "incompatible runs: sequence ids differ between " + names[i] + " and " + names[j]);
        x.push_back(records[i][k].perplexity);
        y.push_back(records[j][k].perplexity);
      }
      rows.push_back({names[i] + "~" + names[j], stats::compare(x, y)});
    }
  }
  fs::create_directories(a.out);
  diagnostics::write_stats_csv(rows, a.out / "stats.csv");
}

void cmd_diag(const DiagArgs& a) {
  fs::create_directories(a.out);
  if (a.metric == "stats") {
    diag_stats(a.inputs, a);
  } else {
    std::vector<experiment::LoadedRun> runs;
    for (const auto& in : a.inputs) runs.push_back(experiment::load_run(in, a.init));
    if (a.metric == "entropy" || a.metric == "rank") require_compatible(runs, false);
    if (a.metric == "entropy") diag_entropy(runs, a);
    else if (a.metric == "rank") diag_rank(runs, a);
    else diag_rsa(runs, a);
  }
  std::cout << "wrote " << a.metric << " outputs to " << a.out.string() << "\n";
}

// --- bench -----------------------------------------------------------------------------------

struct BenchArgs {
  std::vector<fs::path> runs;
  fs::path items;
  fs::path reference;
  fs::path oracle;
  std::string ordering = "forward";
  bool token_ids = false;
  fs::path out = "bench";
};

void cmd_bench(const BenchArgs& a) {
  require(!a.runs.empty() || !a.oracle.empty(), "bench needs run directories or --oracle");
  std::vector<experiment::LoadedRun> runs;
  for (const auto& r : a.runs) runs.push_back(experiment::load_run(r));
  require_compatible(runs, false);

  // All runs share one tokenizer, so items are encoded once.
  std::optional<tokenize::Tokenizer> tok;
  if (!runs.empty() && !a.token_ids) {
    const fs::path tpath = runs[0].dir / runs[0].manifest.at("data_dir").get<std::string>() / "tokenizer.txt";
    require(fs::exists(tpath), "run " + runs[0].label + " has no tokenizer; pass --token-ids");
    tok = tokenize::Tokenizer::load(tpath);
    require(tok->hash() == runs[0].manifest.at("tokenizer_hash").get<std::string>(),
            "provenance mismatch: tokenizer file differs from the one recorded for " + runs[0].label);
  }
  const auto items = eval::load_items(a.items, tok ? &*tok : nullptr);
  std::optional<eval::NamedVector> reference;
  if (!a.reference.empty()) reference = eval::align_reference(eval::read_reference_csv(a.reference), items);

  fs::create_directories(a.out);
  std::vector<eval::NamedVector> vectors;
  auto score = [&](const eval::SequenceScorer& scorer, const std::string& name, const ordering::Permutation& perm) {
    const auto result = eval::two_afc(scorer, items, perm);
    result.write_csv(a.out / ("2afc-" + name + ".csv"));
    result.write_summary_csv(a.out / ("accuracy-" + name + ".csv"));
    std::cout << name << ": accuracy " << result.accuracy << " over " << result.rows.size() << " items ("
              << result.flagged << " flagged)\n";
    vectors.push_back({name, result.difficulty()});
  };
  if (!a.oracle.empty()) {
    const eval::TabularScorer scorer(probcore::read_distribution(a.oracle));
    score(scorer, "oracle", ordering::parse_ordering(a.ordering, scorer.max_length()));
  }
  for (const auto& run : runs) score(eval::ModelScorer(run.checkpoint), run.label, run.ordering);
  if (vectors.size() + (reference ? 1 : 0) >= 2)
    eval::difficulty_correlation(vectors, reference).write_csv(a.out / "correlations.csv");
}

// --- items -----------------------------------------------------------------------------------

struct OracleItemsArgs {
  fs::path dist;
  std::vector<std::uint64_t> random;
  std::size_t count = 100;
  std::uint64_t seed = 1;
  fs::path out = "oracle-items";
};

// Writes distribution.txt and items.tsv: a ground-truth preset for `bench --oracle`.
void cmd_oracle_items(const OracleItemsArgs& a) {
  require(a.dist.empty() != a.random.empty(), "items oracle needs exactly one of --dist, --random V n seed");
  const auto dist = a.dist.empty() ? probcore::TabularDistribution::random(static_cast<int>(a.random[0]),
                                                                           static_cast<int>(a.random[1]), a.random[2])
                                   : probcore::read_distribution(a.dist);
  fs::create_directories(a.out);
  probcore::write_distribution(dist, a.out / "distribution.txt");
  const auto items = eval::make_oracle_items(dist, a.count, a.seed);
  eval::save_items(items, a.out / "items.tsv");
  std::cout << "wrote " << items.size() << " items to " << (a.out / "items.tsv").string() << "\n";
}

// --- verify ----------------------------------------------------------------------------------

struct VerifyArgs {
  fs::path dist;
  std::vector<std::uint64_t> random;
  bool appendix_c = false;
  std::string perms = "all";
  std::optional<double> tol;
  bool drop_bos = false;
  std::uint64_t sample_seed = 0;
  fs::path out;
};

void cmd_verify(const VerifyArgs& a) {
  const int sources = (a.dist.empty() ? 0 : 1) + (a.random.empty() ? 0 : 1) + (a.appendix_c ? 1 : 0);
  require(sources == 1, "verify needs exactly one of --dist, --random V n seed, --appendix-c");
  std::optional<probcore::TabularDistribution> dist;
  std::uint64_t seed = a.sample_seed;
  double tol = a.tol.value_or(1e-9);
  if (!a.dist.empty()) {
    dist = probcore::read_distribution(a.dist);
  } else if (!a.random.empty()) {
    require(a.random.size() == 3, "--random takes V n seed");
    dist = probcore::TabularDistribution::random(static_cast<int>(a.random[0]), static_cast<int>(a.random[1]),
                                                 a.random[2]);
    seed = a.random[2];
  } else {
    dist = probcore::TabularDistribution::random(3, 3, kAppendixSeed);
    seed = kAppendixSeed;
    tol = a.tol.value_or(1e-12);
  }
  const auto seq = probcore::sample_from(*dist, seed);
  const int n = dist->seq_len();

  if (a.drop_bos) {
    const auto p = probcore::negative_control_drop_bos(*dist, seq);
    std::cout << "NEGATIVE-CONTROL: BOS term dropped; factorizations are not expected to agree\n";
    std::cout << std::setprecision(17) << "forward_partial_product " << static_cast<double>(p.forward) << "\n"
              << "backward_partial_product " << static_cast<double>(p.backward) << "\n"
              << "relative_gap " << static_cast<double>(p.relative_gap()) << "\n";
    if (!a.out.empty()) {
      auto out = open_out(a.out);
      out << std::setprecision(17) << "forward_partial_product,backward_partial_product,relative_gap\n"
          << static_cast<double>(p.forward) << ',' << static_cast<double>(p.backward) << ','
          << static_cast<double>(p.relative_gap()) << '\n';
    }
    return;
  }

  std::size_t cap = 0;
  if (a.perms == "all") {
    cap = 1;
    for (int i = 2; i <= n; ++i) cap *= static_cast<std::size_t>(i);
  } else {
    cap = std::stoull(a.perms);
    require(cap >= 2, "--perms must be 'all' or an integer >= 2");
  }
  const auto sigmas = probcore::enumerate_permutations(n, cap, seed);
  const auto report = probcore::verify_invariance(*dist, seq, sigmas, tol);
  if (!a.out.empty()) {
    auto out = open_out(a.out);
    report.write_csv(out);
  } else {
    report.write_csv(std::cout);
  }
  std::cerr << std::setprecision(6) << "checked " << report.checks.size() << " orderings, max relative deviation "
            << static_cast<double>(report.max_rel_dev) << ", tolerance " << tol << ": "
            << (report.passed ? "PASS" : "FAIL") << "\n";
  if (!report.passed) {
    const auto* f = report.first_failure();
    std::cerr << "first failing sigma " << f->sigma_id << ":";
    for (int i = 0; i < f->sigma.size(); ++i) std::cerr << ' ' << f->sigma[i] + 1;
    std::cerr << " (rel_dev " << static_cast<double>(f->rel_dev) << ")\n";
    throw ExitCode{1};
  }
}

// --- export / manifest -----------------------------------------------------------------------

struct ExportArgs {
  fs::path run;
  std::string what = "attention";
  int sequences = 16;
  bool init = false;
  fs::path out;
};

void cmd_export(const ExportArgs& a) {
  const auto run = experiment::load_run(a.run, a.init);
  const auto data = experiment::load_run_dataset(run);
  const auto traces = experiment::trace_rows(run.checkpoint, data, run.ordering, a.sequences);
  if (a.what == "attention") {
    std::vector<model::AttentionRecord> recs;
    for (const auto& t : traces) recs.push_back(model::attention_record(t));
    model::save_attention(recs, a.out);
  } else {
    std::vector<model::HiddenRecord> recs;
    for (const auto& t : traces) recs.push_back(model::hidden_record(t));
    model::save_hidden(recs, a.out);
  }
  std::cout << "wrote " << traces.size() << " records to " << a.out.string() << "\n";
}

void cmd_manifest_diff(const fs::path& a, const fs::path& b) {
  const auto d = experiment::diff_manifests(experiment::load_manifest(a), experiment::load_manifest(b));
  std::cout << d.render();
  const auto inputs = d.differing_inputs();
  std::cerr << "differing inputs:";
  for (const auto& f : inputs) std::cerr << ' ' << f;
  std::cerr << (inputs.empty() ? " none" : "") << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"factorix: factorization-order experiments for small autoregressive transformers"};
  app.require_subcommand(1);

  auto* config = app.add_subcommand("config", "Inspect experiment configuration");
  config->require_subcommand(1);
  config->add_subcommand("print-defaults", "Print every setting with its default value")
      ->callback(cmd_print_defaults);

  auto* tokenizer = app.add_subcommand("tokenizer", "Tokenizer operations");
  tokenizer->require_subcommand(1);
  TokenizerArgs tok_args;
  auto* tok_train = tokenizer->add_subcommand("train", "Train a byte-level BPE tokenizer on forward text");
  tok_train->add_option("--corpus", tok_args.corpus, "Corpus files or directories")->required()->check(CLI::ExistingPath);
  tok_train->add_option("--vocab-size", tok_args.vocab_size, "Total vocabulary size including BOS and bytes");
  tok_train->add_option("--out", tok_args.out, "Output tokenizer file");
  tok_train->callback([&] { cmd_tokenizer_train(tok_args); });

  PackArgs pack_args;
  auto* pack = app.add_subcommand("pack", "Encode and pack a corpus into BOS-prefixed windows");
  pack->add_option("--tokenizer", pack_args.tokenizer)->required()->check(CLI::ExistingFile);
  pack->add_option("--corpus", pack_args.corpus)->required()->check(CLI::ExistingPath);
  pack->add_option("--window", pack_args.window, "Window length including BOS");
  pack->add_option("--validation-fraction", pack_args.validation_fraction);
  pack->add_option("--split-seed", pack_args.split_seed);
  pack->add_option("--out", pack_args.out, "Output directory for train.pkds and validation.pkds");
  pack->callback([&] { cmd_pack(pack_args); });

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train the (ordering, seed) grid of a config");
  train_cmd->add_option("config", train_args.config, "Experiment config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--ordering", train_args.orderings, "Restrict to these orderings");
  train_cmd->add_option("--seed", train_args.seeds, "Restrict to these seeds");
  train_cmd->add_flag("--force", train_args.force, "Retrain even when a verified run exists");
  train_cmd->add_flag("--quiet", train_args.quiet, "No progress output");
  train_cmd->callback([&] { cmd_train(train_args); });

  auto* eval_cmd = app.add_subcommand("eval", "Evaluation");
  eval_cmd->require_subcommand(1);
  EvalArgs eval_args;
  auto* ppl = eval_cmd->add_subcommand("ppl", "Per-sequence perplexity of a run on its dataset");
  ppl->add_option("run", eval_args.run, "Run directory")->required()->check(CLI::ExistingDirectory);
  ppl->add_option("--split", eval_args.split)->check(CLI::IsMember({"train", "validation"}));
  ppl->add_option("--ordering", eval_args.ordering, "Override the run's ordering");
  ppl->add_option("--out", eval_args.out, "Output CSV");
  ppl->callback([&] { cmd_eval_ppl(eval_args); });

  DiagArgs diag_args;
  auto* diag = app.add_subcommand("diag", "Attention, representation and perplexity diagnostics");
  diag->add_option("inputs", diag_args.inputs, "Run directories (stats also takes ppl CSVs)")->required();
  diag->add_option("--metric", diag_args.metric)->required()->check(CLI::IsMember({"entropy", "rank", "rsa", "stats"}));
  diag->add_option("--out", diag_args.out, "Output directory");
  diag->add_option("--sequences", diag_args.sequences, "Validation rows to trace")->check(CLI::PositiveNumber);
  diag->add_flag("--init", diag_args.init, "Use each run's initial checkpoint");
  diag->add_flag("--no-timestamp", diag_args.no_timestamp, "Omit the timestamp from SVG output");
  diag->callback([&] { cmd_diag(diag_args); });

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "Two-alternative forced choice benchmark");
  bench->add_option("runs", bench_args.runs, "Run directories")->check(CLI::ExistingDirectory);
  bench->add_option("--items", bench_args.items, "Items file")->required()->check(CLI::ExistingFile);
  bench->add_option("--reference", bench_args.reference, "Reference difficulty CSV")->check(CLI::ExistingFile);
  bench->add_option("--oracle", bench_args.oracle, "Score with the exact distribution in this file")
      ->check(CLI::ExistingFile);
  bench->add_option("--ordering", bench_args.ordering, "Ordering for the oracle scorer");
  bench->add_flag("--token-ids", bench_args.token_ids, "Items hold space-separated token ids");
  bench->add_option("--out", bench_args.out, "Output directory");
  bench->callback([&] { cmd_bench(bench_args); });

  OracleItemsArgs items_args;
  auto* items = app.add_subcommand("items", "Build two-alternative forced choice item sets");
  items->require_subcommand(1);
  auto* oracle_items = items->add_subcommand("oracle", "Items ranked by an exact distribution");
  oracle_items->add_option("--dist", items_args.dist, "Distribution file")->check(CLI::ExistingFile);
  oracle_items->add_option("--random", items_args.random, "Random distribution: V n seed")->expected(3);
  oracle_items->add_option("--count", items_args.count, "Number of items")->check(CLI::PositiveNumber);
  oracle_items->add_option("--seed", items_args.seed, "Item sampling seed");
  oracle_items->add_option("--out", items_args.out, "Output directory");
  oracle_items->callback([&] { cmd_oracle_items(items_args); });

  VerifyArgs verify_args;
  auto* verify = app.add_subcommand("verify", "Check perplexity invariance across factorization orders");
  verify->add_option("--dist", verify_args.dist, "Distribution file")->check(CLI::ExistingFile);
  verify->add_option("--random", verify_args.random, "Random distribution: V n seed")->expected(3);
  verify->add_flag("--appendix-c", verify_args.appendix_c, "Three-variable preset, all six orderings");
  verify->add_option("--perms", verify_args.perms, "'all' or a number of sampled orderings");
  verify->add_option("--tol", verify_args.tol, "Maximum relative deviation");
  verify->add_flag("--drop-bos", verify_args.drop_bos, "Negative control: drop the BOS term");
  verify->add_option("--sample-seed", verify_args.sample_seed, "Seed for the scored sequence with --dist");
  verify->add_option("--out", verify_args.out, "Report CSV (default stdout)");
  verify->callback([&] { cmd_verify(verify_args); });

  ExportArgs export_args;
  auto* exp = app.add_subcommand("export", "Write ATTN or HIDN records for a run");
  exp->add_option("run", export_args.run)->required()->check(CLI::ExistingDirectory);
  exp->add_option("--what", export_args.what)->check(CLI::IsMember({"attention", "hidden"}));
  exp->add_option("--sequences", export_args.sequences)->check(CLI::PositiveNumber);
  exp->add_flag("--init", export_args.init, "Use the initial checkpoint");
  exp->add_option("--out", export_args.out)->required();
  exp->callback([&] { cmd_export(export_args); });

  auto* manifest = app.add_subcommand("manifest", "Run manifest tools");
  manifest->require_subcommand(1);
  fs::path diff_a, diff_b;
  auto* diff = manifest->add_subcommand("diff", "Compare two run manifests field by field");
  diff->add_option("a", diff_a)->required()->check(CLI::ExistingDirectory);
  diff->add_option("b", diff_b)->required()->check(CLI::ExistingDirectory);
  diff->callback([&] { cmd_manifest_diff(diff_a, diff_b); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ExitCode& e) {
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
