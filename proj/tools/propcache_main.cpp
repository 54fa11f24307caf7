#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "propcache/errors.hpp"
#include "propcache/pipeline.hpp"
#include "propcache/synth.hpp"

namespace {

using namespace propcache;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ArgumentError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

void add_run_options(CLI::App& cmd, RunConfig& cfg, std::string& k_text) {
  cmd.add_option("--data", cfg.data, "Directory holding manifest.json")->required();
  cmd.add_option("--out", cfg.out, "Run directory for stage artifacts")->required();
  cmd.add_option("--seed", cfg.seed, "Pipeline seed");
  cmd.add_option("--props", cfg.props, "Property tokens per image (0: from manifest)");
  cmd.add_option("--k", k_text, "Cluster count, or \"auto\" for max(ceil(N/2), M)");
  cmd.add_option("--confusion-top", cfg.confusion_top, "Confusion classes per class");
  cmd.add_option("--layers", cfg.mpg_layers, "Generator layers");
  cmd.add_option("--hidden", cfg.mpg_hidden, "FFN width per group (0: D)");
  cmd.add_option("--heads", cfg.mpg_heads, "Attention heads");
  cmd.add_option("--tau", cfg.contrast.tau, "InfoNCE temperature");
  cmd.add_option("--negatives", cfg.contrast.negatives, "Negatives per anchor");
  cmd.add_option("--hard-start", cfg.contrast.hard_frac_start, "Hard fraction at the first epoch");
  cmd.add_option("--hard-end", cfg.contrast.hard_frac_end, "Hard fraction at the last epoch");
  cmd.add_option("--mpg-epochs", cfg.contrast.epochs, "Generator epochs");
  cmd.add_option("--mpg-lr", cfg.contrast.lr, "Generator learning rate");
  cmd.add_option("--mpg-batch", cfg.contrast.batch, "Generator batch size");
  cmd.add_flag("!--raw-tokens", cfg.contrast.normalize_tokens,
               "Skip token normalization before InfoNCE");
  cmd.add_option("--cache-epochs", cfg.cache.epochs, "Cache fine-tuning epochs");
  cmd.add_option("--cache-lr", cfg.cache.lr, "Cache learning rate");
  cmd.add_option("--cache-batch", cfg.cache.batch, "Cache batch size");
  cmd.add_option("--beta-s", cfg.sharpness, "Cache sharpness");
  cmd.add_option("--logit-scale", cfg.logit_scale, "Scale of the zero-shot logits");
  cmd.add_flag("!--no-timings", cfg.record_timings, "Do not write timings.json");
}

void apply_k(RunConfig& cfg, const std::string& k_text) {
  if (k_text.empty() || k_text == "auto") return;
  try {
    std::size_t pos = 0;
    const long v = std::stol(k_text, &pos);
    if (pos != k_text.size() || v < 1) throw std::invalid_argument(k_text);
    cfg.k_clusters = static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
    throw ArgumentError("--k expects a positive integer or \"auto\", got " + k_text);
  }
}

void print_summary(const nlohmann::json& report) {
  const auto& a = report.at("accuracies");
  std::printf("zero_shot %.4f  cls_cache %.4f  mp_cache %.4f  combined %.4f\n",
              a.at("zero_shot").get<double>(), a.at("cls_cache_only").get<double>(),
              a.at("mp_cache_only").get<double>(), a.at("combined").get<double>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot classification with property-token caches"};
  app.require_subcommand(1);

  SynthConfig synth;
  std::filesystem::path synth_out;
  auto* gen = app.add_subcommand("gen-synth", "Write a planted synthetic bundle");
  gen->add_option("--classes", synth.classes);
  gen->add_option("--shots", synth.shots);
  gen->add_option("--queries", synth.queries);
  gen->add_option("--dim", synth.dim);
  gen->add_option("--patches", synth.patches);
  gen->add_option("--props", synth.props);
  gen->add_option("--noise", synth.noise);
  gen->add_option("--seed", synth.seed);
  gen->add_option("--descriptions", synth.descriptions_per_property,
                  "Descriptions per planted property");
  gen->add_option("--sibling-gap", synth.sibling_gap);
  gen->add_option("--property-spread", synth.property_spread);
  gen->add_option("--out", synth_out)->required();

  RunConfig cfg;
  std::string k_text;
  struct Stage {
    const char* name;
    const char* help;
  };
  const Stage stages[] = {{"cluster", "Cluster the description pool"},
                          {"select", "Select top-M clusters and build sampling pools"},
                          {"train-mpg", "Train the property-token generator"},
                          {"train-cache", "Build and fine-tune the hybrid cache"},
                          {"eval", "Score the query split and write report.json"},
                          {"run-all", "Run every stage in order"}};
  std::map<std::string, CLI::App*> stage_cmds;
  for (const auto& s : stages) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_run_options(*cmd, cfg, k_text);
    stage_cmds[s.name] = cmd;
  }

  std::filesystem::path diff_a, diff_b;
  auto* diff = app.add_subcommand("report-diff", "Compare the numeric fields of two reports");
  diff->add_option("a", diff_a)->required();
  diff->add_option("b", diff_b)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      write_synthetic(synth_out, synth, gen_synthetic(synth));
      return 0;
    }
    if (*diff) {
      std::cout << report_diff(read_json_file(diff_a), read_json_file(diff_b));
      return 0;
    }
    apply_k(cfg, k_text);
    if (*stage_cmds["cluster"]) stage_cluster(cfg);
    if (*stage_cmds["select"]) stage_select(cfg);
    if (*stage_cmds["train-mpg"]) stage_train_mpg(cfg);
    if (*stage_cmds["train-cache"]) stage_train_cache(cfg);
    if (*stage_cmds["eval"]) print_summary(stage_eval(cfg));
    if (*stage_cmds["run-all"]) print_summary(run_all(cfg));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
