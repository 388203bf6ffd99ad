// Command-line driver for the continual-learning pipeline: pretrain a frozen
// backbone, run task streams with the compressed-adapter lifecycle and the
// baselines, probe warm-start transfer, sweep reconstruction fidelity, and
// inspect stored artifacts.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cola/harness.hpp"
#include "cola/selection.hpp"
#include "cola/serialize.hpp"
#include "cola/store.hpp"

namespace {

using nlohmann::json;

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

cola::StreamConfig parse_config(const json& j) {
  cola::StreamConfig c;
  if (j.contains("stream")) {
    const json& s = j["stream"];
    maybe(s, "n_tasks", c.n_tasks);
    maybe(s, "seed", c.seed);
    maybe(s, "buffer_capacity", c.buffer_capacity);
    maybe(s, "vanilla_lr", c.vanilla_lr);
    maybe(s, "run_vanilla", c.run_vanilla);
    maybe(s, "run_adapter_style", c.run_adapter_style);
    maybe(s, "run_sweep", c.run_sweep);
    maybe(s, "n_orders", c.n_orders);
    maybe(s, "selection_threads", c.selection_threads);
    maybe(s, "warm_start_sample", c.warm_start_sample);
  }
  if (j.contains("family")) {
    const json& f = j["family"];
    maybe(f, "n_classes", c.family.n_classes);
    maybe(f, "markers_per_class", c.family.markers_per_class);
    maybe(f, "seq_len", c.family.seq_len);
    maybe(f, "marker_copies", c.family.marker_copies);
    maybe(f, "train_n", c.family.train_n);
    maybe(f, "valid_n", c.family.valid_n);
    maybe(f, "test_n", c.family.test_n);
  }
  if (j.contains("backbone")) {
    const json& b = j["backbone"];
    maybe(b, "vocab_size", c.backbone.vocab_size);
    maybe(b, "embed_dim", c.backbone.embed_dim);
    maybe(b, "n_blocks", c.backbone.n_blocks);
    maybe(b, "n_heads", c.backbone.n_heads);
    maybe(b, "ffn_mult", c.backbone.ffn_mult);
    maybe(b, "max_seq", c.backbone.max_seq);
    maybe(b, "n_classes", c.backbone.n_classes);
    maybe(b, "init_std", c.backbone.init_std);
    maybe(b, "pretrain_steps", c.backbone.pretrain_steps);
    maybe(b, "batch_size", c.backbone.batch_size);
    maybe(b, "lr", c.backbone.lr);
    maybe(b, "lm_weight", c.backbone.lm_weight);
    maybe(b, "cls_weight", c.backbone.cls_weight);
    maybe(b, "seed", c.backbone.seed);
  }
  if (j.contains("adapter")) {
    const json& a = j["adapter"];
    maybe(a, "rank", c.adapter.rank);
    maybe(a, "alpha", c.adapter.alpha);
    maybe(a, "lr", c.adapter.lr);
    maybe(a, "steps", c.adapter.steps);
    maybe(a, "batch_size", c.adapter.batch_size);
    maybe(a, "lm_weight", c.adapter.lm_weight);
    maybe(a, "cls_weight", c.adapter.cls_weight);
    if (a.contains("points")) c.adapter.points = a["points"].get<std::vector<std::string>>();
  }
  if (j.contains("cae")) {
    const json& e = j["cae"];
    maybe(e, "latent_dim", c.cae.latent_dim);
    maybe(e, "hidden", c.cae.hidden);
    maybe(e, "lambda", c.cae.lambda);
    maybe(e, "lr", c.cae.lr);
    maybe(e, "threshold", c.cae.threshold);
    maybe(e, "max_steps", c.cae.max_steps);
    maybe(e, "batch_size", c.cae.batch_size);
    maybe(e, "check_every", c.cae.check_every);
    maybe(e, "seed", c.cae.seed);
    maybe(e, "retrain_from_decodes", c.cae.retrain_from_decodes);
  }
  return c;
}

cola::StreamConfig load_config(const std::string& path, std::optional<uint64_t> seed) {
  cola::StreamConfig c;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    json j;
    f >> j;
    c = parse_config(j);
  }
  if (seed.has_value()) {
    c.seed = *seed;
    c.backbone.seed = *seed;
  }
  return c;
}

cola::BackboneModel load_or_pretrain(const std::string& backbone_path,
                                     const cola::StreamConfig& cfg,
                                     const std::string& out_dir) {
  if (!backbone_path.empty() && std::filesystem::exists(backbone_path)) {
    std::cout << "loading backbone from " << backbone_path << "\n";
    return cola::load_backbone(backbone_path);
  }
  std::cout << "pretraining backbone (" << cfg.backbone.pretrain_steps << " steps)...\n";
  cola::TaskDataset corpus =
      cola::generate_pretrain_corpus(cfg.backbone, cfg.family, cfg.backbone.seed);
  cola::BackboneModel model = cola::pretrain(corpus, cfg.backbone);
  const std::string path =
      backbone_path.empty() ? out_dir + "/backbone.bin" : backbone_path;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  cola::save_backbone(model, path);
  std::cout << "saved backbone to " << path << " (params: " << model.param_count()
            << ", checksum: " << model.weight_checksum() << ")\n";
  return model;
}

std::vector<int> parse_tokens(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

void print_run_summary(const cola::RunReport& r) {
  std::cout << "\n=== run summary ===\n";
  std::cout << "tasks: " << r.per_task.size() << "  seed: " << r.seed << "\n";
  std::cout << "baseline avg acc (original adapters): " << r.baseline_avg_acc << "\n";
  std::cout << "final avg acc (routed, decoded):      " << r.avg_final_acc_cola << "\n";
  if (r.avg_final_acc_vanilla >= 0.0) {
    std::cout << "vanilla sequential FT avg acc:        " << r.avg_final_acc_vanilla
              << "\n";
  }
  if (r.avg_final_acc_adapter_style >= 0.0) {
    std::cout << "adapter-style (uncompressed) avg acc: " << r.avg_final_acc_adapter_style
              << "\n";
  }
  std::cout << "routing accuracy: " << r.routing_accuracy
            << "  avg forgetting: " << r.avg_forgetting_cola << "\n";
  std::cout << "checksum ok: " << (r.checksum_ok ? "yes" : "NO")
            << "  no-rehearsal audit: " << (r.no_rehearsal_audit_passed ? "yes" : "NO")
            << "\n";
  std::cout << "store bytes: " << r.storage.store_total_bytes
            << " (decoder " << r.storage.decoder_bytes << " + latents "
            << r.storage.latents_bytes << "), adapter-style bytes: "
            << r.storage.adapter_style_bytes << ", break-even tasks: "
            << r.storage.break_even_tasks << "\n";
  if (!r.sweep.empty()) {
    std::cout << "fidelity sweep: " << r.sweep.size()
              << " checkpoints, spearman(score, acc) = " << r.sweep_spearman << "\n";
  }
}

void inspect_store(const std::string& path) {
  std::vector<uint8_t> bytes = cola::read_file(path);
  cola::LatentStore store = cola::store_from_bytes(bytes);
  cola::StoreSectionSizes sizes;
  cola::store_bytes(store, &sizes);
  std::cout << "store: " << path << "\n";
  std::cout << "  file bytes: " << bytes.size() << "\n";
  std::cout << "  sections: DEC=" << sizes.dec << " NRM=" << sizes.nrm
            << " LAYOUT=" << sizes.layout << " CODES=" << sizes.codes << "\n";
  std::cout << "  input width L=" << store.input_width << ", latent m="
            << store.latent_dim << ", codes: " << store.codes.size()
            << ", encoder retained: " << (store.encoder_retained ? "yes" : "no") << "\n";
  for (const auto& [id, code] : store.codes) {
    std::cout << "    " << id << "  score=" << code.reconstruction_score << "\n";
  }
  cola::StorageReport rep = cola::storage_report(store, 0, {}, 0, {});
  std::cout << "  decoder bytes: " << rep.decoder_bytes << ", latents bytes: "
            << rep.latents_bytes << ", break-even tasks: " << rep.break_even_tasks
            << "\n";
}

void print_report_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open report: " + path);
  json j;
  f >> j;
  const json& m = j.contains("metrics") ? j["metrics"] : j;
  std::cout << "report: " << path << "\n";
  std::cout << "  seed: " << m.value("seed", 0ull) << "\n";
  std::cout << "  avg final acc (cola): " << m.value("avg_final_acc_cola", -1.0) << "\n";
  std::cout << "  avg final acc (vanilla): " << m.value("avg_final_acc_vanilla", -1.0)
            << "\n";
  std::cout << "  avg final acc (adapter-style): "
            << m.value("avg_final_acc_adapter_style", -1.0) << "\n";
  std::cout << "  routing accuracy: " << m.value("routing_accuracy", -1.0) << "\n";
  std::cout << "  avg forgetting (cola): " << m.value("avg_forgetting_cola", -1.0)
            << "\n";
  std::cout << "  sweep spearman: " << m.value("sweep_spearman", 0.0) << "\n";
  if (m.contains("per_task")) {
    std::cout << "  per task (post -> routed):\n";
    for (const auto& t : m["per_task"]) {
      std::cout << "    " << t.value("task_id", "?") << ": "
                << t.value("post_train_acc", 0.0) << " -> "
                << t.value("final_routed_acc", 0.0)
                << " (routing " << t.value("routing_acc", 0.0) << ", score "
                << t.value("recon_score", 0.0) << ")\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COLA continual learning pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir = "out", backbone_path;
  std::optional<uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "override every seed in the config");
  app.add_option("--out-dir", out_dir, "output directory");

  CLI::App* cmd_pretrain = app.add_subcommand("pretrain", "pretrain and freeze a backbone");
  std::string pretrain_out;
  cmd_pretrain->add_option("--out", pretrain_out, "backbone output path");

  CLI::App* cmd_stream = app.add_subcommand("run-stream", "run the full task stream");
  cmd_stream->add_option("--backbone", backbone_path, "frozen backbone file");

  CLI::App* cmd_transfer = app.add_subcommand("run-transfer", "warm-start transfer probe");
  cmd_transfer->add_option("--backbone", backbone_path, "frozen backbone file");
  int transfer_seeds = 5;
  cmd_transfer->add_option("--seeds", transfer_seeds, "number of probe seeds");

  CLI::App* cmd_sweep = app.add_subcommand("run-sweep", "reconstruction fidelity sweep");
  cmd_sweep->add_option("--backbone", backbone_path, "frozen backbone file");

  CLI::App* cmd_store = app.add_subcommand("store", "stored-artifact utilities");
  CLI::App* cmd_inspect = cmd_store->add_subcommand("inspect", "print a store file");
  std::string store_path;
  cmd_inspect->add_option("file", store_path, "store file")->required();

  CLI::App* cmd_select = app.add_subcommand("select", "route one input by perplexity");
  std::string sel_store, sel_backbone, sel_input, sel_task;
  int sel_threads = 1;
  cmd_select->add_option("--store", sel_store, "store file")->required();
  cmd_select->add_option("--backbone", sel_backbone, "backbone file")->required();
  cmd_select->add_option("--input", sel_input, "comma-separated token ids")->required();
  cmd_select->add_option("--task-id", sel_task, "explicit task id (skips scoring)");
  cmd_select->add_option("--threads", sel_threads, "concurrent adapter scoring");

  CLI::App* cmd_report = app.add_subcommand("report", "summarize a report file");
  std::string report_path;
  cmd_report->add_option("file", report_path, "report.json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    cola::StreamConfig cfg = load_config(config_path, seed);
    std::filesystem::create_directories(out_dir);

    if (cmd_pretrain->parsed()) {
      const std::string path = pretrain_out.empty() ? out_dir + "/backbone.bin" : pretrain_out;
      cola::TaskDataset corpus =
          cola::generate_pretrain_corpus(cfg.backbone, cfg.family, cfg.backbone.seed);
      cola::BackboneModel model = cola::pretrain(corpus, cfg.backbone);
      cola::save_backbone(model, path);
      const double ppl = cola::mean_lm_perplexity(model, nullptr, corpus.valid());
      std::cout << "backbone: " << model.param_count() << " params, frozen, checksum "
                << model.weight_checksum() << "\n";
      std::cout << "valid perplexity " << ppl << " (uniform baseline "
                << cfg.backbone.vocab_size << ")\n";
      std::cout << "saved to " << path << "\n";
    } else if (cmd_stream->parsed()) {
      cola::BackboneModel model = load_or_pretrain(backbone_path, cfg, out_dir);
      if (cfg.n_orders > 1) {
        cola::MultiRunReport multi = cola::run_cola_multi(model, cfg);
        for (size_t i = 0; i < multi.per_order.size(); ++i) {
          cola::write_report_files(multi.per_order[i],
                                   out_dir + "/order-" + std::to_string(i));
        }
        std::cout << "orders: " << multi.per_order.size()
                  << ", mean avg final acc: " << multi.mean_avg_final_acc_cola
                  << ", mean vanilla: " << multi.mean_avg_final_acc_vanilla
                  << ", mean routing: " << multi.mean_routing_accuracy << "\n";
        print_run_summary(multi.per_order[0]);
      } else {
        cola::LatentStore store;
        cola::RunReport report = cola::run_cola(model, cfg, &store);
        cola::write_report_files(report, out_dir);
        cola::save_store(store, out_dir + "/store.bin");
        std::cout << "wrote " << out_dir << "/report.json and " << out_dir
                  << "/store.bin\n";
        print_run_summary(report);
        if (!report.checksum_ok || !report.no_rehearsal_audit_passed) {
          throw std::runtime_error("invariant violation detected during the run");
        }
      }
    } else if (cmd_transfer->parsed()) {
      cola::BackboneModel model = load_or_pretrain(backbone_path, cfg, out_dir);
      cola::TransferReport report = cola::run_transfer_probe(model, cfg, transfer_seeds);
      cola::write_transfer_files(report, out_dir);
      int faster = 0;
      for (const auto& s : report.related) faster += s.warm_strictly_faster ? 1 : 0;
      std::cout << "related pairs: warm start strictly faster in " << faster << "/"
                << report.related.size() << " seeds\n";
      std::cout << "wrote " << out_dir << "/transfer.json\n";
    } else if (cmd_sweep->parsed()) {
      cola::BackboneModel model = load_or_pretrain(backbone_path, cfg, out_dir);
      cola::SweepReport report = cola::run_fidelity_sweep(model, cfg);
      std::string csv = "score,min_score,avg_acc\n";
      for (const auto& r : report.rows) {
        csv += std::to_string(r.score) + "," + std::to_string(r.min_score) + "," +
               std::to_string(r.avg_acc) + "\n";
      }
      std::ofstream f(out_dir + "/sweep.csv", std::ios::trunc);
      f << csv;
      std::cout << "sweep rows: " << report.rows.size() << ", spearman "
                << report.spearman << ", baseline acc " << report.baseline_avg_acc
                << "\n";
      std::cout << "wrote " << out_dir << "/sweep.csv\n";
    } else if (cmd_inspect->parsed()) {
      inspect_store(store_path);
    } else if (cmd_select->parsed()) {
      cola::BackboneModel model = cola::load_backbone(sel_backbone);
      cola::LatentStore store = cola::load_store(sel_store);
      std::optional<std::string> task;
      if (!sel_task.empty()) task = sel_task;
      cola::SelectionResult sel =
          cola::select_adapter(store, model, parse_tokens(sel_input), task, sel_threads);
      nlohmann::ordered_json j;
      j["chosen"] = sel.chosen;
      j["input_len"] = sel.input_len;
      j["perplexities"] = sel.ppl;
      std::cout << j.dump(2) << "\n";
    } else if (cmd_report->parsed()) {
      print_report_file(report_path);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
