// mpt: pre-training, Bayes-limit, fine-tuning and evaluation commands.
//
// Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
// 3 missing file, 4 dimension mismatch or corrupt file, 5 divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "mpt/config.hpp"
#include "mpt/mpt.hpp"

namespace fs = std::filesystem;
using mpt::io::json;

namespace {

struct Run {
  std::string command;
  json cfg;
  fs::path out;

  json provenance() const {
    json p = cfg;
    p["command"] = command;
    return p;
  }
};

void write_pair(const Run& run, const std::string& stem, const json& doc, const std::string& csv) {
  mpt::io::write_json(run.out / (stem + ".json"), doc);
  mpt::io::write_text(run.out / (stem + ".csv"), csv);
}

fs::path required_path(const json& cfg, const char* key) {
  const auto p = cfg.at(key).get<std::string>();
  if (p.empty()) throw mpt::ConfigError(std::string("--") + mpt::config::flag_name(key) + " is required");
  return p;
}

int cmd_pretrain(const Run& run) {
  const auto model = mpt::config::model_config(run.cfg);
  const auto cfg = mpt::config::pretrain_config(run.cfg);
  cfg.validate(model);
  const auto ckpt = run.out / "checkpoint.mpt";
  mpt::PretrainHooks hooks;
  hooks.on_eval = [](const mpt::TrainRecord& r) {
    std::printf("step %ld tokens %llu train %.5f eval %.5f (±%.5f) bayes %.5f\n", r.step,
                static_cast<unsigned long long>(r.tokens), r.train_loss, r.eval_loss, r.eval_stderr,
                r.bayes_limit);
    std::fflush(stdout);
  };
  hooks.checkpoint = [&](const mpt::TransformerWeights<float>& w, long step) {
    mpt::io::ModelBundle b{model, step, w, std::nullopt, std::nullopt, {{"config", run.provenance()}}};
    mpt::io::save_model(ckpt, b);
  };
  const auto result = mpt::pretrain_run(model, cfg, hooks);
  write_pair(run, "pretrain_report", mpt::io::train_report_json(result.report, run.provenance()),
             mpt::io::train_report_csv(result.report));
  std::printf("checkpoint %s\n", ckpt.c_str());
  return 0;
}

int cmd_bayes_limit(const Run& run) {
  const auto cfg = mpt::config::pretrain_config(run.cfg);
  const auto chains = run.cfg.at("chains").get<std::size_t>();
  if (chains < 2) throw mpt::ConfigError("chains must be >= 2");
  if (cfg.seq_len < 2) throw mpt::ConfigError("seq_len must be >= 2");
  const auto m = mpt::markov::bayes_limit_loss(cfg.prior(), cfg.num_states, cfg.seq_len, chains, cfg.seed);
  std::printf("bayes_limit %.17g stderr %.17g chains %zu\n", m.mean, m.stderr_, m.samples);
  json doc = {{"config", run.provenance()}, {"mean", m.mean}, {"stderr", m.stderr_}, {"chains", m.samples}};
  write_pair(run, "bayes_limit", doc,
             "mean,stderr,chains\n" + mpt::io::num(m.mean) + "," + mpt::io::num(m.stderr_) + "," +
                 std::to_string(m.samples) + "\n");
  return 0;
}

int cmd_eval_nsp(const Run& run) {
  const auto bundle = mpt::io::load_model(required_path(run.cfg, "checkpoint"));
  auto cfg = mpt::config::pretrain_config(run.cfg);
  if (cfg.seq_len > bundle.config.max_seq_len)
    throw mpt::DimensionError("seq_len " + std::to_string(cfg.seq_len) + " exceeds checkpoint max_seq_len " +
                              std::to_string(bundle.config.max_seq_len));
  const auto ev = mpt::evaluate_nsp(bundle.backbone, bundle.config, cfg, cfg.eval_batches, 0, cfg.threads);
  std::printf("nsp_loss %.6f (±%.6f) bayes %.6f (±%.6f) gap %.6f (±%.6f)\n", ev.loss.mean, ev.loss.stderr_,
              ev.bayes.mean, ev.bayes.stderr_, ev.gap.mean, ev.gap.stderr_);
  json doc = {{"config", run.provenance()},
              {"loss", mpt::io::mean_json(ev.loss)},
              {"bayes", mpt::io::mean_json(ev.bayes)},
              {"gap", mpt::io::mean_json(ev.gap)}};
  std::string csv = "quantity,mean,stderr,samples\n";
  for (const auto& [name, m] : {std::pair{"loss", ev.loss}, {"bayes", ev.bayes}, {"gap", ev.gap}})
    csv += std::string(name) + "," + mpt::io::num(m.mean) + "," + mpt::io::num(m.stderr_) + "," +
           std::to_string(m.samples) + "\n";
  write_pair(run, "eval_nsp", doc, csv);
  return 0;
}

int cmd_gen_synth(const Run& run) {
  const auto sc = mpt::config::synth_config(run.cfg);
  const auto synth = mpt::rec::generate_synthetic_dataset(sc);
  mpt::io::save_dataset(run.out / "sequences.txt", run.out / "embeddings.txt", synth.data);
  std::vector<mpt::io::NamedTensor> tensors;
  for (std::size_t k = 0; k < synth.truth.chains.size(); ++k) {
    const auto& c = synth.truth.chains[k];
    tensors.push_back({"chain" + std::to_string(k), {c.num_states, c.num_states},
                       std::vector<float>(c.probs.begin(), c.probs.end())});
  }
  tensors.push_back({"user_chain", {synth.truth.user_chain.size()},
                     std::vector<float>(synth.truth.user_chain.begin(), synth.truth.user_chain.end())});
  mpt::io::write_checkpoint(run.out / "truth.mpt",
                            {{"synthetic_truth", true},
                             {"latent_chains", synth.truth.chains.size()},
                             {"config", run.provenance()}},
                            tensors);
  std::printf("users %zu items %zu -> %s\n", synth.data.sequences.size(), synth.data.num_items, run.out.c_str());
  return 0;
}

mpt::rec::SynthGroundTruth load_truth(const fs::path& path) {
  const auto c = mpt::io::read_checkpoint(path);
  mpt::rec::SynthGroundTruth t;
  const auto k = c.header.value("latent_chains", std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto* m = c.find("chain" + std::to_string(i));
    if (!m || m->shape.size() != 2 || m->shape[0] != m->shape[1])
      throw mpt::FormatError(path.string() + ": malformed chain" + std::to_string(i));
    t.chains.push_back({m->shape[0], std::vector<double>(m->data.begin(), m->data.end()), 0});
  }
  const auto* u = c.find("user_chain");
  if (!u || t.chains.empty()) throw mpt::FormatError(path.string() + ": not a synthetic ground-truth file");
  for (float x : u->data) {
    if (x < 0 || static_cast<std::size_t>(x) >= t.chains.size())
      throw mpt::FormatError(path.string() + ": user chain index out of range");
    t.user_chain.push_back(static_cast<int>(x));
  }
  return t;
}

mpt::rec::InteractionDataset dataset_of(const Run& run) {
  return mpt::io::load_dataset(required_path(run.cfg, "sequences"), required_path(run.cfg, "embeddings"));
}

int cmd_finetune(const Run& run) {
  auto bundle = mpt::io::load_model(required_path(run.cfg, "checkpoint"));
  const auto ds = dataset_of(run);
  const auto fcfg = mpt::config::finetune_config(run.cfg);
  const auto result = mpt::rec::finetune_run(bundle.backbone, bundle.config, ds, fcfg);
  for (const auto& e : result.curve)
    std::printf("epoch %zu loss %.5f valid HR@10 %.4f NDCG@10 %.4f\n", e.epoch, e.train_loss, e.valid_hr10,
                e.valid_ndcg10);
  write_pair(run, "finetune_report", mpt::io::finetune_curve_json(result, run.provenance()),
             mpt::io::finetune_curve_csv(result));
  bundle.adaptor = result.adaptor;
  bundle.lora = result.lora;
  bundle.metadata["finetune"] = {{"config", run.provenance()},
                                 {"best_epoch", result.best_epoch},
                                 {"temperature", fcfg.temperature},
                                 {"max_len", fcfg.max_len}};
  const auto path = run.out / "finetuned.mpt";
  mpt::io::save_model(path, bundle);
  std::printf("best epoch %zu valid NDCG@10 %.4f -> %s\n", result.best_epoch, result.best_valid_ndcg10,
              path.c_str());
  if (result.diverged) throw mpt::DivergenceError("fine-tuning diverged; best weights were saved");
  return 0;
}

int cmd_eval_rec(const Run& run, const std::string& stem) {
  const auto ds = dataset_of(run);
  const auto split = mpt::rec::leave_one_out_split(ds);
  mpt::rec::RankingOptions opt;
  opt.modes = mpt::config::shuffle_modes(run.cfg);
  opt.cutoffs = mpt::config::cutoffs(run.cfg);
  opt.seed = run.cfg.at("seed").get<std::uint64_t>();
  opt.max_len = run.cfg.at("max_len").get<std::size_t>();
  opt.threads = run.cfg.at("threads").get<std::size_t>();
  const auto scorer_name = run.cfg.at("scorer").get<std::string>();
  mpt::rec::RecEvalReport report;
  if (scorer_name == "popularity") {
    report = mpt::rec::evaluate_ranking(split, ds.num_items,
                                        mpt::rec::static_scorer(mpt::rec::popularity_baseline(split, ds.num_items)),
                                        opt);
  } else if (scorer_name == "oracle") {
    const auto truth = load_truth(required_path(run.cfg, "truth"));
    if (truth.user_chain.size() != ds.sequences.size() || truth.chains.front().num_states != ds.num_items)
      throw mpt::DimensionError("ground truth does not match the dataset");
    report = mpt::rec::evaluate_ranking(split, ds.num_items, mpt::rec::chain_oracle_scorer(truth), opt);
  } else {
    const auto bundle = mpt::io::load_model(required_path(run.cfg, "checkpoint"));
    if (!bundle.adaptor) throw mpt::CheckpointError("checkpoint carries no adaptor; run finetune first");
    if (bundle.adaptor->input_dim() != ds.embedding_dim)
      throw mpt::DimensionError("adaptor expects " + std::to_string(bundle.adaptor->input_dim()) +
                                "-d item embeddings, dataset has " + std::to_string(ds.embedding_dim));
    if (opt.max_len > bundle.config.max_seq_len) throw mpt::ConfigError("max_len exceeds checkpoint max_seq_len");
    const auto items = mpt::rec::item_tensor(ds);
    const auto tau = run.cfg.at("temperature").get<double>();
    report = mpt::rec::evaluate_ranking(
        split, ds.num_items,
        mpt::rec::model_scorer(bundle.backbone, bundle.config, *bundle.adaptor, bundle.lora ? &*bundle.lora : nullptr,
                               items, tau),
        opt);
  }
  for (const auto& m : report.modes)
    for (const auto& c : m.cutoffs)
      std::printf("%-13s HR@%-3zu %.4f  NDCG@%-3zu %.4f  users %zu\n", std::string(to_string(m.mode)).c_str(), c.n,
                  c.hr, c.n, c.ndcg, m.users);
  if (split.excluded) std::fprintf(stderr, "warning: %zu users with fewer than 3 items excluded\n", split.excluded);
  write_pair(run, stem, mpt::io::rec_report_json(report, run.provenance()), mpt::io::rec_report_csv(report));
  return 0;
}

int cmd_dump_attention(const Run& run) {
  const auto bundle = mpt::io::load_model(required_path(run.cfg, "checkpoint"));
  if (!bundle.adaptor) throw mpt::CheckpointError("checkpoint carries no adaptor; run finetune first");
  const auto ds = dataset_of(run);
  const auto user = run.cfg.at("user").get<std::size_t>();
  if (user >= ds.sequences.size()) throw mpt::ConfigError("user " + std::to_string(user) + " does not exist");
  const auto& seq = ds.sequences[user];
  const auto max_len = run.cfg.at("max_len").get<std::size_t>();
  const std::span<const int> all(seq);
  const auto context = mpt::rec::truncate_recent(all.first(seq.size() > 1 ? seq.size() - 1 : seq.size()), max_len);
  const auto maps = mpt::rec::dump_attention(bundle.backbone, bundle.config, *bundle.adaptor,
                                             bundle.lora ? &*bundle.lora : nullptr, mpt::rec::item_tensor(ds),
                                             context, max_len);
  const std::size_t L = maps.dim(0), H = maps.dim(1), T = maps.dim(2);
  json layers = json::array();
  std::string csv = "layer,head,row,col,weight\n";
  for (std::size_t l = 0; l < L; ++l) {
    json heads = json::array();
    for (std::size_t h = 0; h < H; ++h) {
      json rows = json::array();
      for (std::size_t i = 0; i < T; ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < T; ++j) {
          const double w = maps.data()[((l * H + h) * T + i) * T + j];
          row.push_back(w);
          csv += std::to_string(l) + "," + std::to_string(h) + "," + std::to_string(i) + "," + std::to_string(j) +
                 "," + mpt::io::num(w) + "\n";
        }
        rows.push_back(row);
      }
      heads.push_back(rows);
    }
    layers.push_back(heads);
  }
  json doc = {{"config", run.provenance()},
              {"user", user},
              {"items", context},
              {"shape", {L, H, T, T}},
              {"attention", layers}};
  write_pair(run, "attention_user" + std::to_string(user), doc, csv);
  std::printf("attention [%zu x %zu x %zu x %zu] for user %zu\n", L, H, T, T, user);
  return 0;
}

int cmd_sweep(const Run& run) {
  auto values = [&](const char* key, const char* base) {
    json v = run.cfg.at(key);
    if (v.empty()) v = json::array({run.cfg.at(base)});
    return v;
  };
  const auto alphas = values("sweep_alpha", "alpha");
  const auto states = values("sweep_num_states", "num_states");
  const auto hiddens = values("sweep_hidden", "hidden");
  const auto tokens = values("sweep_tokens", "total_tokens");
  json cells = json::array();
  std::string csv = "cell,alpha,num_states,hidden,total_tokens,steps,eval_loss,eval_stderr,bayes_limit,bayes_stderr\n";
  std::size_t cell = 0;
  for (const auto& a : alphas)
    for (const auto& s : states)
      for (const auto& h : hiddens)
        for (const auto& t : tokens) {
          json cfg = run.cfg;
          cfg["alpha"] = a;
          cfg["num_states"] = s;
          cfg["hidden"] = h;
          cfg["total_tokens"] = t;
          for (const char* k : {"sweep_alpha", "sweep_num_states", "sweep_hidden", "sweep_tokens"})
            cfg[k] = json::array();
          const auto model = mpt::config::model_config(cfg);
          const auto pc = mpt::config::pretrain_config(cfg);
          pc.validate(model);
          std::printf("cell %zu: alpha %g states %zu hidden %zu tokens %llu\n", cell, pc.alpha, pc.num_states,
                      model.hidden, static_cast<unsigned long long>(pc.total_tokens));
          std::fflush(stdout);
          const auto result = mpt::pretrain_run(model, pc);
          Run sub{run.command, cfg, run.out / ("cell" + std::to_string(cell))};
          write_pair(sub, "pretrain_report", mpt::io::train_report_json(result.report, sub.provenance()),
                     mpt::io::train_report_csv(result.report));
          mpt::TrainRecord last;
          if (!result.report.records.empty()) last = result.report.records.back();
          cells.push_back({{"cell", cell},
                           {"alpha", pc.alpha},
                           {"num_states", pc.num_states},
                           {"hidden", model.hidden},
                           {"total_tokens", pc.total_tokens},
                           {"steps", result.steps},
                           {"eval_loss", last.eval_loss},
                           {"eval_stderr", last.eval_stderr},
                           {"bayes_limit", last.bayes_limit},
                           {"bayes_stderr", last.bayes_stderr}});
          csv += std::to_string(cell) + "," + mpt::io::num(pc.alpha) + "," + std::to_string(pc.num_states) + "," +
                 std::to_string(model.hidden) + "," + std::to_string(pc.total_tokens) + "," +
                 std::to_string(result.steps) + "," + mpt::io::num(last.eval_loss) + "," +
                 mpt::io::num(last.eval_stderr) + "," + mpt::io::num(last.bayes_limit) + "," +
                 mpt::io::num(last.bayes_stderr) + "\n";
          ++cell;
        }
  write_pair(run, "sweep", {{"config", run.provenance()}, {"cells", cells}}, csv);
  return 0;
}

int dispatch(const Run& run) {
  if (run.command == "pretrain") return cmd_pretrain(run);
  if (run.command == "bayes-limit") return cmd_bayes_limit(run);
  if (run.command == "eval-nsp") return cmd_eval_nsp(run);
  if (run.command == "finetune") return cmd_finetune(run);
  if (run.command == "eval-rec") return cmd_eval_rec(run, "rec_eval");
  if (run.command == "shuffle-eval") return cmd_eval_rec(run, "shuffle_eval");
  if (run.command == "gen-synth") return cmd_gen_synth(run);
  if (run.command == "dump-attention") return cmd_dump_attention(run);
  if (run.command == "sweep") return cmd_sweep(run);
  throw mpt::ConfigError("unknown command '" + run.command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Markovian pre-trained transformer: pre-training, fine-tuning and evaluation"};
  app.require_subcommand(1, 1);
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "pre-train on synthetic Markov chains"},
      {"bayes-limit", "Monte-Carlo Bayes-optimal NSP loss"},
      {"eval-nsp", "held-out NSP loss of a checkpoint"},
      {"finetune", "fit the input adaptor (and LoRA) for next-item prediction"},
      {"eval-rec", "leave-one-out ranking metrics"},
      {"shuffle-eval", "ranking metrics under chronological/partial/complete shuffles"},
      {"gen-synth", "generate a synthetic interaction dataset"},
      {"dump-attention", "per-layer, per-head attention maps for one user"},
      {"sweep", "pre-training over a grid of alpha / num_states / hidden / total_tokens"}};

  std::map<std::string, std::string> raw;
  std::string config_path;
  bool print_config = false;
  std::vector<CLI::App*> subs;
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON config file (flat keys, or a report's embedded config)");
    sub->add_flag("--print-config", print_config, "print the effective configuration and exit");
    for (const auto& key : mpt::config::schema())
      sub->add_option("--" + mpt::config::flag_name(key.name), raw[key.name], key.help);
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  Run run;
  for (auto* sub : subs)
    if (sub->parsed()) run.command = sub->get_name();
  CLI::App* active = app.get_subcommand(run.command);

  try {
    json file = json::object();
    if (!config_path.empty()) {
      try {
        file = mpt::config::file_values(mpt::io::read_json(config_path));
      } catch (const mpt::MissingFileError&) {
        throw mpt::ConfigError("config file not found: " + config_path);
      } catch (const mpt::FormatError& e) {
        throw mpt::ConfigError(e.what());
      }
    }
    json flags = json::object();
    for (const auto& key : mpt::config::schema())
      if (active->count("--" + mpt::config::flag_name(key.name)) > 0)
        flags[key.name] = mpt::config::parse_flag(key, raw[key.name]);
    run.cfg = mpt::config::merge(file, flags);
    if (run.command == "shuffle-eval" && !flags.contains("modes") && !file.contains("modes"))
      run.cfg["modes"] = json::array({"chronological", "partial", "complete"});
    mpt::config::validate(run.cfg);
    if (print_config) {
      std::cout << run.provenance().dump(2) << "\n";
      return 0;
    }
    run.out = run.cfg.at("out_dir").get<std::string>();
    return dispatch(run);
  } catch (const mpt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mpt::MissingFileError& e) {
    std::cerr << "missing file: " << e.what() << "\n";
    return 3;
  } catch (const mpt::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const mpt::DimensionError& e) {
    std::cerr << "dimension mismatch: " << e.what() << "\n";
    return 4;
  } catch (const mpt::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const mpt::LengthError& e) {
    std::cerr << "length error: " << e.what() << "\n";
    return 4;
  } catch (const mpt::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 5;
  } catch (const mpt::NonFiniteError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
