#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "mpt/bayes.hpp"
#include "mpt/io/checkpoint.hpp"
#include "mpt/pretrain.hpp"
#include "mpt/rec/evaluate.hpp"
#include "mpt/rec/finetune.hpp"

// JSON reports with flat CSV mirrors. Both carry every number at full
// round-trip precision so the two files agree value for value.

namespace mpt::io {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("file not found: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline json train_report_json(const TrainReport& r, const json& config) {
  json rows = json::array();
  for (const auto& x : r.records)
    rows.push_back({{"step", x.step},
                    {"tokens", x.tokens},
                    {"train_loss", x.train_loss},
                    {"eval_loss", x.eval_loss},
                    {"eval_stderr", x.eval_stderr},
                    {"bayes_limit", x.bayes_limit},
                    {"bayes_stderr", x.bayes_stderr},
                    {"seconds", x.seconds}});
  return {{"config", config}, {"records", rows}};
}

inline std::string train_report_csv(const TrainReport& r) {
  std::string s = "step,tokens,train_loss,eval_loss,eval_stderr,bayes_limit,bayes_stderr,seconds\n";
  for (const auto& x : r.records)
    s += std::to_string(x.step) + "," + std::to_string(x.tokens) + "," + num(x.train_loss) + "," +
         num(x.eval_loss) + "," + num(x.eval_stderr) + "," + num(x.bayes_limit) + "," + num(x.bayes_stderr) +
         "," + num(x.seconds) + "\n";
  return s;
}

inline json rec_report_json(const rec::RecEvalReport& r, const json& config) {
  json rows = json::array();
  for (const auto& m : r.modes)
    for (const auto& c : m.cutoffs)
      rows.push_back({{"mode", std::string(rec::to_string(m.mode))},
                      {"N", c.n},
                      {"hr", c.hr},
                      {"ndcg", c.ndcg},
                      {"users", m.users},
                      {"seed", r.seed}});
  return {{"config", config}, {"seed", r.seed}, {"results", rows}};
}

inline std::string rec_report_csv(const rec::RecEvalReport& r) {
  std::string s = "mode,N,hr,ndcg,users,seed\n";
  for (const auto& m : r.modes)
    for (const auto& c : m.cutoffs)
      s += std::string(rec::to_string(m.mode)) + "," + std::to_string(c.n) + "," + num(c.hr) + "," +
           num(c.ndcg) + "," + std::to_string(m.users) + "," + std::to_string(r.seed) + "\n";
  return s;
}

inline json finetune_curve_json(const rec::FinetuneResult& r, const json& config) {
  json rows = json::array();
  for (const auto& e : r.curve)
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"valid_hr10", e.valid_hr10},
                    {"valid_ndcg10", e.valid_ndcg10}});
  return {{"config", config},
          {"best_epoch", r.best_epoch},
          {"best_valid_ndcg10", r.best_valid_ndcg10},
          {"early_stopped", r.early_stopped},
          {"diverged", r.diverged},
          {"curve", rows}};
}

inline std::string finetune_curve_csv(const rec::FinetuneResult& r) {
  std::string s = "epoch,train_loss,valid_hr10,valid_ndcg10\n";
  for (const auto& e : r.curve)
    s += std::to_string(e.epoch) + "," + num(e.train_loss) + "," + num(e.valid_hr10) + "," +
         num(e.valid_ndcg10) + "\n";
  return s;
}

inline json mean_json(const markov::MeanWithError& m) {
  return {{"mean", m.mean}, {"stderr", m.stderr_}, {"samples", m.samples}};
}

}  // namespace mpt::io
