#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "mpt/gradcheck.hpp"
#include "mpt/rec/evaluate.hpp"
#include "mpt/rec/finetune.hpp"
#include "mpt/rec/synth.hpp"
#include "support.hpp"

using namespace mpt;
using namespace mpt::rec;
using mpt::test::random_tensor;

namespace {

InteractionDataset two_user_fixture() {
  std::istringstream seq("0 1 2 3\n3 2 1 0\n");
  std::ostringstream emb;
  emb << "4 8\n";
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 8; ++j) emb << (j ? " " : "") << 0.1 * (i + 1) + 0.01 * j;
    emb << "\n";
  }
  std::istringstream embs(emb.str());
  return make_dataset(parse_sequences(seq, 4), parse_embeddings(embs));
}

ModelConfig tiny_backbone(std::size_t d = 16) {
  ModelConfig m;
  m.num_layers = 1;
  m.hidden = d;
  m.heads = 2;
  m.max_seq_len = 64;
  return m;
}

SyntheticDataset small_synth(std::size_t users = 40, std::size_t items = 20) {
  SynthConfig c;
  c.num_users = users;
  c.num_items = items;
  c.num_chains = 2;
  c.min_len = 5;
  c.max_len = 12;
  c.d_text = 8;
  c.seed = 4;
  return generate_synthetic_dataset(c);
}

}  // namespace

TEST(Dataset, TwoUserFixtureRoundTrips) {
  const auto ds = two_user_fixture();
  ASSERT_EQ(ds.sequences.size(), 2u);
  EXPECT_EQ(ds.sequences[0], (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(ds.sequences[1], (std::vector<int>{3, 2, 1, 0}));
  std::ostringstream seq, emb;
  write_sequences(seq, ds.sequences);
  write_embeddings(emb, ds);
  std::istringstream seq_in(seq.str()), emb_in(emb.str());
  const auto back = make_dataset(parse_sequences(seq_in, 4), parse_embeddings(emb_in));
  EXPECT_EQ(back.sequences, ds.sequences);
  EXPECT_EQ(back.embeddings, ds.embeddings);
}

TEST(Dataset, EmptyFileHasNoUsers) {
  std::istringstream in("\n# comment only\n");
  try {
    parse_sequences(in);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("no users"), std::string::npos);
  }
}

TEST(Dataset, RejectsBadIndicesAndDimensions) {
  std::istringstream seq("0 1\n2 7\n");
  try {
    parse_sequences(seq, 4);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  std::istringstream bad_dim("2 3\n1 2 3\n4 5\n");
  EXPECT_THROW(parse_embeddings(bad_dim), FormatError);
  std::istringstream bad_rows("3 2\n1 2\n3 4\n");
  EXPECT_THROW(parse_embeddings(bad_rows), FormatError);
  std::istringstream nan_row("1 2\n1 nan\n");
  EXPECT_THROW(parse_embeddings(nan_row), FormatError);
}

TEST(Split, LeaveOneOutViews) {
  InteractionDataset ds{{{10, 11, 12, 13}, {5, 6, 7}, {8, 9}}, 20, 1, std::vector<float>(20, 1.0f)};
  const auto s = leave_one_out_split(ds);
  ASSERT_EQ(s.users.size(), 2u);
  EXPECT_EQ(s.excluded, 1u);
  const auto& a = s.users[0];
  EXPECT_EQ(std::vector<int>(a.train.begin(), a.train.end()), (std::vector<int>{10, 11}));
  EXPECT_EQ(std::vector<int>(a.valid_context.begin(), a.valid_context.end()), (std::vector<int>{10, 11}));
  EXPECT_EQ(a.valid_target, 12);
  EXPECT_EQ(std::vector<int>(a.test_context.begin(), a.test_context.end()), (std::vector<int>{10, 11, 12}));
  EXPECT_EQ(a.test_target, 13);
  EXPECT_EQ(s.users[1].train.size(), 1u);
  EXPECT_EQ(s.users[1].user, 1u);
  // Views, not copies.
  EXPECT_EQ(a.train.data(), ds.sequences[0].data());
}

TEST(Split, PiecesReassembleOriginal) {
  const auto syn = small_synth();
  const auto s = leave_one_out_split(syn.data);
  for (const auto& u : s.users) {
    std::vector<int> joined(u.train.begin(), u.train.end());
    joined.push_back(u.valid_target);
    joined.push_back(u.test_target);
    EXPECT_EQ(joined, syn.data.sequences[u.user]);
  }
}

TEST(Adaptor, ZeroInputReducesToBiasPath) {
  auto w = init_adaptor<double>(4, 6, 5, 1);
  for (std::size_t i = 0; i < 5; ++i) w.b1.mutable_values()[i] = i % 2 ? 0.3 : -0.4;
  for (std::size_t i = 0; i < 6; ++i) w.b2.mutable_values()[i] = 0.1 * static_cast<double>(i);
  Tape<double> tape;
  const auto y = adaptor_forward(tape, w, Tensor<double>::zeros({2, 4}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 6; ++j) {
      double acc = w.b2.values()[j];
      for (std::size_t k = 0; k < 5; ++k) {
        const double b = w.b1.values()[k];
        acc += (b > 0 ? b : 0.01 * b) * w.w2.values()[k * 6 + j];
      }
      EXPECT_NEAR(y.values()[r * 6 + j], acc, 1e-12);
    }
}

TEST(Adaptor, LeakySlopeAtMinusOne) {
  Tape<double> tape;
  EXPECT_DOUBLE_EQ(leaky_relu(tape, Tensor<double>({1}, {-1.0}), kLeakySlope).item(), -0.01);
}

TEST(Adaptor, GradientCheck) {
  auto w = init_adaptor<double>(5, 4, 6, 2);
  for (std::size_t i = 0; i < 6; ++i) w.b1.mutable_values()[i] = 0.05 * (static_cast<double>(i) - 2.5);
  auto x = random_tensor<double>({3, 5}, 3, 1.0, true);
  const auto probe = random_tensor<double>({3, 4}, 4, 1.0);
  std::vector<Tensor<double>> wrt{x};
  for (const auto& [name, t] : w.named()) wrt.push_back(t);
  const double err = gradient_check(
      [&](Tape<double>& t) { return sum(t, mul(t, adaptor_forward(t, w, x), probe)); }, wrt);
  EXPECT_LT(err, 1e-3);
  Tape<double> tape;
  EXPECT_THROW(adaptor_forward(tape, w, Tensor<double>::zeros({2, 3})), DimensionError);
}

TEST(ScoreItems, CosineOverTemperature) {
  const std::vector<float> h{1.0f, 2.0f, 0.0f};
  const std::vector<float> reprs{2, 4, 0, -2, 1, 0, -1, -2, 0, 0, 0, 0};
  const auto s = score_items(h, reprs, 3, 0.07);
  EXPECT_NEAR(s[0], 14.2857, 1e-4);
  EXPECT_NEAR(s[1], 0.0, 1e-6);
  EXPECT_NEAR(s[2], -14.2857, 1e-4);
  EXPECT_EQ(s[3], 0.0f);
  EXPECT_THROW(score_items(h, reprs, 3, 0.0), ConfigError);
}

TEST(ScoreItems, InvariantToPositiveRescaling) {
  const auto h = random_tensor<float>({16}, 5, 1.0), r = random_tensor<float>({30, 16}, 6, 1.0);
  std::vector<float> r3(r.values().begin(), r.values().end()), h7(h.values().begin(), h.values().end());
  for (auto& v : r3) v *= 3.0f;
  for (auto& v : h7) v *= 7.0f;
  const auto a = score_items(h.values(), r.values(), 16, 0.07), b = score_items(h7, r3, 16, 0.07);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST(Rank, TieBreakAndUniqueMax) {
  const std::vector<float> eq(5, 0.5f);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(rank_of_target<float>(eq, k), k + 1);
  const std::vector<float> s{0.1f, 0.9f, 0.3f};
  EXPECT_EQ(rank_of_target<float>(s, 1), 1u);
  EXPECT_THROW(rank_of_target<float>(s, 3), IndexError);
}

TEST(Rank, MatchesFullSortOracle) {
  auto rng = make_stream(7, Stream::kShuffle);
  for (int inst = 0; inst < 1000; ++inst) {
    std::vector<float> s(100);
    // Coarse values so ties are common.
    for (auto& v : s) v = static_cast<float>(rng.below(20));
    const auto target = rng.below(100);
    std::vector<std::size_t> order(100);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    const auto pos = std::find(order.begin(), order.end(), target) - order.begin();
    ASSERT_EQ(rank_of_target<float>(s, target), static_cast<std::size_t>(pos) + 1);
  }
}

TEST(Metrics, HitRateAndNdcg) {
  EXPECT_EQ(hr_at(1, 10), 1.0);
  EXPECT_EQ(ndcg_at(1, 10), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at(3, 10), 0.5);
  EXPECT_EQ(hr_at(11, 10), 0.0);
  EXPECT_EQ(ndcg_at(11, 10), 0.0);
  for (std::size_t r = 1; r < 30; ++r) EXPECT_EQ(hr_at(r, 1), ndcg_at(r, 1));
}

TEST(Shuffle, LengthOneAndMultiset) {
  auto rng = make_stream(8, Stream::kShuffle);
  const std::vector<int> one{42};
  for (auto m : {ShuffleMode::kChronological, ShuffleMode::kPartial, ShuffleMode::kComplete})
    EXPECT_EQ(shuffle_sequence(one, m, rng), one);
  const std::vector<int> seq{4, 1, 4, 9, 2, 7};
  for (int i = 0; i < 1000; ++i) {
    auto p = shuffle_sequence(seq, ShuffleMode::kPartial, rng);
    ASSERT_EQ(p.back(), 7);
    auto c = shuffle_sequence(seq, ShuffleMode::kComplete, rng);
    std::sort(p.begin(), p.end());
    std::sort(c.begin(), c.end());
    auto sorted = seq;
    std::sort(sorted.begin(), sorted.end());
    ASSERT_EQ(p, sorted);
    ASSERT_EQ(c, sorted);
  }
  EXPECT_EQ(shuffle_sequence(seq, ShuffleMode::kChronological, rng), seq);
  EXPECT_THROW(parse_shuffle_mode("random"), ConfigError);
}

TEST(Shuffle, CompleteModeIsUniformOverPermutations) {
  auto rng = make_stream(9, Stream::kShuffle);
  std::map<std::vector<int>, int> seen;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++seen[shuffle_sequence(std::vector<int>{1, 2, 3}, ShuffleMode::kComplete, rng)];
  ASSERT_EQ(seen.size(), 6u);
  const double p = 1.0 / 6.0, se = std::sqrt(p * (1 - p) / n);
  for (const auto& [perm, c] : seen) EXPECT_NEAR(c / static_cast<double>(n), p, 3.0 * se);
}

TEST(EvaluateRanking, OracleStubIsPerfect) {
  const auto syn = small_synth();
  const auto split = leave_one_out_split(syn.data);
  const BatchScorer oracle = [](const std::vector<std::vector<int>>& contexts,
                                const std::vector<const UserSplit*>& users) {
    std::vector<float> out(contexts.size() * 20, 0.0f);
    for (std::size_t i = 0; i < contexts.size(); ++i) out[i * 20 + static_cast<std::size_t>(users[i]->test_target)] = 1.0f;
    return out;
  };
  RankingOptions opt;
  opt.modes = {ShuffleMode::kChronological, ShuffleMode::kPartial, ShuffleMode::kComplete};
  const auto r = evaluate_ranking(split, 20, oracle, opt);
  for (const auto& m : r.modes) {
    EXPECT_EQ(m.users, split.users.size());
    EXPECT_EQ(m.at(1).hr, 1.0);
    EXPECT_EQ(m.at(1).ndcg, 1.0);
  }
}

TEST(EvaluateRanking, ChronologicalContextsAreUntouchedAndTruncated) {
  const auto syn = small_synth();
  const auto split = leave_one_out_split(syn.data);
  std::size_t checked = 0;
  const BatchScorer probe = [&](const std::vector<std::vector<int>>& contexts,
                                const std::vector<const UserSplit*>& users) {
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const auto want = truncate_recent(users[i]->test_context, 4);
      EXPECT_EQ(contexts[i], want);
      ++checked;
    }
    return std::vector<float>(contexts.size() * 20, 0.0f);
  };
  RankingOptions opt;
  opt.max_len = 4;
  opt.batch_size = 7;
  evaluate_ranking(split, 20, probe, opt);
  EXPECT_EQ(checked, split.users.size());
}

TEST(EvaluateRanking, MetricsAreMonotoneAndBatchInvariant) {
  const auto syn = small_synth();
  const auto split = leave_one_out_split(syn.data);
  const auto scorer = chain_oracle_scorer(syn.truth);
  RankingOptions opt;
  opt.modes = {ShuffleMode::kChronological, ShuffleMode::kComplete};
  opt.cutoffs = {1, 5, 10, 20};
  const auto a = evaluate_ranking(split, 20, scorer, opt);
  opt.batch_size = 3;
  opt.threads = 3;
  const auto b = evaluate_ranking(split, 20, scorer, opt);
  for (std::size_t m = 0; m < 2; ++m) {
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(a.modes[m].cutoffs[c].hr, b.modes[m].cutoffs[c].hr);
      EXPECT_EQ(a.modes[m].cutoffs[c].ndcg, b.modes[m].cutoffs[c].ndcg);
      if (c > 0) {
        EXPECT_LE(a.modes[m].cutoffs[c - 1].hr, a.modes[m].cutoffs[c].hr);
        EXPECT_LE(a.modes[m].cutoffs[c - 1].ndcg, a.modes[m].cutoffs[c].ndcg);
      }
      EXPECT_GE(a.modes[m].cutoffs[c].ndcg, 0.0);
      EXPECT_LE(a.modes[m].cutoffs[c].hr, 1.0);
    }
    EXPECT_EQ(a.modes[m].at(1).hr, a.modes[m].at(1).ndcg);
  }
  EXPECT_EQ(a.modes[0].at(20).hr, 1.0);
}

TEST(Popularity, CountsTrainingViewsOnly) {
  InteractionDataset ds{{{0, 1, 2, 3}, {1, 1, 3, 2}}, 5, 1, std::vector<float>(5, 1.0f)};
  const auto split = leave_one_out_split(ds);
  EXPECT_EQ(popularity_baseline(split, 5), (std::vector<float>{1, 3, 0, 0, 0}));
}

TEST(Popularity, UniformFrequenciesRankByIndex) {
  InteractionDataset ds{{{0, 1, 2, 0, 1}, {2, 0, 1, 2, 1}}, 3, 1, std::vector<float>(3, 1.0f)};
  const auto split = leave_one_out_split(ds);
  const auto pop = popularity_baseline(split, 3);
  EXPECT_EQ(pop, (std::vector<float>{2, 2, 2}));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(rank_of_target<float>(pop, k), k + 1);
}

TEST(Popularity, DominantItemRanksFirst) {
  InteractionDataset ds{{{3, 3, 1, 0, 2}, {3, 0, 3, 1, 2}, {2, 3, 3, 0, 1}}, 4, 1, std::vector<float>(4, 1.0f)};
  const auto split = leave_one_out_split(ds);
  const auto pop = popularity_baseline(split, 4);
  EXPECT_EQ(rank_of_target<float>(pop, 3), 1u);
}

TEST(Synth, DeterministicCycleGivesRotations) {
  SynthConfig c;
  c.num_users = 30;
  c.num_items = 6;
  c.min_len = 3;
  c.max_len = 15;
  c.d_text = 4;
  markov::TransitionMatrix cycle{6, std::vector<double>(36, 0.0), 0};
  for (std::size_t i = 0; i < 6; ++i) cycle.probs[i * 6 + (i + 1) % 6] = 1.0;
  const auto syn = generate_synthetic_dataset(c, {cycle});
  for (const auto& seq : syn.data.sequences) {
    ASSERT_GE(seq.size(), 3u);
    ASSERT_LE(seq.size(), 15u);
    for (std::size_t t = 1; t < seq.size(); ++t) ASSERT_EQ(seq[t], (seq[t - 1] + 1) % 6);
  }
  EXPECT_NO_THROW(syn.data.validate());
}

TEST(Synth, UnitEmbeddingsAndOracleCeiling) {
  const auto syn = small_synth();
  for (std::size_t i = 0; i < 20; ++i) {
    double ss = 0.0;
    for (float v : syn.data.embedding(i)) ss += v * v;
    EXPECT_NEAR(ss, 1.0, 1e-5);
  }
  const auto split = leave_one_out_split(syn.data);
  RankingOptions opt;
  const auto oracle = evaluate_ranking(split, 20, chain_oracle_scorer(syn.truth), opt);
  const auto pop = evaluate_ranking(split, 20, static_scorer(popularity_baseline(split, 20)), opt);
  EXPECT_GT(oracle.modes[0].at(10).ndcg, pop.modes[0].at(10).ndcg);
}

TEST(NipLoss, SingleItemCorpusIsZero) {
  const auto m = tiny_backbone();
  const auto w = init_model<float>(m, 0);
  const auto a = init_adaptor<float>(3, 16, 16, 0);
  const Tensor<float> items({1, 3}, {0.2f, -0.5f, 0.9f});
  const std::vector<int> seq{0, 0, 0, 0};
  const std::vector<std::span<const int>> batch{seq};
  Tape<float> tape;
  EXPECT_EQ(nip_loss(tape, w, m, a, nullptr, items, batch, FinetuneConfig{}).item(), 0.0f);
}

TEST(NipLoss, UntrainedAdaptorIsNearUniform) {
  const auto syn = small_synth(60, 200);
  const auto split = leave_one_out_split(syn.data);
  ModelConfig m = tiny_backbone(64);
  m.num_layers = 2;
  const auto w = init_model<float>(m, 0);
  const auto a = init_adaptor<float>(8, 64, 64, 0);
  const auto seqs = training_sequences(split, 50);
  Tape<float> tape;
  tape.set_recording(false);
  const double loss = nip_loss(tape, w, m, a, nullptr, item_tensor(syn.data), seqs, FinetuneConfig{}).item();
  EXPECT_NEAR(loss, std::log(200.0), 0.3);
}

TEST(NipLoss, GradientsReachAdaptorButNotBackbone) {
  const auto syn = small_synth();
  const auto split = leave_one_out_split(syn.data);
  const auto m = tiny_backbone();
  auto w = init_model<double>(m, 0);
  w.set_trainable(false);
  auto a = init_adaptor<double>(8, 16, 16, 0);
  const auto items = item_tensor(syn.data).cast<double>();
  const auto seqs = training_sequences(split, 50);
  Tape<double> tape;
  auto loss = nip_loss(tape, w, m, a, nullptr, items, seqs, FinetuneConfig{});
  tape.backward(loss);
  for (const auto& [name, t] : w.named()) EXPECT_FALSE(t.has_grad()) << name;
  for (const auto& [name, t] : a.named()) EXPECT_TRUE(t.has_grad()) << name;
}

TEST(NipLoss, AdaptorGradientMatchesFiniteDifferences) {
  auto items = random_tensor<double>({5, 3}, 12, 1.0);
  const auto m = tiny_backbone(8);
  auto w = init_model<double>(m, 1);
  w.set_trainable(false);
  auto a = init_adaptor<double>(3, 8, 6, 2);
  FinetuneConfig f;
  f.temperature = 0.5;
  const std::vector<int> s0{0, 1, 2, 3}, s1{4, 2, 0};
  const std::vector<std::span<const int>> batch{s0, s1};
  std::vector<Tensor<double>> wrt;
  for (const auto& [name, t] : a.named()) wrt.push_back(t);
  const double err =
      gradient_check([&](Tape<double>& t) { return nip_loss(t, w, m, a, nullptr, items, batch, f); }, wrt);
  EXPECT_LT(err, 1e-3);
}

TEST(TrainingSequences, KeepMostRecentItems) {
  InteractionDataset ds{{{0, 1, 2, 3, 4, 5, 6, 7}, {1, 2, 3}, {1, 2, 3, 4}}, 8, 1, std::vector<float>(8, 1.0f)};
  const auto split = leave_one_out_split(ds);
  const auto seqs = training_sequences(split, 3);
  ASSERT_EQ(seqs.size(), 2u);  // user 1 has a single training item
  EXPECT_EQ(std::vector<int>(seqs[0].begin(), seqs[0].end()), (std::vector<int>{2, 3, 4, 5}));
  EXPECT_EQ(std::vector<int>(seqs[1].begin(), seqs[1].end()), (std::vector<int>{1, 2}));
}

TEST(Finetune, ZeroEpochsReturnsInitialization) {
  const auto syn = small_synth();
  const auto m = tiny_backbone();
  const auto w = init_model<float>(m, 0);
  FinetuneConfig f;
  f.epochs = 0;
  f.seed = 5;
  const auto r = finetune_run(w, m, syn.data, f);
  const auto init = init_adaptor<float>(8, 16, f.hidden_units(m), f.seed);
  const auto a = r.adaptor.named(), b = init.named();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].second.values().begin(), a[i].second.values().end(), b[i].second.values().begin()));
  EXPECT_EQ(r.best_epoch, 0u);
  EXPECT_TRUE(r.curve.empty());
}

TEST(Finetune, DeterministicAndBackboneUntouched) {
  const auto syn = small_synth();
  const auto m = tiny_backbone();
  const auto w = init_model<float>(m, 0);
  const auto before = w.clone();
  FinetuneConfig f;
  f.epochs = 2;
  f.batch_size = 16;
  f.mode = FinetuneMode::kAdaptorPlusLora;
  f.lora.rank = 4;
  const auto a = finetune_run(w, m, syn.data, f), b = finetune_run(w, m, syn.data, f);
  ASSERT_EQ(a.curve.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.curve[e].train_loss, b.curve[e].train_loss);
    EXPECT_EQ(a.curve[e].valid_ndcg10, b.curve[e].valid_ndcg10);
  }
  ASSERT_TRUE(a.lora.has_value());
  const auto x = w.named(), y = before.named();
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_TRUE(std::equal(x[i].second.values().begin(), x[i].second.values().end(), y[i].second.values().begin()));
}

TEST(DumpAttention, RowStochasticLowerTriangular) {
  const auto syn = small_synth();
  ModelConfig m = tiny_backbone();
  m.num_layers = 2;
  const auto w = init_model<float>(m, 0);
  const auto a = init_adaptor<float>(8, 16, 16, 0);
  const std::vector<int> seq{3, 1, 4, 1, 5, 9};
  const auto att = dump_attention(w, m, a, nullptr, item_tensor(syn.data), seq, 50);
  ASSERT_EQ(att.shape(), (Shape{2, 2, 6, 6}));
  for (std::size_t r = 0; r < 2 * 2 * 6; ++r) {
    const std::size_t i = r % 6;
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      const float p = att.values()[r * 6 + j];
      if (j > i) {
        EXPECT_EQ(p, 0.0f);
      }
      s += p;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_THROW(dump_attention(w, m, a, nullptr, item_tensor(syn.data), seq, 5), LengthError);
}
