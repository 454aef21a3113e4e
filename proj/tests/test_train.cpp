#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>

#include "fixture.hpp"
#include "test_util.hpp"

using namespace crackseg;

namespace {

UNetConfig small_model() {
    UNetConfig c;
    c.input_size = 32;
    c.base_filters = 4;
    c.depth = 2;
    return c;
}

TrainConfig small_train(std::size_t epochs) {
    TrainConfig t;
    t.max_epochs = epochs;
    t.batch_size = 2;
    t.eta = 1e-3;
    t.seed = 3;
    return t;
}

const std::vector<Sample>& small_corpus() {
    static const auto c = fixture::crack_corpus(6, 32, 99);
    return c;
}

}  // namespace

TEST(TrainConfig, Validation) {
    EXPECT_THROW(small_train(0).validate(), ConfigError);
    auto t = small_train(1);
    t.batch_size = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = small_train(1);
    t.split_fraction = 0.0;
    EXPECT_THROW(t.validate(), ConfigError);
    EXPECT_THROW(train(small_corpus(), small_model(), small_train(0)), ConfigError);
    EXPECT_THROW(train({}, small_model(), small_train(1)), ConfigError);
}

TEST(TrainConfig, StrictJson) {
    const auto j = to_json(small_train(4));
    const auto back = train_config_from_json(j);
    EXPECT_EQ(to_json(back), j);
    json bad = j;
    bad["leanring_rate"] = 0.1;
    try {
        train_config_from_json(bad);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("leanring_rate"), std::string::npos);
    }
}

TEST(Training, OneEpochOneRecord) {
    const auto r = train(small_corpus(), small_model(), small_train(1), AugmentSpec::none());
    ASSERT_EQ(r.log.epochs.size(), 1u);
    EXPECT_EQ(r.log.epochs[0].epoch, 1u);
    EXPECT_EQ(r.log.stop_reason, "max_epochs");
    EXPECT_EQ(r.log.best_epoch, 1u);
    EXPECT_TRUE(std::isfinite(r.log.epochs[0].train_loss));
}

TEST(Training, SameSeedGivesIdenticalCheckpoints) {
    const auto a = train(small_corpus(), small_model(), small_train(2));
    const auto b = train(small_corpus(), small_model(), small_train(2));
    EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
    auto other = small_train(2);
    other.seed = 4;
    const auto c = train(small_corpus(), small_model(), other);
    EXPECT_NE(encode_checkpoint(a.checkpoint), encode_checkpoint(c.checkpoint));
}

TEST(Training, ResumeMatchesStraightRun) {
    const auto dir = testutil::temp_dir("resume");
    const auto straight = train(small_corpus(), small_model(), small_train(6));
    train(small_corpus(), small_model(), small_train(3), {}, dir / "half.cseg");
    const auto half = load_checkpoint(dir / "half.cseg");
    EXPECT_EQ(half.meta.at("epoch").get<int>(), 3);
    const auto resumed = resume(half, small_corpus(), small_train(6));
    EXPECT_TRUE(resumed.log.warnings.empty());
    ASSERT_EQ(resumed.log.epochs.size(), 6u);
    EXPECT_EQ(encode_checkpoint(resumed.checkpoint), encode_checkpoint(straight.checkpoint));
    EXPECT_TRUE(resumed.params == straight.params);
}

TEST(Training, ResumeWithChangedBatchSizeWarns) {
    const auto first = train(small_corpus(), small_model(), small_train(1));
    auto changed = small_train(2);
    changed.batch_size = 3;
    const auto r = resume(first.checkpoint, small_corpus(), changed);
    ASSERT_FALSE(r.log.warnings.empty());
    EXPECT_NE(r.log.warnings[0].find("batch_size"), std::string::npos);
    EXPECT_EQ(r.log.epochs.size(), 2u);
}

TEST(Training, BestEpochAndValidationPurity) {
    TrainingSession s(small_corpus(), small_model(), small_train(4));
    const auto r = s.run();
    const auto& log = r.log;
    double best = 0.0;
    for (const auto& e : log.epochs) best = std::max(best, e.val_acc);
    EXPECT_EQ(log.best_val_acc, best);
    EXPECT_EQ(log.epochs[log.best_epoch - 1].val_acc, best);

    const auto params_before = s.params();
    const auto adam_before = s.adam_state();
    const auto v = validate_model(r.params, s.validation_samples(), 2, LossKind::weighted_ce, s.class_weights_used());
    EXPECT_EQ(v.accuracy, best);
    EXPECT_TRUE(s.params() == params_before);
    EXPECT_TRUE(s.adam_state() == adam_before);
}

TEST(Training, ClassWeightsComeFromTrainingSplit) {
    TrainingSession s(small_corpus(), small_model(), small_train(1), AugmentSpec::none());
    const auto st = pixel_stats(s.train_samples(), 3);
    const auto expected = class_weights(st.counts, st.presence_totals, WeightScheme::median_frequency);
    EXPECT_EQ(s.class_weights_used().alpha, expected.alpha);
}

TEST(Training, DiceObjectiveRuns) {
    auto t = small_train(2);
    t.loss = LossKind::dice;
    const auto r = train(small_corpus(), small_model(), t);
    EXPECT_EQ(r.log.epochs.size(), 2u);
    EXPECT_LT(r.log.epochs[1].train_loss, 1.0);
}

TEST(Training, LogWriters) {
    const auto dir = testutil::temp_dir("logs");
    const auto r = train(small_corpus(), small_model(), small_train(2));
    write_trainlog_csv(dir / "trainlog.csv", r.log);
    std::ifstream f(dir / "trainlog.csv");
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "epoch,train_loss,train_acc,val_loss,val_acc,seconds");
    const auto j = summary_json(r.log);
    EXPECT_EQ(j["stop_reason"], "max_epochs");
    EXPECT_EQ(j["epochs"].size(), 2u);
}

TEST(Training, OverfitsTheSyntheticCorpus) {
    const auto corpus = fixture::crack_corpus();
    TrainingSession s(corpus, fixture::overfit_model(), fixture::overfit_train(), AugmentSpec::none());
    const double initial = validate_model(s.params(), s.train_samples(), 2, LossKind::weighted_ce,
                                          s.class_weights_used()).loss;
    const auto r = s.run();
    ASSERT_GE(r.log.epochs.size(), 5u);
    int decreases = 0;
    double prev = initial;
    for (std::size_t e = 0; e < 5; ++e) {
        decreases += r.log.epochs[e].train_loss < prev;
        prev = r.log.epochs[e].train_loss;
    }
    EXPECT_GE(decreases, 4);
    EXPECT_LE(r.log.epochs.size(), 200u);
    EXPECT_GE(fixture::pixel_accuracy(r.params, s.train_samples()), 0.99);
}

TEST(Training, DivergenceIsATrainingError) {
    auto t = small_train(3);
    t.eta = 1e30;
    try {
        train(small_corpus(), small_model(), t);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
    }
}
