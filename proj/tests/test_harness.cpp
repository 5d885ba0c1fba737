#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "tss/train.hpp"

using namespace tss;

namespace {

CorpusSpec mini_corpus_spec(uint64_t seed = 5) {
    CorpusSpec s;
    s.n_samples = 8;
    s.frames = 3;
    s.grid_side = 2;
    s.patch_dim = 5;
    s.n_objects = 8;
    s.n_motions = 4;
    s.objects_per_video = 1;
    s.motions_per_video = 1;
    s.sigma_d = 0.3;
    s.seed = seed;
    return s;
}

RunConfig mini_run_config() {
    RunConfig c;
    c.channels = 8;
    c.heads = 2;
    c.mlp_ratio = 2.0;
    c.text_layers = 1;
    c.video_layers = 2;
    c.select_layers = 1;
    c.shift.layers = {2};
    c.shift.ratio = 0.25;
    c.top_k = 2;
    c.perturb.epsilon = 0.05;
    c.perturb.samples = 8;
    c.batch_size = 4;
    c.total_steps = 3;
    c.warmup_steps = 5;
    c.seed = 3;
    return c;
}

}  // namespace

TEST(RunConfig, TomlRoundTripIsLossless) {
    RunConfig c;
    c.channels = 32;
    c.shift.layers = {2, 4};
    c.shift.ratio = 0.125;
    c.perturb.epsilon = 0.031;
    c.perturb.samples = 77;
    c.selection = SelectionMode::random;
    c.lambda = 3.75;
    c.train_data = "/tmp/train";
    c.eval_data = "/tmp/eval";
    c.eval_ks = {1, 5};
    c.eval_every = 25;
    c.inverted_softmax = true;
    c.seed = 42;
    RunConfig back = RunConfig::from_toml(c.to_toml());
    EXPECT_EQ(back, c);
    EXPECT_EQ(back.to_toml(), c.to_toml());
}

TEST(RunConfig, UnknownAndInvalidKeysRejected) {
    EXPECT_THROW(RunConfig::from_toml("[model]\nchannel = 64\n"), ConfigError);
    EXPECT_THROW(RunConfig::from_toml("[model]\nchannels = 7\n"), ConfigError);
    EXPECT_THROW(RunConfig::from_toml("[shift]\nratio = 1.5\n"), ConfigError);
    EXPECT_THROW(RunConfig::from_toml("[shift]\nlayers = [9]\n"), ConfigError);
    EXPECT_THROW(RunConfig::from_toml("[select]\nmode = \"bogus\"\n"), ConfigError);
}

TEST(Optimizer, WarmupIsExactAtIntegerSteps) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    Model model = Model::init(cfg, ModelGeometry::of(corpus.spec));
    TwoGroupAdam opt(model, cfg);
    for (int64_t t = 1; t < cfg.warmup_steps; ++t) {
        EXPECT_DOUBLE_EQ(opt.lr_backbone(t),
                         cfg.lr_backbone * static_cast<double>(t) / static_cast<double>(cfg.warmup_steps));
        EXPECT_DOUBLE_EQ(opt.lr_select(t),
                         cfg.lr_select * static_cast<double>(t) / static_cast<double>(cfg.warmup_steps));
    }
    EXPECT_DOUBLE_EQ(opt.lr_backbone(cfg.warmup_steps), cfg.lr_backbone);
    EXPECT_DOUBLE_EQ(opt.lr_backbone(cfg.warmup_steps + 10), cfg.lr_backbone);
}

TEST(Optimizer, TwoGroupPartitionIsExact) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    Model model = Model::init(cfg, ModelGeometry::of(corpus.spec));
    TwoGroupAdam opt(model, cfg);
    auto groups = opt.group_assignment();
    size_t params = 0;
    model.visit([&](const std::string& name, Tensor&) {
        ++params;
        ASSERT_TRUE(groups.count(name)) << name;
        bool is_select = name.rfind("select.", 0) == 0;
        EXPECT_EQ(groups.at(name), is_select ? "select" : "backbone") << name;
    });
    EXPECT_EQ(groups.size(), params);
    EXPECT_EQ(groups.at("tau"), "backbone");
    EXPECT_EQ(groups.at("select.temporal_embed"), "select");
}

TEST(Train, ZeroStepsReturnsInitialization) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    cfg.total_steps = 0;
    TrainOptions opts;
    opts.train_corpus = &corpus;
    TrainResult res = train(cfg, opts);
    Model fresh = Model::init(cfg, ModelGeometry::of(corpus.spec));
    auto a = res.model.named_params(), b = fresh.named_params();
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_EQ(a[i].second.value(), b[i].second.value()) << a[i].first;
    }
}

TEST(Train, SameSeedSameFinalLoss) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    TrainOptions opts;
    opts.train_corpus = &corpus;
    TrainResult r1 = train(cfg, opts);
    TrainResult r2 = train(cfg, opts);
    EXPECT_EQ(r1.final_loss, r2.final_loss);
    auto a = r1.model.named_params(), b = r2.model.named_params();
    for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.value(), b[i].second.value()) << a[i].first;
}

TEST(Train, LossDecreasesOnTinyCorpus) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    cfg.total_steps = 30;
    cfg.warmup_steps = 3;
    std::ostringstream log;
    TrainOptions opts;
    opts.train_corpus = &corpus;
    opts.log = &log;
    TrainResult res = train(cfg, opts);
    // First data line follows the group-assignment header.
    std::istringstream lines(log.str());
    std::string line;
    std::getline(lines, line);  // header
    std::getline(lines, line);
    double first_loss = nlohmann::json::parse(line).at("loss");
    EXPECT_LT(res.final_loss, first_loss);
    EXPECT_EQ(res.steps_run, 30);
}

TEST(Train, LogLinesCarryContract) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    cfg.total_steps = 2;
    cfg.eval_every = 2;
    std::ostringstream log;
    TrainOptions opts;
    opts.train_corpus = &corpus;
    opts.eval_corpus = &corpus;
    opts.log = &log;
    train(cfg, opts);
    std::istringstream lines(log.str());
    std::string line;
    std::getline(lines, line);
    EXPECT_TRUE(nlohmann::json::parse(line).contains("groups"));
    std::getline(lines, line);
    nlohmann::json step1 = nlohmann::json::parse(line);
    EXPECT_EQ(step1.at("step"), 1);
    EXPECT_TRUE(step1.contains("loss"));
    EXPECT_TRUE(step1.contains("lr_b"));
    EXPECT_TRUE(step1.contains("lr_s"));
    EXPECT_FALSE(step1.contains("eval"));
    std::getline(lines, line);
    nlohmann::json step2 = nlohmann::json::parse(line);
    EXPECT_TRUE(step2.contains("eval"));
    EXPECT_TRUE(step2["eval"].contains("t2v"));
}

TEST(Checkpoint, RoundTripYieldsBitIdenticalSimilarityMatrix) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    TrainOptions opts;
    opts.train_corpus = &corpus;
    TrainResult res = train(cfg, opts);
    EvalResult before = evaluate_model(res.model, corpus);
    std::string path = testing::TempDir() + "ckpt_rt.tensors";
    res.model.save_checkpoint(path);
    Model loaded = Model::load_checkpoint(path);
    EvalResult after = evaluate_model(loaded, corpus);
    EXPECT_EQ(before.sim.value(), after.sim.value());
    EXPECT_EQ(before.t2v.to_json(), after.t2v.to_json());
}

TEST(Checkpoint, EmbeddedConfigSurvives) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    Model model = Model::init(cfg, ModelGeometry::of(corpus.spec));
    std::string path = testing::TempDir() + "ckpt_cfg.tensors";
    model.save_checkpoint(path);
    Model loaded = Model::load_checkpoint(path);
    EXPECT_EQ(loaded.cfg.to_toml(), cfg.to_toml());
    EXPECT_TRUE(loaded.geom == model.geom);
}

TEST(Checkpoint, GeometryMismatchIsIncompatible) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    Model model = Model::init(cfg, ModelGeometry::of(corpus.spec));
    CorpusSpec other_spec = mini_corpus_spec();
    other_spec.grid_side = 3;
    Corpus other = generate_corpus(other_spec);
    EXPECT_THROW(evaluate_model(model, other), IncompatError);
}

TEST(Evaluate, ShuffledCorpusOrderGivesIdenticalReports) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    TrainOptions opts;
    opts.train_corpus = &corpus;
    TrainResult res = train(cfg, opts);
    EvalResult a = evaluate_model(res.model, corpus);
    Corpus shuffled = corpus;
    std::swap(shuffled.samples[0], shuffled.samples[5]);
    std::swap(shuffled.samples[2], shuffled.samples[7]);
    EvalResult b = evaluate_model(res.model, shuffled);
    EXPECT_EQ(a.t2v.to_json(), b.t2v.to_json());
    EXPECT_EQ(a.v2t.to_json(), b.v2t.to_json());
}

TEST(Evaluate, InvertedSoftmaxDegenerateWithOneQuery) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    Corpus one = corpus.slice(0, 1);
    RunConfig cfg = mini_run_config();
    Model model = Model::init(cfg, ModelGeometry::of(corpus.spec));
    EvalResult plain = evaluate_model(model, one);
    Model flagged = model;
    flagged.cfg.inverted_softmax = true;
    EvalResult inv = evaluate_model(flagged, one);
    EXPECT_EQ(plain.t2v.to_json(), inv.t2v.to_json());
}

TEST(Ablate, GridParsingAndStructure) {
    EXPECT_THROW(parse_grid(""), ConfigError);
    EXPECT_THROW(parse_grid("bogus=1"), ConfigError);
    auto axes = parse_grid("ratio=0,0.25;selection=learned,random,all_tokens");
    ASSERT_EQ(axes.size(), 2u);
    EXPECT_EQ(axes[0].values.size(), 2u);
    EXPECT_EQ(axes[1].values.size(), 3u);
    RunConfig cfg = mini_run_config();
    apply_grid_value(cfg, "layers", "1-2");
    EXPECT_EQ(cfg.shift.layers, (std::set<int>{1, 2}));
    apply_grid_value(cfg, "layers", "none");
    EXPECT_TRUE(cfg.shift.layers.empty());
    apply_grid_value(cfg, "mode", "channel_shift");
    EXPECT_EQ(cfg.shift.mode, ShiftMode::channel_shift);
    apply_grid_value(cfg, "k", "3");
    EXPECT_EQ(cfg.top_k, 3);
}

TEST(Ablate, RunsTinyGridAndEmitsTable) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    std::string base = testing::TempDir() + "ablate_corpus";
    save_corpus(corpus, base);
    RunConfig cfg = mini_run_config();
    cfg.total_steps = 2;
    cfg.train_data = base;
    cfg.eval_data = base;
    std::ostringstream md;
    nlohmann::json table = ablate(cfg, "ratio=0,0.25", 2, md);
    ASSERT_EQ(table.size(), 2u);
    EXPECT_EQ(table[0]["settings"]["ratio"], "0");
    EXPECT_EQ(table[0]["rsum"]["per_seed"].size(), 2u);
    EXPECT_NE(md.str().find("t2v R@1"), std::string::npos);
    EXPECT_NE(md.str().find("±"), std::string::npos);
}

TEST(Train, EarlyStopOnTrainRecall) {
    Corpus corpus = generate_corpus(mini_corpus_spec());
    RunConfig cfg = mini_run_config();
    cfg.total_steps = 500;
    cfg.eval_every = 1;
    TrainOptions opts;
    opts.train_corpus = &corpus;
    opts.stop_at_train_r1 = 0.0;  // any eval satisfies the threshold
    TrainResult res = train(cfg, opts);
    EXPECT_EQ(res.steps_run, 1);
}
