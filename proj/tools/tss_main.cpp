#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "tss/selftest.hpp"
#include "tss/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIncompat = 4;

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw tss::ConfigError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int cmd_train(const std::string& config_path, int64_t seed_override, const std::string& out,
              const std::string& log_path) {
    tss::RunConfig cfg = tss::RunConfig::from_toml(read_file(config_path));
    if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
    if (cfg.train_data.empty()) throw tss::ConfigError("config: data.train is required for training");

    std::ofstream log(log_path);
    if (!log) throw tss::ConfigError("cannot open log for writing: " + log_path);
    tss::TrainOptions opts;
    opts.log = &log;
    tss::TrainResult result = tss::train(cfg, opts);
    result.model.save_checkpoint(out);
    std::cout << "trained " << result.steps_run << " steps, final loss " << result.final_loss << "\n";
    std::cout << "checkpoint: " << out << "\nlog: " << log_path << "\n";

    if (!cfg.eval_data.empty()) {
        tss::Corpus eval_corpus = tss::load_corpus(cfg.eval_data);
        tss::EvalResult ev = tss::evaluate_model(result.model, eval_corpus);
        nlohmann::json out_json;
        out_json["t2v"] = ev.t2v.to_json();
        out_json["v2t"] = ev.v2t.to_json();
        std::cout << out_json.dump(1) << "\n";
    }
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, bool inverted, double beta,
             const std::string& dump_sim) {
    tss::Model model = tss::Model::load_checkpoint(checkpoint);
    if (inverted) model.cfg.inverted_softmax = true;
    if (beta > 0) model.cfg.beta = beta;
    tss::Corpus corpus = tss::load_corpus(data);
    tss::EvalResult ev = tss::evaluate_model(model, corpus);
    nlohmann::json out;
    out["t2v"] = ev.t2v.to_json();
    out["v2t"] = ev.v2t.to_json();
    std::cout << out.dump(1) << "\n";
    if (!dump_sim.empty()) {
        tss::TensorArchive archive;
        archive.add("similarity", ev.sim);
        archive.save(dump_sim);
        std::cerr << "similarity matrix written to " << dump_sim << "\n";
    }
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& grid, int64_t seeds,
               const std::string& out_md, const std::string& out_json) {
    tss::RunConfig cfg = tss::RunConfig::from_toml(read_file(config_path));
    if (cfg.train_data.empty()) throw tss::ConfigError("config: data.train is required for ablation");
    std::ofstream md(out_md);
    if (!md) throw tss::ConfigError("cannot open markdown output: " + out_md);
    nlohmann::json table = tss::ablate(cfg, grid, seeds, md, &std::cerr);
    std::ofstream js(out_json);
    if (!js) throw tss::ConfigError("cannot open json output: " + out_json);
    js << table.dump(1) << "\n";
    std::cout << "ablation table: " << out_md << " / " << out_json << "\n";
    return kExitOk;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out, const std::string& split) {
    tss::CorpusSpec spec = tss::CorpusSpec::from_toml(read_file(spec_path));
    tss::Corpus corpus = tss::generate_corpus(spec);
    if (split.empty()) {
        tss::save_corpus(corpus, out);
        std::cout << "wrote " << corpus.samples.size() << " samples to " << out << ".{manifest.json,tensors}\n";
        return kExitOk;
    }
    auto colon = split.find(':');
    if (colon == std::string::npos) throw tss::ConfigError("--split expects TRAIN:TEST counts");
    int64_t n_train = std::stoll(split.substr(0, colon));
    int64_t n_test = std::stoll(split.substr(colon + 1));
    if (n_train + n_test != spec.n_samples)
        throw tss::ConfigError("--split counts must sum to corpus.n_samples (" +
                               std::to_string(spec.n_samples) + ")");
    tss::save_corpus(corpus.slice(0, n_train), out + ".train");
    tss::save_corpus(corpus.slice(n_train, n_test), out + ".test");
    std::cout << "wrote " << n_train << " train / " << n_test << " test samples to " << out
              << ".{train,test}.*\n";
    return kExitOk;
}

int cmd_selftest(int64_t grad_seeds) {
    auto results = tss::run_selftest(grad_seeds);
    bool all = true;
    for (const auto& r : results) {
        std::printf("[%s] %-55s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds,
                    r.detail.c_str());
        all = all && r.passed;
    }
    return all ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"token shift + selection text-video retrieval testbed"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "train a model from a config file");
    std::string train_config, train_out = "checkpoint.tensors", train_log = "train_log.jsonl";
    int64_t train_seed = -1;
    train->add_option("--config", train_config, "run config (TOML)")->required();
    train->add_option("--seed", train_seed, "override optim.seed");
    train->add_option("--out", train_out, "checkpoint output path");
    train->add_option("--log", train_log, "JSON-lines training log path");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
    std::string eval_ckpt, eval_data, eval_dump;
    bool eval_inverted = false;
    double eval_beta = 0.0;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_data, "corpus base path")->required();
    eval->add_flag("--inverted-softmax", eval_inverted, "apply inverted softmax to t2v scores");
    eval->add_option("--beta", eval_beta, "inverted softmax temperature");
    eval->add_option("--dump-sim", eval_dump, "write the raw similarity matrix to this tensor file");

    auto* ablate = app.add_subcommand("ablate", "train/eval a parameter grid");
    std::string ab_config, ab_grid, ab_md = "ablation.md", ab_json = "ablation.json";
    int64_t ab_seeds = 3;
    ablate->add_option("--config", ab_config, "base run config (TOML)")->required();
    ablate->add_option("--grid", ab_grid, "grid, e.g. 'ratio=0,0.25;k=1,4'")->required();
    ablate->add_option("--seeds", ab_seeds, "seeds per cell");
    ablate->add_option("--out-md", ab_md, "markdown table output");
    ablate->add_option("--out-json", ab_json, "JSON table output");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
    std::string gen_spec, gen_out, gen_split;
    gen->add_option("--spec", gen_spec, "corpus spec (TOML)")->required();
    gen->add_option("--out", gen_out, "output base path")->required();
    gen->add_option("--split", gen_split, "split into TRAIN:TEST sample counts");

    auto* selftest = app.add_subcommand("selftest", "run the gradient and oracle suites");
    int64_t st_seeds = 100;
    selftest->add_option("--grad-seeds", st_seeds, "seeds for the primitive gradient sweep");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(train_config, train_seed, train_out, train_log);
        if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_inverted, eval_beta, eval_dump);
        if (*ablate) return cmd_ablate(ab_config, ab_grid, ab_seeds, ab_md, ab_json);
        if (*gen) return cmd_gen_data(gen_spec, gen_out, gen_split);
        if (*selftest) return cmd_selftest(st_seeds);
    } catch (const tss::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const tss::IncompatError& e) {
        std::cerr << "incompatibility: " << e.what() << "\n";
        return kExitIncompat;
    } catch (const tss::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const tss::GenerationError& e) {
        std::cerr << "generation error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const tss::ArgumentError& e) {
        std::cerr << "argument error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
