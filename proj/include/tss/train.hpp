#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tss/config.hpp"
#include "tss/matching.hpp"
#include "tss/metrics.hpp"
#include "tss/model.hpp"
#include "tss/synthdata.hpp"

namespace tss {

// Adam with decoupled weight decay and two learning-rate groups: the
// backbone (text tower, video tower, tau) and the selection head (scoring
// MLPs, temporal embeddings, joint transformer). Decay applies to weight
// matrices only, never to biases, gains, embeddings of rank 1, or tau.
class TwoGroupAdam {
public:
    TwoGroupAdam(Model& model, const RunConfig& cfg) : cfg_(cfg) {
        model.visit([&](const std::string& name, Tensor& t) {
            Entry e;
            e.name = name;
            e.tensor = t;
            e.select_group = name.rfind("select.", 0) == 0;
            e.decay = t.rank() >= 2;
            e.m.assign(t.value().size(), 0.0);
            e.v.assign(t.value().size(), 0.0);
            params_.push_back(std::move(e));
        });
    }

    double lr_backbone(int64_t step) const { return warmup(step) * cfg_.lr_backbone; }
    double lr_select(int64_t step) const { return warmup(step) * cfg_.lr_select; }

    // step is 1-based. Linear warmup: lr * t / warmup for t < warmup.
    double warmup(int64_t step) const {
        if (cfg_.warmup_steps <= 0 || step >= cfg_.warmup_steps) return 1.0;
        return static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
    }

    void step(int64_t t) {
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
        for (auto& e : params_) {
            if (e.tensor.grad().empty()) continue;  // parameter unused this step
            double lr = e.select_group ? lr_select(t) : lr_backbone(t);
            auto& val = e.tensor.mutable_value();
            const auto& g = e.tensor.grad();
            for (size_t i = 0; i < val.size(); ++i) {
                e.m[i] = cfg_.beta1 * e.m[i] + (1.0 - cfg_.beta1) * g[i];
                e.v[i] = cfg_.beta2 * e.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double update = (e.m[i] / bc1) / (std::sqrt(e.v[i] / bc2) + 1e-8);
                if (e.decay) update += cfg_.weight_decay * val[i];
                val[i] -= lr * update;
            }
        }
    }

    void zero_grad() {
        for (auto& e : params_) e.tensor.zero_grad();
    }

    // Exact two-group partition, for logging and tests.
    std::map<std::string, std::string> group_assignment() const {
        std::map<std::string, std::string> out;
        for (const auto& e : params_) out[e.name] = e.select_group ? "select" : "backbone";
        return out;
    }

private:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool select_group = false;
        bool decay = false;
        std::vector<double> m, v;
    };
    RunConfig cfg_;
    std::vector<Entry> params_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    RetrievalReport t2v;
    RetrievalReport v2t;
    Tensor sim;  // raw (pre inverted-softmax) Bt x Bv similarity matrix
};

inline std::vector<std::vector<int64_t>> corpus_captions(const Corpus& corpus) {
    std::vector<std::vector<int64_t>> caps;
    caps.reserve(corpus.samples.size());
    for (const auto& s : corpus.samples) caps.push_back(s.caption);
    return caps;
}

inline Tensor stack_videos(const Corpus& corpus, const std::vector<int64_t>& ids) {
    const auto& spec = corpus.spec;
    std::vector<double> data;
    data.reserve(ids.size() * static_cast<size_t>(spec.frames * spec.n_patches() * spec.patch_dim));
    for (int64_t i : ids) {
        const auto& v = corpus.samples[static_cast<size_t>(i)].video.value();
        data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor::from(std::move(data),
                        {static_cast<int64_t>(ids.size()), spec.frames, spec.n_patches(), spec.patch_dim});
}

inline EvalResult evaluate_model(Model& model, const Corpus& corpus) {
    const int64_t n = static_cast<int64_t>(corpus.samples.size());
    if (n < 1) throw ArgumentError("evaluate: empty corpus");
    if (ModelGeometry::of(corpus.spec) != model.geom)
        throw IncompatError("checkpoint/data geometry mismatch: model expects " + model.geom.describe() +
                            ", corpus provides " + ModelGeometry::of(corpus.spec).describe());

    Tensor queries = model.encode_queries(corpus_captions(corpus)).detach();

    CounterRng eval_rng(model.cfg.seed, CounterRng::hash_str("eval"));
    std::vector<Tensor> chunks;
    const int64_t chunk = 16;
    for (int64_t at = 0; at < n; at += chunk) {
        int64_t len = std::min(chunk, n - at);
        std::vector<int64_t> ids(static_cast<size_t>(len));
        std::iota(ids.begin(), ids.end(), at);
        std::vector<uint64_t> keys(ids.begin(), ids.end());
        Tensor vids = stack_videos(corpus, ids);
        chunks.push_back(model.encode_video_frames(vids, /*training=*/false, eval_rng, keys).detach());
    }
    Tensor frame_embeds = chunks.size() == 1 ? chunks[0] : concatenate(chunks, 0);  // [Bv, T, C]

    EvalResult result;
    result.sim = similarity_matrix(queries, frame_embeds, model.cfg.lambda).detach();
    Tensor t2v_scores = model.cfg.inverted_softmax
                            ? inverted_softmax(result.sim, model.cfg.beta).detach()
                            : result.sim;
    std::vector<int64_t> pairing(static_cast<size_t>(n));
    std::iota(pairing.begin(), pairing.end(), 0);
    result.t2v = compute_metrics(t2v_scores, pairing, model.cfg.eval_ks, "t2v");
    result.v2t = compute_metrics(transpose(result.sim, {1, 0}), pairing, model.cfg.eval_ks, "v2t");
    return result;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
    Model model;
    double final_loss = 0.0;
    int64_t steps_run = 0;
};

inline std::vector<int64_t> batch_indices(int64_t corpus_size, int64_t batch, uint64_t seed, int64_t step) {
    int64_t b = std::min(batch, corpus_size);
    std::vector<int64_t> pool(static_cast<size_t>(corpus_size));
    std::iota(pool.begin(), pool.end(), 0);
    CounterRng rng = CounterRng(seed, CounterRng::hash_str("batch")).derive(static_cast<uint64_t>(step));
    for (int64_t i = 0; i < b; ++i) {
        int64_t j = i + static_cast<int64_t>(
                            rng.below(static_cast<uint64_t>(i), static_cast<uint64_t>(corpus_size - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(b));
    return pool;
}

// Optional early stop: when eval_every > 0, an eval corpus is present, and
// stop_at_r1 is reached on the monitored corpus, training ends early.
struct TrainOptions {
    std::ostream* log = nullptr;            // JSON-lines sink
    const Corpus* train_corpus = nullptr;   // overrides cfg.train_data when set
    const Corpus* eval_corpus = nullptr;    // overrides cfg.eval_data when set
    double stop_at_train_r1 = -1.0;         // monitor train-set t2v R@1; <0 disables
};

inline TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {}) {
    cfg.validate();
    Corpus train_corpus = opts.train_corpus ? *opts.train_corpus : load_corpus(cfg.train_data);
    Corpus eval_corpus;
    bool has_eval = false;
    if (opts.eval_corpus) {
        eval_corpus = *opts.eval_corpus;
        has_eval = true;
    } else if (!cfg.eval_data.empty()) {
        eval_corpus = load_corpus(cfg.eval_data);
        has_eval = true;
    }

    Model model = Model::init(cfg, ModelGeometry::of(train_corpus.spec));
    TwoGroupAdam opt(model, cfg);
    if (opts.log) {
        nlohmann::json head;
        head["groups"] = opt.group_assignment();
        (*opts.log) << head.dump() << "\n";
    }

    const int64_t n = static_cast<int64_t>(train_corpus.samples.size());
    TrainResult result{std::move(model), 0.0, 0};
    for (int64_t step = 1; step <= cfg.total_steps; ++step) {
        std::vector<int64_t> ids = batch_indices(n, cfg.batch_size, cfg.seed, step);
        std::vector<std::vector<int64_t>> captions;
        for (int64_t i : ids) captions.push_back(train_corpus.samples[static_cast<size_t>(i)].caption);
        Tensor videos = stack_videos(train_corpus, ids);
        std::vector<uint64_t> keys(ids.begin(), ids.end());

        CounterRng noise = CounterRng(cfg.seed, CounterRng::hash_str("perturb"))
                               .derive(static_cast<uint64_t>(step));
        Tensor queries = result.model.encode_queries(captions);
        Tensor frames = result.model.encode_video_frames(videos, /*training=*/true, noise, keys);
        Tensor sim = similarity_matrix(queries, frames, cfg.lambda);
        Tensor loss = symmetric_ce_loss(sim, result.model.loss);

        if (!std::isfinite(loss.item())) {
            std::ostringstream batch_dump;
            for (size_t i = 0; i < ids.size(); ++i) batch_dump << (i ? "," : "") << ids[i];
            throw NumericError("non-finite loss at step " + std::to_string(step) + " (batch indices [" +
                               batch_dump.str() + "], tau=" + std::to_string(result.model.loss.tau_value()) +
                               ")");
        }

        opt.zero_grad();
        backward(loss);
        opt.step(step);
        result.final_loss = loss.item();
        result.steps_run = step;

        bool do_eval = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.total_steps);
        nlohmann::json line;
        line["step"] = step;
        line["loss"] = loss.item();
        line["lr_b"] = opt.lr_backbone(step);
        line["lr_s"] = opt.lr_select(step);
        double train_r1 = -1;
        if (do_eval) {
            nlohmann::json evals;
            EvalResult train_eval = evaluate_model(result.model, train_corpus);
            evals["train_t2v"] = train_eval.t2v.to_json();
            train_r1 = train_eval.t2v.r_at.count(1) ? train_eval.t2v.r_at.at(1) : -1;
            if (has_eval) {
                EvalResult ev = evaluate_model(result.model, eval_corpus);
                evals["t2v"] = ev.t2v.to_json();
                evals["v2t"] = ev.v2t.to_json();
            }
            line["eval"] = evals;
        }
        if (opts.log) (*opts.log) << line.dump() << "\n";
        if (opts.stop_at_train_r1 >= 0 && train_r1 >= opts.stop_at_train_r1) break;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

struct AblationAxis {
    std::string name;                 // ratio | mode | layers | k | selection
    std::vector<std::string> values;  // raw value tokens
};

inline std::vector<AblationAxis> parse_grid(const std::string& spec) {
    std::vector<AblationAxis> axes;
    std::istringstream in(spec);
    std::string axis_text;
    while (std::getline(in, axis_text, ';')) {
        if (axis_text.empty()) continue;
        auto eq = axis_text.find('=');
        if (eq == std::string::npos) throw ConfigError("grid axis '" + axis_text + "': expected name=v1,v2");
        AblationAxis axis;
        axis.name = axis_text.substr(0, eq);
        std::istringstream vals(axis_text.substr(eq + 1));
        std::string v;
        while (std::getline(vals, v, ',')) axis.values.push_back(v);
        if (axis.name != "ratio" && axis.name != "mode" && axis.name != "layers" && axis.name != "k" &&
            axis.name != "selection")
            throw ConfigError("unknown grid axis '" + axis.name +
                              "' (expected ratio|mode|layers|k|selection)");
        if (axis.values.empty()) throw ConfigError("grid axis '" + axis.name + "' has no values");
        axes.push_back(std::move(axis));
    }
    if (axes.empty()) throw ConfigError("empty ablation grid");
    return axes;
}

inline void apply_grid_value(RunConfig& cfg, const std::string& axis, const std::string& value) {
    if (axis == "ratio") {
        cfg.shift.ratio = std::stod(value);
    } else if (axis == "mode") {
        cfg.shift.mode = shift_mode_from_string(value);
    } else if (axis == "layers") {
        cfg.shift.layers.clear();
        if (value != "none") {
            auto dash = value.find('-');
            if (dash == std::string::npos) throw ConfigError("grid layers value '" + value + "': expected a-b or none");
            int lo = std::stoi(value.substr(0, dash)), hi = std::stoi(value.substr(dash + 1));
            for (int l = lo; l <= hi; ++l) cfg.shift.layers.insert(l);
        }
    } else if (axis == "k") {
        cfg.top_k = std::stoll(value);
    } else if (axis == "selection") {
        cfg.selection = selection_mode_from_string(value);
    }
}

struct AblationCellResult {
    std::map<std::string, std::string> settings;
    std::vector<double> t2v_r1, t2v_r5, rsum_total;  // per seed; rsum = t2v + v2t

    static double mean(const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }
    static double stddev(const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        double m = mean(v), s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size()));
    }
};

// Trains and evaluates every grid cell over the shared seed set and renders
// a markdown + JSON table of mean +/- stddev retrieval numbers.
inline nlohmann::json ablate(const RunConfig& base, const std::string& grid_spec, int64_t n_seeds,
                             std::ostream& markdown, std::ostream* progress = nullptr) {
    std::vector<AblationAxis> axes = parse_grid(grid_spec);
    Corpus train_corpus = load_corpus(base.train_data);
    Corpus eval_corpus = load_corpus(base.eval_data.empty() ? base.train_data : base.eval_data);

    std::vector<AblationCellResult> cells;
    std::vector<size_t> cursor(axes.size(), 0);
    bool done = false;
    while (!done) {
        RunConfig cfg = base;
        AblationCellResult cell;
        for (size_t a = 0; a < axes.size(); ++a) {
            apply_grid_value(cfg, axes[a].name, axes[a].values[cursor[a]]);
            cell.settings[axes[a].name] = axes[a].values[cursor[a]];
        }
        cfg.validate();
        for (int64_t s = 0; s < n_seeds; ++s) {
            RunConfig run_cfg = cfg;
            run_cfg.seed = base.seed + static_cast<uint64_t>(s);
            if (progress) {
                (*progress) << "cell";
                for (const auto& [k, v] : cell.settings) (*progress) << " " << k << "=" << v;
                (*progress) << " seed=" << run_cfg.seed << std::endl;
            }
            TrainOptions opts;
            opts.train_corpus = &train_corpus;
            TrainResult res = train(run_cfg, opts);
            EvalResult ev = evaluate_model(res.model, eval_corpus);
            cell.t2v_r1.push_back(ev.t2v.r_at.count(1) ? ev.t2v.r_at.at(1) : 0.0);
            cell.t2v_r5.push_back(ev.t2v.r_at.count(5) ? ev.t2v.r_at.at(5) : 0.0);
            cell.rsum_total.push_back(ev.t2v.rsum + ev.v2t.rsum);
        }
        cells.push_back(std::move(cell));
        for (size_t a = axes.size(); a-- > 0;) {
            if (++cursor[a] < axes[a].values.size()) break;
            cursor[a] = 0;
            if (a == 0) done = true;
        }
    }

    // Markdown table.
    markdown << "|";
    for (const auto& axis : axes) markdown << " " << axis.name << " |";
    markdown << " t2v R@1 | t2v R@5 | rsum |\n|";
    for (size_t a = 0; a < axes.size() + 3; ++a) markdown << "---|";
    markdown << "\n";
    char buf[64];
    for (const auto& cell : cells) {
        markdown << "|";
        for (const auto& axis : axes) markdown << " " << cell.settings.at(axis.name) << " |";
        std::snprintf(buf, sizeof(buf), " %.2f ± %.2f |", AblationCellResult::mean(cell.t2v_r1),
                      AblationCellResult::stddev(cell.t2v_r1));
        markdown << buf;
        std::snprintf(buf, sizeof(buf), " %.2f ± %.2f |", AblationCellResult::mean(cell.t2v_r5),
                      AblationCellResult::stddev(cell.t2v_r5));
        markdown << buf;
        std::snprintf(buf, sizeof(buf), " %.2f ± %.2f |", AblationCellResult::mean(cell.rsum_total),
                      AblationCellResult::stddev(cell.rsum_total));
        markdown << buf << "\n";
    }

    nlohmann::json out = nlohmann::json::array();
    for (const auto& cell : cells) {
        nlohmann::json c;
        c["settings"] = cell.settings;
        c["t2v_r1"] = {{"mean", AblationCellResult::mean(cell.t2v_r1)},
                       {"stddev", AblationCellResult::stddev(cell.t2v_r1)},
                       {"per_seed", cell.t2v_r1}};
        c["t2v_r5"] = {{"mean", AblationCellResult::mean(cell.t2v_r5)},
                       {"stddev", AblationCellResult::stddev(cell.t2v_r5)},
                       {"per_seed", cell.t2v_r5}};
        c["rsum"] = {{"mean", AblationCellResult::mean(cell.rsum_total)},
                     {"stddev", AblationCellResult::stddev(cell.rsum_total)},
                     {"per_seed", cell.rsum_total}};
        out.push_back(c);
    }
    return out;
}

}  // namespace tss
