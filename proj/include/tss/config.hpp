#pragma once

#include <cstdint>
#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tss/tokenselect.hpp"
#include "tss/tokenshift.hpp"
#include "tss/toml_lite.hpp"

namespace tss {

// Full experiment description. Round-trips losslessly through the TOML-style
// text format; a dump is embedded in every checkpoint for provenance.
struct RunConfig {
    // model dims
    int64_t channels = 64;
    int64_t heads = 4;
    double mlp_ratio = 4.0;
    int64_t text_layers = 4;
    int64_t video_layers = 4;
    int64_t select_layers = 2;
    // token shift
    ShiftPlan shift;
    // token selection
    int64_t top_k = 4;
    PerturbConfig perturb;  // epsilon, samples
    SelectionMode selection = SelectionMode::learned;
    // matching
    double lambda = 4.0;
    double tau_init = 1.0 / 0.07;
    // optimizer
    double lr_backbone = 1e-4;
    double lr_select = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double weight_decay = 0.01;
    int64_t warmup_steps = 200;
    int64_t batch_size = 32;
    int64_t total_steps = 2000;
    uint64_t seed = 0;
    // data
    std::string train_data;
    std::string eval_data;
    // eval flags
    bool inverted_softmax = false;
    double beta = 20.0;
    std::vector<int64_t> eval_ks = {1, 5, 10};
    int64_t eval_every = 0;  // 0 = only at the end

    RunConfig() {
        shift.mode = ShiftMode::token_shift;
        shift.ratio = 0.25;
        shift.layers = {3, 4};  // top 2 of the default 4 video layers
        perturb.epsilon = 0.05;
        perturb.samples = 500;
    }

    void validate() const {
        if (channels < 2 || channels % 2 != 0)
            throw ConfigError("model.channels must be even and >= 2 (C/2 score reduction)");
        if (heads < 1 || channels % heads != 0) throw ConfigError("model.heads must divide model.channels");
        if (mlp_ratio <= 0) throw ConfigError("model.mlp_ratio must be positive");
        if (text_layers < 1 || video_layers < 1 || select_layers < 1)
            throw ConfigError("layer counts must be positive");
        if (shift.ratio < 0 || shift.ratio > 1) throw ConfigError("shift.ratio must be in [0,1]");
        for (int l : shift.layers)
            if (l < 1 || l > video_layers)
                throw ConfigError("shift.layers entries must lie in [1, video_layers]");
        if (top_k < 1) throw ConfigError("select.k must be >= 1");
        if (perturb.samples < 1) throw ConfigError("select.m must be >= 1");
        if (perturb.epsilon < 0) throw ConfigError("select.epsilon must be >= 0");
        if (lambda < 0) throw ConfigError("match.lambda must be >= 0");
        if (tau_init <= 0) throw ConfigError("match.tau_init must be positive");
        if (lr_backbone <= 0 || lr_select <= 0) throw ConfigError("learning rates must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("adam betas must lie in [0,1)");
        if (weight_decay < 0) throw ConfigError("optim.weight_decay must be >= 0");
        if (warmup_steps < 0 || batch_size < 1 || total_steps < 0)
            throw ConfigError("optim step/batch settings out of range");
        if (beta <= 0) throw ConfigError("eval.beta must be positive");
        if (eval_ks.empty()) throw ConfigError("eval.ks must not be empty");
        if (eval_every < 0) throw ConfigError("eval.every must be >= 0");
    }

    std::string to_toml() const {
        auto num = [](double v) {
            char buf[40];
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            return std::string(buf);
        };
        std::ostringstream out;
        out << "[model]\n";
        out << "channels = " << channels << "\n";
        out << "heads = " << heads << "\n";
        out << "mlp_ratio = " << num(mlp_ratio) << "\n";
        out << "text_layers = " << text_layers << "\n";
        out << "video_layers = " << video_layers << "\n";
        out << "select_layers = " << select_layers << "\n";
        out << "\n[shift]\n";
        out << "mode = \"" << to_string(shift.mode) << "\"\n";
        out << "layers = [";
        bool first = true;
        for (int l : shift.layers) {
            if (!first) out << ", ";
            out << l;
            first = false;
        }
        out << "]\n";
        out << "ratio = " << num(shift.ratio) << "\n";
        out << "\n[select]\n";
        out << "k = " << top_k << "\n";
        out << "epsilon = " << num(perturb.epsilon) << "\n";
        out << "m = " << perturb.samples << "\n";
        out << "mode = \"" << to_string(selection) << "\"\n";
        out << "\n[match]\n";
        out << "lambda = " << num(lambda) << "\n";
        out << "tau_init = " << num(tau_init) << "\n";
        out << "\n[optim]\n";
        out << "lr_backbone = " << num(lr_backbone) << "\n";
        out << "lr_select = " << num(lr_select) << "\n";
        out << "beta1 = " << num(beta1) << "\n";
        out << "beta2 = " << num(beta2) << "\n";
        out << "weight_decay = " << num(weight_decay) << "\n";
        out << "warmup_steps = " << warmup_steps << "\n";
        out << "batch_size = " << batch_size << "\n";
        out << "total_steps = " << total_steps << "\n";
        out << "seed = " << seed << "\n";
        out << "\n[data]\n";
        out << "train = \"" << train_data << "\"\n";
        out << "eval = \"" << eval_data << "\"\n";
        out << "\n[eval]\n";
        out << "inverted_softmax = " << (inverted_softmax ? "true" : "false") << "\n";
        out << "beta = " << num(beta) << "\n";
        out << "ks = [";
        for (size_t i = 0; i < eval_ks.size(); ++i) out << (i ? ", " : "") << eval_ks[i];
        out << "]\n";
        out << "every = " << eval_every << "\n";
        return out.str();
    }

    static RunConfig from_toml(const std::string& text) {
        TomlLite t = TomlLite::parse(text);
        t.expect_only({
            "model.channels", "model.heads", "model.mlp_ratio", "model.text_layers",
            "model.video_layers", "model.select_layers", "shift.mode", "shift.layers", "shift.ratio",
            "select.k", "select.epsilon", "select.m", "select.mode", "match.lambda", "match.tau_init",
            "optim.lr_backbone", "optim.lr_select", "optim.beta1", "optim.beta2", "optim.weight_decay",
            "optim.warmup_steps", "optim.batch_size", "optim.total_steps", "optim.seed", "data.train",
            "data.eval", "eval.inverted_softmax", "eval.beta", "eval.ks", "eval.every",
        });
        RunConfig c;
        try {
        if (t.contains("model.channels")) c.channels = t.get_int("model.channels");
        if (t.contains("model.heads")) c.heads = t.get_int("model.heads");
        if (t.contains("model.mlp_ratio")) c.mlp_ratio = t.get_double("model.mlp_ratio");
        if (t.contains("model.text_layers")) c.text_layers = t.get_int("model.text_layers");
        if (t.contains("model.video_layers")) c.video_layers = t.get_int("model.video_layers");
        if (t.contains("model.select_layers")) c.select_layers = t.get_int("model.select_layers");
        if (t.contains("shift.mode")) c.shift.mode = shift_mode_from_string(t.get_string("shift.mode"));
        if (t.contains("shift.layers")) {
            c.shift.layers.clear();
            for (int64_t l : t.get_int_list("shift.layers")) c.shift.layers.insert(static_cast<int>(l));
        } else if (t.contains("model.video_layers")) {
            c.shift.layers = {static_cast<int>(c.video_layers - 1), static_cast<int>(c.video_layers)};
            if (c.video_layers == 1) c.shift.layers = {1};
        }
        if (t.contains("shift.ratio")) c.shift.ratio = t.get_double("shift.ratio");
        if (t.contains("select.k")) c.top_k = t.get_int("select.k");
        if (t.contains("select.epsilon")) c.perturb.epsilon = t.get_double("select.epsilon");
        if (t.contains("select.m")) c.perturb.samples = t.get_int("select.m");
        if (t.contains("select.mode")) c.selection = selection_mode_from_string(t.get_string("select.mode"));
        if (t.contains("match.lambda")) c.lambda = t.get_double("match.lambda");
        if (t.contains("match.tau_init")) c.tau_init = t.get_double("match.tau_init");
        if (t.contains("optim.lr_backbone")) c.lr_backbone = t.get_double("optim.lr_backbone");
        if (t.contains("optim.lr_select")) c.lr_select = t.get_double("optim.lr_select");
        if (t.contains("optim.beta1")) c.beta1 = t.get_double("optim.beta1");
        if (t.contains("optim.beta2")) c.beta2 = t.get_double("optim.beta2");
        if (t.contains("optim.weight_decay")) c.weight_decay = t.get_double("optim.weight_decay");
        if (t.contains("optim.warmup_steps")) c.warmup_steps = t.get_int("optim.warmup_steps");
        if (t.contains("optim.batch_size")) c.batch_size = t.get_int("optim.batch_size");
        if (t.contains("optim.total_steps")) c.total_steps = t.get_int("optim.total_steps");
        if (t.contains("optim.seed")) c.seed = static_cast<uint64_t>(t.get_int("optim.seed"));
        if (t.contains("data.train")) c.train_data = t.get_string("data.train");
        if (t.contains("data.eval")) c.eval_data = t.get_string("data.eval");
        if (t.contains("eval.inverted_softmax")) c.inverted_softmax = t.get_bool("eval.inverted_softmax");
        if (t.contains("eval.beta")) c.beta = t.get_double("eval.beta");
        if (t.contains("eval.ks")) c.eval_ks = t.get_int_list("eval.ks");
        if (t.contains("eval.every")) c.eval_every = t.get_int("eval.every");
        } catch (const ConfigError&) {
            throw;
        } catch (const ArgumentError& e) {
            throw ConfigError(e.what());
        }
        c.validate();
        return c;
    }

    bool operator==(const RunConfig& o) const { return to_toml() == o.to_toml(); }
};

}  // namespace tss
