#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tss/config.hpp"
#include "tss/matching.hpp"
#include "tss/synthdata.hpp"
#include "tss/tensor_io.hpp"
#include "tss/tokenselect.hpp"
#include "tss/tokenshift.hpp"
#include "tss/transformer.hpp"

namespace tss {

// Checkpoint/config/data disagreements (exit code 4 surface).
struct IncompatError : TensorError {
    using TensorError::TensorError;
};

// Data-derived dimensions the towers are built around.
struct ModelGeometry {
    int64_t vocab = 0;
    int64_t max_text_len = 0;
    int64_t frames = 0;
    int64_t n_patches = 0;
    int64_t patch_dim = 0;

    static ModelGeometry of(const CorpusSpec& spec) {
        return {spec.vocab_size(), spec.caption_len(), spec.frames, spec.n_patches(), spec.patch_dim};
    }

    bool operator==(const ModelGeometry& o) const = default;

    nlohmann::json to_json() const {
        return {{"vocab", vocab}, {"max_text_len", max_text_len}, {"frames", frames},
                {"n_patches", n_patches}, {"patch_dim", patch_dim}};
    }

    static ModelGeometry from_json(const nlohmann::json& j) {
        return {j.at("vocab"), j.at("max_text_len"), j.at("frames"), j.at("n_patches"), j.at("patch_dim")};
    }

    std::string describe() const {
        return "vocab=" + std::to_string(vocab) + " max_text_len=" + std::to_string(max_text_len) +
               " frames=" + std::to_string(frames) + " n_patches=" + std::to_string(n_patches) +
               " patch_dim=" + std::to_string(patch_dim);
    }
};

// Two-tower retrieval model: causal text encoder pooled at [EOS], shift-
// enabled frame encoder, token selection with a joint spatial-temporal
// stack, and a trainable-temperature contrastive head.
struct Model {
    RunConfig cfg;
    ModelGeometry geom;
    TextEncoderParams text;
    VideoEncoderParams video;
    SelectionScorerParams scorer;
    SelectionTransformerParams select;
    LossState loss;

    static Model init(const RunConfig& cfg, const ModelGeometry& geom) {
        cfg.validate();
        if (cfg.top_k > geom.n_patches + 1)
            throw ConfigError("select.k = " + std::to_string(cfg.top_k) + " exceeds N+1 = " +
                              std::to_string(geom.n_patches + 1));
        Model m;
        m.cfg = cfg;
        m.geom = geom;
        CounterRng rng(cfg.seed, CounterRng::hash_str("model_init"));
        m.text = TextEncoderParams::init(geom.vocab, geom.max_text_len, cfg.channels, cfg.heads,
                                         cfg.text_layers, cfg.mlp_ratio, rng.derive("text"));
        m.video = VideoEncoderParams::init(geom.n_patches, geom.patch_dim, cfg.channels, cfg.heads,
                                           cfg.video_layers, cfg.mlp_ratio, rng.derive("video"));
        m.scorer = SelectionScorerParams::init(cfg.channels, rng.derive("scorer"));
        m.select = SelectionTransformerParams::init(geom.frames, cfg.channels, cfg.heads,
                                                    cfg.select_layers, cfg.mlp_ratio, rng.derive("select"));
        m.loss = LossState::init(cfg.tau_init);
        return m;
    }

    void visit(const std::function<void(const std::string&, Tensor&)>& fn) {
        text.visit(fn);
        video.visit(fn);
        scorer.visit(fn);
        select.visit(fn);
        fn("tau", loss.log_tau);
    }

    std::vector<std::pair<std::string, Tensor>> named_params() {
        std::vector<std::pair<std::string, Tensor>> out;
        visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
        return out;
    }

    // queries: [B, C]
    Tensor encode_queries(const std::vector<std::vector<int64_t>>& captions) {
        TextBatch batch = TextBatch::from_sequences(captions, /*pad_id=*/geom.vocab - 1, geom.max_text_len);
        return encode_text(batch, text);
    }

    // videos: [B, T, N, patch_dim] -> frame-wise embeddings [B, T, C].
    // video_keys identify each video stably (corpus indices) so perturbation
    // noise and random-selection draws are order-independent.
    Tensor encode_video_frames(const Tensor& videos, bool training, const CounterRng& noise,
                               const std::vector<uint64_t>& video_keys) {
        if (videos.rank() != 4) throw ArgumentError("encode_video_frames: expected [B, T, N, patch_dim]");
        int64_t b = videos.dim(0), t = videos.dim(1), c = cfg.channels;
        int64_t tokens = geom.n_patches + 1, k = cfg.top_k;
        if (static_cast<int64_t>(video_keys.size()) != b)
            throw ArgumentError("encode_video_frames: one key per video required");

        Tensor grids = encode_videos(videos, video, cfg.shift);          // [B, T, N+1, C]
        Tensor flat = reshape(grids, {b * t, tokens, c});

        if (cfg.selection == SelectionMode::all_tokens) {
            // All-token mean pooling: each frame enters the joint stack as
            // the uniform mixture of its tokens (M is one uniform column).
            Tensor uniform = Tensor::full({b * t, 1, tokens}, 1.0 / static_cast<double>(tokens));
            Tensor pooled = bmm(uniform, flat);  // [B*T, 1, C]
            return selection_transformer_batched(reshape(pooled, {b, t, 1, c}), select,
                                                 std::vector<int64_t>(static_cast<size_t>(b * t), 0));
        }

        std::vector<Tensor> indicators;
        std::vector<int64_t> slots(static_cast<size_t>(b * t), 0);
        indicators.reserve(static_cast<size_t>(b * t));
        if (cfg.selection == SelectionMode::learned) {
            Tensor scores = importance_scores_batched(flat, scorer);     // [B*T, N+1]
            Tensor score_rows = reshape(scores, {b * t, tokens});
            for (int64_t r = 0; r < b * t; ++r) {
                std::vector<int64_t> row_ids{r};
                Tensor srow = reshape(gather_rows(score_rows, row_ids), {tokens});
                CounterRng frame_noise =
                    noise.derive(video_keys[static_cast<size_t>(r / t)]).derive(static_cast<uint64_t>(r % t));
                Tensor m = (training && cfg.perturb.epsilon > 0)
                               ? perturbed_topk(srow, k, cfg.perturb, frame_noise)
                               : hard_topk(srow, k);
                indicators.push_back(reshape(m, {1, tokens, k}));
                slots[static_cast<size_t>(r)] = rank1_slot(srow.value(), hard_topk_indices(srow.value(), k));
            }
        } else {  // SelectionMode::random
            for (int64_t r = 0; r < b * t; ++r) {
                uint64_t key = noise.derive(video_keys[static_cast<size_t>(r / t)])
                                   .derive(static_cast<uint64_t>(r % t))
                                   .bits(0);
                Tensor m = random_topk(geom.n_patches, k, key);
                indicators.push_back(reshape(m, {1, tokens, k}));
                slots[static_cast<size_t>(r)] = 0;  // lowest-index selected token
            }
        }
        Tensor m_stack = concatenate(indicators, 0);                     // [B*T, N+1, K]
        Tensor selected = bmm(transpose(m_stack, {0, 2, 1}), flat);      // [B*T, K, C]
        return selection_transformer_batched(reshape(selected, {b, t, k, c}), select, slots);
    }

    void save_checkpoint(const std::string& path) {
        TensorArchive archive;
        nlohmann::json meta;
        meta["run_config"] = cfg.to_toml();
        meta["geometry"] = geom.to_json();
        archive.add("__meta__", text_to_tensor(meta.dump()));
        for (auto& [name, t] : named_params()) archive.add(name, t);
        archive.save(path);
    }

    static Model load_checkpoint(const std::string& path) {
        TensorArchive archive = TensorArchive::load(path);
        if (!archive.contains("__meta__")) throw IncompatError("checkpoint missing __meta__ record: " + path);
        nlohmann::json meta = nlohmann::json::parse(tensor_to_text(archive.get("__meta__")), nullptr, false);
        if (meta.is_discarded()) throw IncompatError("checkpoint __meta__ is not valid JSON: " + path);
        RunConfig cfg = RunConfig::from_toml(meta.at("run_config").get<std::string>());
        ModelGeometry geom = ModelGeometry::from_json(meta.at("geometry"));
        Model m = Model::init(cfg, geom);
        size_t assigned = 0;
        m.visit([&](const std::string& name, Tensor& t) {
            if (!archive.contains(name)) throw IncompatError("checkpoint missing parameter '" + name + "'");
            const Tensor& stored = archive.get(name);
            if (stored.shape() != t.shape())
                throw IncompatError("checkpoint parameter '" + name + "' has shape " +
                                    shape_str(stored.shape()) + ", model expects " + shape_str(t.shape()));
            t.mutable_value() = stored.value();
            ++assigned;
        });
        if (assigned + 1 != archive.size())
            throw IncompatError("checkpoint has " + std::to_string(archive.size() - 1) +
                                " parameter records, model expects " + std::to_string(assigned));
        return m;
    }

    std::string embedded_config_text() const {
        nlohmann::json meta;
        meta["run_config"] = cfg.to_toml();
        meta["geometry"] = geom.to_json();
        return meta.dump();
    }
};

}  // namespace tss
