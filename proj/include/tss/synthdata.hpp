#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tss/rng.hpp"
#include "tss/tensor.hpp"
#include "tss/tensor_io.hpp"
#include "tss/toml_lite.hpp"

namespace tss {

struct GenerationError : TensorError {
    using TensorError::TensorError;
};

// Synthetic text-video corpus with planted fine-grained signals: object
// symbols occupy exactly one patch (so pooling over all tokens dilutes
// them), motion symbols modulate one patch with a period-2 alternation whose
// phase is random (so no single frame carries the signal in expectation;
// only adjacent-frame comparison reveals it).
struct CorpusSpec {
    int64_t n_samples = 512;
    int64_t frames = 8;        // T
    int64_t grid_side = 4;     // g; N = g^2 patches
    int64_t patch_dim = 12;
    int64_t n_objects = 24;    // |O|
    int64_t n_motions = 8;     // |M|
    int64_t objects_per_video = 2;
    int64_t motions_per_video = 1;
    double sigma_d = 0.5;      // distractor clutter level
    uint64_t seed = 1;

    int64_t n_patches() const { return grid_side * grid_side; }
    int64_t eos_id() const { return n_objects + n_motions; }
    int64_t pad_id() const { return n_objects + n_motions + 1; }
    int64_t vocab_size() const { return n_objects + n_motions + 2; }
    int64_t caption_len() const { return objects_per_video + motions_per_video + 1; }

    void validate() const {
        if (n_samples < 1 || frames < 1 || grid_side < 1 || patch_dim < 1)
            throw ConfigError("corpus spec: sizes must be positive");
        if (objects_per_video < 0 || motions_per_video < 0 || objects_per_video > n_objects ||
            motions_per_video > n_motions)
            throw ConfigError("corpus spec: per-video symbol counts out of range");
        if (objects_per_video + motions_per_video < 1)
            throw ConfigError("corpus spec: every caption needs at least one symbol");
        if (objects_per_video + motions_per_video > n_patches())
            throw ConfigError("corpus spec: more planted signals than patches");
        if (motions_per_video > 0 && frames < 2)
            throw ConfigError("corpus spec: motions need at least 2 frames");
        if (sigma_d < 0) throw ConfigError("corpus spec: sigma_d must be >= 0");
    }

    nlohmann::json to_json() const {
        return {{"n_samples", n_samples},     {"frames", frames},
                {"grid_side", grid_side},     {"patch_dim", patch_dim},
                {"n_objects", n_objects},     {"n_motions", n_motions},
                {"objects_per_video", objects_per_video},
                {"motions_per_video", motions_per_video},
                {"sigma_d", sigma_d},         {"seed", seed}};
    }

    static CorpusSpec from_json(const nlohmann::json& j) {
        CorpusSpec s;
        s.n_samples = j.at("n_samples");
        s.frames = j.at("frames");
        s.grid_side = j.at("grid_side");
        s.patch_dim = j.at("patch_dim");
        s.n_objects = j.at("n_objects");
        s.n_motions = j.at("n_motions");
        s.objects_per_video = j.at("objects_per_video");
        s.motions_per_video = j.at("motions_per_video");
        s.sigma_d = j.at("sigma_d");
        s.seed = j.at("seed");
        return s;
    }

    static CorpusSpec from_toml(const std::string& text) {
        TomlLite t = TomlLite::parse(text);
        t.expect_only({"corpus.n_samples", "corpus.frames", "corpus.grid_side", "corpus.patch_dim",
                       "corpus.n_objects", "corpus.n_motions", "corpus.objects_per_video",
                       "corpus.motions_per_video", "corpus.sigma_d", "corpus.seed"});
        CorpusSpec s;
        if (t.contains("corpus.n_samples")) s.n_samples = t.get_int("corpus.n_samples");
        if (t.contains("corpus.frames")) s.frames = t.get_int("corpus.frames");
        if (t.contains("corpus.grid_side")) s.grid_side = t.get_int("corpus.grid_side");
        if (t.contains("corpus.patch_dim")) s.patch_dim = t.get_int("corpus.patch_dim");
        if (t.contains("corpus.n_objects")) s.n_objects = t.get_int("corpus.n_objects");
        if (t.contains("corpus.n_motions")) s.n_motions = t.get_int("corpus.n_motions");
        if (t.contains("corpus.objects_per_video")) s.objects_per_video = t.get_int("corpus.objects_per_video");
        if (t.contains("corpus.motions_per_video")) s.motions_per_video = t.get_int("corpus.motions_per_video");
        if (t.contains("corpus.sigma_d")) s.sigma_d = t.get_double("corpus.sigma_d");
        if (t.contains("corpus.seed")) s.seed = static_cast<uint64_t>(t.get_int("corpus.seed"));
        s.validate();
        return s;
    }
};

struct PlantedObject {
    int64_t symbol = 0;  // object symbol id
    int64_t patch = 0;
    int64_t t0 = 0, t1 = 0;  // inclusive frame span
};

struct PlantedMotion {
    int64_t symbol = 0;  // motion symbol id (already offset by |O|)
    int64_t patch = 0;
    int64_t t0 = 0, t1 = 0;
    int64_t phase = 0;  // sign of the alternation at t0
};

struct Sample {
    Tensor video;  // [T, N, patch_dim]
    std::vector<int64_t> caption;  // sorted symbol ids + [EOS]
    std::vector<PlantedObject> objects;
    std::vector<PlantedMotion> motions;
};

struct Corpus {
    CorpusSpec spec;
    std::vector<Sample> samples;

    Corpus slice(int64_t from, int64_t count) const {
        if (from < 0 || from + count > static_cast<int64_t>(samples.size()))
            throw ArgumentError("corpus slice out of range");
        Corpus c;
        c.spec = spec;
        c.spec.n_samples = count;
        c.samples.assign(samples.begin() + from, samples.begin() + from + count);
        return c;
    }
};

// Unit-norm signature templates, a pure function of (kind, symbol, dim) so
// tests can look them up independently of any corpus seed.
inline std::vector<double> object_template(int64_t symbol, int64_t patch_dim) {
    CounterRng rng(0x0b9ec7u, CounterRng::hash_str("object_template") ^ static_cast<uint64_t>(symbol));
    std::vector<double> v(static_cast<size_t>(patch_dim));
    double n2 = 0;
    for (int64_t i = 0; i < patch_dim; ++i) {
        v[static_cast<size_t>(i)] = rng.normal(static_cast<uint64_t>(i));
        n2 += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
    }
    for (auto& x : v) x /= std::sqrt(n2);
    return v;
}

inline std::vector<double> motion_template(int64_t symbol, int64_t patch_dim) {
    CounterRng rng(0x307104u, CounterRng::hash_str("motion_template") ^ static_cast<uint64_t>(symbol));
    std::vector<double> v(static_cast<size_t>(patch_dim));
    double n2 = 0;
    for (int64_t i = 0; i < patch_dim; ++i) {
        v[static_cast<size_t>(i)] = rng.normal(static_cast<uint64_t>(i));
        n2 += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
    }
    for (auto& x : v) x /= std::sqrt(n2);
    return v;
}

namespace detail {

inline std::vector<int64_t> draw_distinct(const CounterRng& rng, int64_t count, int64_t n) {
    std::vector<int64_t> pool(static_cast<size_t>(n));
    std::iota(pool.begin(), pool.end(), 0);
    for (int64_t i = 0; i < count; ++i) {
        int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(i), static_cast<uint64_t>(n - i)));
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    }
    pool.resize(static_cast<size_t>(count));
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus corpus;
    corpus.spec = spec;
    const int64_t t = spec.frames, n = spec.n_patches(), d = spec.patch_dim;
    std::set<std::vector<int64_t>> seen;
    const int64_t max_attempts = 64;

    for (int64_t i = 0; i < spec.n_samples; ++i) {
        CounterRng rng = CounterRng(spec.seed, CounterRng::hash_str("sample")).derive(static_cast<uint64_t>(i));

        // Symbol multiset must be unique corpus-wide (rejection, bounded).
        std::vector<int64_t> obj_syms, mot_syms, key;
        bool found = false;
        for (int64_t attempt = 0; attempt < max_attempts && !found; ++attempt) {
            CounterRng arng = rng.derive("combo").derive(static_cast<uint64_t>(attempt));
            obj_syms = detail::draw_distinct(arng.derive(0), spec.objects_per_video, spec.n_objects);
            mot_syms = detail::draw_distinct(arng.derive(1), spec.motions_per_video, spec.n_motions);
            key = obj_syms;
            for (int64_t m : mot_syms) key.push_back(spec.n_objects + m);
            found = seen.insert(key).second;
        }
        if (!found)
            throw GenerationError(
                "cannot generate " + std::to_string(spec.n_samples) +
                " caption-unique samples: vocabulary too small for distinct symbol multisets "
                "(n_objects=" + std::to_string(spec.n_objects) +
                ", n_motions=" + std::to_string(spec.n_motions) + ")");

        Sample sample;
        sample.caption = key;  // ascending ids; objects precede motions by construction
        sample.caption.push_back(spec.eos_id());

        // Clutter everywhere, then planted signals replace their patches.
        CounterRng crng = rng.derive("clutter");
        std::vector<double> video(static_cast<size_t>(t * n * d));
        for (size_t j = 0; j < video.size(); ++j) video[j] = spec.sigma_d * crng.normal(static_cast<uint64_t>(j));

        CounterRng prng = rng.derive("plant");
        std::vector<int64_t> locations =
            detail::draw_distinct(prng.derive("locations"), spec.objects_per_video + spec.motions_per_video, n);
        // Shuffle span/phase decisions off one stream per signal.
        int64_t slot = 0;
        for (int64_t s : obj_syms) {
            CounterRng srng = prng.derive("object").derive(static_cast<uint64_t>(slot));
            int64_t min_len = (t + 1) / 2;
            int64_t len = min_len + static_cast<int64_t>(srng.below(0, static_cast<uint64_t>(t - min_len + 1)));
            int64_t t0 = static_cast<int64_t>(srng.below(1, static_cast<uint64_t>(t - len + 1)));
            PlantedObject po{s, locations[static_cast<size_t>(slot)], t0, t0 + len - 1};
            auto tmpl = object_template(s, d);
            for (int64_t f = po.t0; f <= po.t1; ++f)
                for (int64_t j = 0; j < d; ++j)
                    video[static_cast<size_t>((f * n + po.patch) * d + j)] = tmpl[static_cast<size_t>(j)];
            sample.objects.push_back(po);
            ++slot;
        }
        for (int64_t s : mot_syms) {
            CounterRng srng = prng.derive("motion").derive(static_cast<uint64_t>(slot));
            int64_t min_len = std::max<int64_t>(2, (t + 1) / 2);
            int64_t len = min_len + static_cast<int64_t>(srng.below(0, static_cast<uint64_t>(t - min_len + 1)));
            int64_t t0 = static_cast<int64_t>(srng.below(1, static_cast<uint64_t>(t - len + 1)));
            int64_t phase = static_cast<int64_t>(srng.below(2, 2));
            PlantedMotion pm{spec.n_objects + s, locations[static_cast<size_t>(slot)], t0, t0 + len - 1, phase};
            auto tmpl = motion_template(s, d);
            for (int64_t f = pm.t0; f <= pm.t1; ++f) {
                double sign = ((f - pm.t0 + phase) % 2 == 0) ? 1.0 : -1.0;
                for (int64_t j = 0; j < d; ++j)
                    video[static_cast<size_t>((f * n + pm.patch) * d + j)] = sign * tmpl[static_cast<size_t>(j)];
            }
            sample.motions.push_back(pm);
            ++slot;
        }
        sample.video = Tensor::from(std::move(video), {t, n, d});
        corpus.samples.push_back(std::move(sample));
    }
    return corpus;
}

// Corpus file layout: <base>.manifest.json + <base>.tensors.
inline void save_corpus(const Corpus& corpus, const std::string& base) {
    TensorArchive archive;
    for (size_t i = 0; i < corpus.samples.size(); ++i)
        archive.add("sample" + std::to_string(i) + ".video", corpus.samples[i].video);
    archive.save(base + ".tensors");

    nlohmann::json manifest;
    manifest["spec"] = corpus.spec.to_json();
    manifest["n_samples"] = static_cast<int64_t>(corpus.samples.size());
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a_file(base + ".tensors")));
    manifest["checksum"] = std::string(hex);
    nlohmann::json metas = nlohmann::json::array();
    for (const auto& s : corpus.samples) {
        nlohmann::json m;
        m["caption"] = s.caption;
        nlohmann::json objs = nlohmann::json::array();
        for (const auto& o : s.objects)
            objs.push_back({{"symbol", o.symbol}, {"patch", o.patch}, {"t0", o.t0}, {"t1", o.t1}});
        nlohmann::json mots = nlohmann::json::array();
        for (const auto& mo : s.motions)
            mots.push_back({{"symbol", mo.symbol}, {"patch", mo.patch}, {"t0", mo.t0}, {"t1", mo.t1},
                            {"phase", mo.phase}});
        m["objects"] = objs;
        m["motions"] = mots;
        metas.push_back(m);
    }
    manifest["samples"] = metas;
    std::ofstream out(base + ".manifest.json");
    if (!out) throw IoError("cannot write manifest: " + base + ".manifest.json");
    out << manifest.dump(1) << "\n";
}

inline Corpus load_corpus(const std::string& base) {
    std::ifstream in(base + ".manifest.json");
    if (!in) throw IoError("cannot open manifest: " + base + ".manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(in, nullptr, false);
    if (manifest.is_discarded()) throw IoError("malformed manifest JSON: " + base + ".manifest.json");

    Corpus corpus;
    corpus.spec = CorpusSpec::from_json(manifest.at("spec"));
    int64_t n = manifest.at("n_samples");
    TensorArchive archive = TensorArchive::load(base + ".tensors");
    if (static_cast<int64_t>(archive.size()) != n)
        throw IoError("manifest sample count " + std::to_string(n) + " does not match archive records " +
                      std::to_string(archive.size()));
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a_file(base + ".tensors")));
    if (manifest.at("checksum").get<std::string>() != hex)
        throw IoError("corpus checksum mismatch for " + base + ".tensors");
    const auto& metas = manifest.at("samples");
    if (static_cast<int64_t>(metas.size()) != n) throw IoError("manifest metadata count mismatch");
    for (int64_t i = 0; i < n; ++i) {
        Sample s;
        s.video = archive.get("sample" + std::to_string(i) + ".video");
        const auto& m = metas[static_cast<size_t>(i)];
        s.caption = m.at("caption").get<std::vector<int64_t>>();
        for (const auto& o : m.at("objects"))
            s.objects.push_back({o.at("symbol"), o.at("patch"), o.at("t0"), o.at("t1")});
        for (const auto& mo : m.at("motions"))
            s.motions.push_back({mo.at("symbol"), mo.at("patch"), mo.at("t0"), mo.at("t1"), mo.at("phase")});
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace tss
